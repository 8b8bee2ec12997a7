use mapbert_core::eval::object_aware_plan;
use mapbert_core::map::apply_mask;
use mapbert_core::maskformer::Maskformer;
use mapbert_core::nn::Checkpoint;
use mapbert_core::quantizers::{BitVae, MapTokenizer};
use mapbert_core::rng::Rng;
use mapbert_core::scenegen::{generate_dataset, SceneSpec};

#[test]
#[ignore]
fn conditioning_mass_probe() {
    let vae = BitVae::from_checkpoint(
        &Checkpoint::load("/tmp/mbtest/out/ckpt/bitvae.ckpt".as_ref()).unwrap(),
    )
    .unwrap();
    let mf = Maskformer::from_checkpoint(
        &Checkpoint::load("/tmp/mbtest/out/ckpt/maskformer.ckpt".as_ref()).unwrap(),
    )
    .unwrap();

    // Которые tokens decode with object content (neutral context)?
    let free_map = {
        let mut labels = vec![0u8; 64 * 64];
        for c in 0..64 {
            labels[c] = 1;
            labels[63 * 64 + c] = 1;
            labels[c * 64] = 1;
            labels[c * 64 + 63] = 1;
        }
        mapbert_core::map::SemanticMap::from_labels(64, 64, 6, labels).unwrap()
    };
    let base = vae.tokenize(&free_map).unwrap();
    let mut obj_tokens = Vec::new();
    for tok in 0..64u32 {
        let mut grid = base.clone();
        grid.set_token(3, 3, tok).unwrap();
        let out = vae.decode_tokens(&grid).unwrap();
        let objs: usize = (24..32)
            .flat_map(|i| (24..32).map(move |j| (i, j)))
            .filter(|&(i, j)| out.label(i, j) >= 2)
            .count();
        if objs > 0 {
            obj_tokens.push(tok);
        }
    }
    println!("object-bearing tokens: {} of 64", obj_tokens.len());

    let spec = SceneSpec::desk_default(0);
    let maps = generate_dataset(&spec, 12, 31415).unwrap();
    let mut max_obj_p_target = 0.0f64;
    let mut max_obj_p_null = 0.0f64;
    let mut sum_obj_p_target = 0.0f64;
    let mut sum_obj_p_null = 0.0f64;
    let mut count = 0usize;
    for (mi, map) in maps.iter().enumerate() {
        let present = map.present_object_categories();
        if present.is_empty() {
            continue;
        }
        let c = present[0];
        let mut rng = Rng::derive(42, mi as u64);
        let plan = object_aware_plan(map, c, 0.5, 8, &mut rng).unwrap();
        let pm = apply_mask(map, &plan).unwrap();
        let tokens = vae.tokenize_partial(&pm, 0.5).unwrap();
        let gt = vae.tokenize(map).unwrap();
        let logits_t = mf.forward(&tokens, Some((c - 2) as usize)).unwrap();
        let logits_n = mf.forward(&tokens, None).unwrap();
        for &(pr, pc) in plan.masked_patches() {
            let pos = pr * 8 + pc;
            // only at positions where GT token is object-bearing
            if !obj_tokens.contains(&gt.token(pr, pc)) {
                continue;
            }
            let softmax = |logits: &mapbert_core::nn::Tensor, pos: usize| -> Vec<f64> {
                let row: Vec<f64> = (0..64).map(|k| logits.at(&[pos, k]) as f64).collect();
                let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.iter().map(|e| e / z).collect()
            };
            let pt = softmax(&logits_t, pos);
            let pn = softmax(&logits_n, pos);
            let obj_mass_t: f64 = obj_tokens.iter().map(|&k| pt[k as usize]).sum();
            let obj_mass_n: f64 = obj_tokens.iter().map(|&k| pn[k as usize]).sum();
            max_obj_p_target = max_obj_p_target.max(obj_mass_t);
            max_obj_p_null = max_obj_p_null.max(obj_mass_n);
            sum_obj_p_target += obj_mass_t;
            sum_obj_p_null += obj_mass_n;
            count += 1;
        }
    }
    println!(
        "at GT-object masked positions ({count}): mean object-token mass target={:.4} null={:.4}; max target={:.4} null={:.4}",
        sum_obj_p_target / count as f64,
        sum_obj_p_null / count as f64,
        max_obj_p_target,
        max_obj_p_null
    );
}
