use mapbert_core::map::{apply_mask, object_patches, MaskPlan};
use mapbert_core::maskformer::{train_maskformer, Completer, MaskformerConfig};
use mapbert_core::nn::Checkpoint;
use mapbert_core::quantizers::{BitVae, MapTokenizer, TrainConfig};
use mapbert_core::scenegen::{generate_dataset, SceneSpec};

#[test]
#[ignore]
fn overfit_conditioning_good_vae() {
    let vae = BitVae::from_checkpoint(
        &Checkpoint::load("/tmp/mbtest/out/ckpt/bitvae.ckpt".as_ref()).unwrap(),
    )
    .unwrap();
    let spec = SceneSpec::desk_default(0);
    let maps = generate_dataset(&spec, 64, 2222).unwrap();

    let mf_cfg = MaskformerConfig::desk_default(6, 8, 8, 4);
    let mt_tcfg = TrainConfig {
        epochs: 80,
        batch: 8,
        lr: 3e-3,
        seed: 6,
        val_fraction: 0.0,
    };
    let (mf, trace) = train_maskformer(&maps, &vae, &mf_cfg, &mt_tcfg).unwrap();
    println!(
        "mt loss {:.3} -> {:.3}",
        trace.epochs.first().unwrap().train_loss,
        trace.epochs.last().unwrap().train_loss
    );

    // Focused masking on TRAIN maps: hide only the object's patches.
    let completer = Completer::new(&vae, &mf);
    let mut token_match = 0usize;
    let mut token_total = 0usize;
    let mut ssr_hit = 0usize;
    let mut trials = 0usize;
    for map in &maps {
        for c in map.present_object_categories() {
            let obj = object_patches(map, c, 8).unwrap();
            let plan = MaskPlan::for_map(map, 8, obj.iter().copied(), Some(c)).unwrap();
            let pm = apply_mask(map, &plan).unwrap();
            let gt_tokens = vae.tokenize(map).unwrap();
            let input = vae.tokenize_partial(&pm, 0.5).unwrap();
            let predicted = completer.predict_tokens(&input, Some((c - 2) as usize)).unwrap();
            for &(pr, pc) in plan.masked_patches() {
                if input.is_masked(pr, pc) {
                    token_total += 1;
                    if predicted.token(pr, pc) == gt_tokens.token(pr, pc) {
                        token_match += 1;
                    }
                }
            }
            let pred = completer.generate(&pm, Some(c)).unwrap();
            let hit = map
                .labels()
                .iter()
                .zip(pred.labels())
                .any(|(&g, &p)| g == c && p == c);
            trials += 1;
            if hit {
                ssr_hit += 1;
            }
        }
    }
    println!(
        "TRAIN focused: token top-1 {:.1}% ({token_match}/{token_total}), sSR {:.1}% ({ssr_hit}/{trials})",
        100.0 * token_match as f64 / token_total as f64,
        100.0 * ssr_hit as f64 / trials as f64,
    );
}
