use mapbert_core::nn::Checkpoint;
use mapbert_core::quantizers::BitVae;
use mapbert_core::scenegen::{generate_dataset, SceneSpec};

#[test]
#[ignore]
fn feature_magnitudes() {
    let vae = BitVae::from_checkpoint(
        &Checkpoint::load("/tmp/mbtest/out/ckpt/bitvae.ckpt".as_ref()).unwrap(),
    )
    .unwrap();
    let spec = SceneSpec::desk_default(0);
    let maps = generate_dataset(&spec, 8, 77).unwrap();
    let mut inside = 0usize;
    let mut total = 0usize;
    let mut max_abs = 0.0f32;
    for map in &maps {
        let m = vae.encode(&map.to_tensor()).unwrap();
        for &v in m.data() {
            total += 1;
            if v.abs() <= 1.0 {
                inside += 1;
            }
            max_abs = max_abs.max(v.abs());
        }
    }
    println!(
        "features inside [-1,1]: {inside}/{total} ({:.1}%), max |m| = {max_abs:.2}",
        100.0 * inside as f64 / total as f64
    );

    // Token usage histogram
    use mapbert_core::quantizers::MapTokenizer;
    let mut counts = vec![0usize; 64];
    for map in &maps {
        let tokens = vae.tokenize(map).unwrap();
        for &t in tokens.tokens() {
            counts[t as usize] += 1;
        }
    }
    let used = counts.iter().filter(|&&c| c > 0).count();
    println!("distinct tokens used: {used}/64");
}
