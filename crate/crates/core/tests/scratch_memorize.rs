use mapbert_core::maskformer::{Maskformer, MaskformerConfig};
use mapbert_core::nn::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use mapbert_core::quantizers::BitTokenGrid;
use mapbert_core::rng::Rng;

#[test]
#[ignore]
fn transformer_memorizes_fixed_grids() {
    let cfg = MaskformerConfig {
        dim: 128,
        layers: 4,
        heads: 4,
        bits: 6,
        grid_rows: 8,
        grid_cols: 8,
        object_categories: 4,
        p_obj: 0.5,
        decode: mapbert_core::maskformer::DecodeMode::SinglePass,
        mlp_ratio: 4,
    };
    let mut rng = Rng::new(1);
    let grids: Vec<BitTokenGrid> = (0..4)
        .map(|_| {
            let toks: Vec<u32> = (0..64).map(|_| rng.below(64) as u32).collect();
            BitTokenGrid::new(8, 8, 6, toks).unwrap()
        })
        .collect();

    let mut model = Maskformer::new(cfg, 7).unwrap();
    let mut flat: Vec<Tensor> = model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
    let mut state = AdamState::for_params(&flat);
    let adam = AdamConfig::with_lr(1e-3);

    for step in 0..1500 {
        let g = &grids[step % 4];
        // mask 30% random positions
        let all: Vec<usize> = (0..64).collect();
        let positions = rng.choose_distinct(&all, 20);
        let mut input = g.clone();
        for &p in &positions {
            input.set_token(p / 8, p % 8, 64).unwrap();
        }
        let mut tape = Tape::new();
        let vars = model.leaf_params_for_tests(&mut tape);
        let logits = model.forward_on_for_tests(&mut tape, &vars, &input, None).unwrap();
        let loss = mapbert_core::maskformer::mt_loss_on_for_tests(&mut tape, logits, g, &positions).unwrap();
        let lv = tape.value(loss).item();
        if step % 300 == 0 {
            println!("step {step}: loss {lv:.4}");
        }
        tape.backward(loss).unwrap();
        let grads: Vec<Tensor> = vars.ordered.iter().map(|&v| tape.grad(v).clone()).collect();
        adam_step(&mut flat, &grads, &mut state, &adam).unwrap();
        model.set_params_for_tests(&flat);
    }
}
