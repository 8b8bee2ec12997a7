//! Masked-transformer training over a frozen tokenizer.
//!
//! Each sample tokenizes a complete map, draws a mask plan at the scheduled
//! ratio, replaces the planned positions with the mask token, and minimizes
//! cross-entropy against the ground-truth tokens at those positions. The
//! tokenizer's weights never receive gradients. Validation tracks top-1
//! restoration accuracy at a fixed 50% random masking.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{object_patches, object_row, PatchCoord, SemanticMap};
use crate::maskformer::masking::sample_plan_with;
use crate::maskformer::model::{mt_loss_on, Maskformer, MaskformerConfig};
use crate::maskformer::schedule::MaskSchedule;
use crate::nn::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::quantizers::{BitTokenGrid, MapTokenizer};
use crate::quantizers::{LossTrace, TrainConfig};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MtEpochStats {
    pub epoch: usize,
    pub mask_ratio: f64,
    pub train_loss: f64,
    /// Top-1 restoration accuracy (percent) on validation maps at 50%
    /// random masking.
    pub val_restoration: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AccuracyTrace {
    pub epochs: Vec<MtEpochStats>,
}

/// Pre-tokenized map with cached object-patch sets.
struct MapRecord {
    tokens: BitTokenGrid,
    present: Vec<u8>,
    object_patches: BTreeMap<u8, BTreeSet<PatchCoord>>,
}

fn build_records(
    maps: &[SemanticMap],
    tokenizer: &dyn MapTokenizer,
) -> Result<Vec<MapRecord>> {
    maps.iter()
        .map(|map| {
            let tokens = tokenizer.tokenize(map)?;
            let present = map.present_object_categories();
            let object_patches = present
                .iter()
                .map(|&c| Ok((c, object_patches(map, c, tokenizer.patch_size())?)))
                .collect::<Result<_>>()?;
            Ok(MapRecord {
                tokens,
                present,
                object_patches,
            })
        })
        .collect()
}

fn masked_input(gt: &BitTokenGrid, positions: &[usize]) -> BitTokenGrid {
    let mut tokens = gt.clone();
    let cols = tokens.cols();
    let mask = tokens.mask_token();
    for &p in positions {
        tokens
            .set_token(p / cols, p % cols, mask)
            .expect("mask token is always legal");
    }
    tokens
}

/// Top-1 restoration accuracy (percent) of `model` on `records`, masking
/// `ratio` of each grid uniformly at random.
fn restoration_on_records(
    model: &Maskformer,
    records: &[&MapRecord],
    ratio: f64,
    seed: u64,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, rec) in records.iter().enumerate() {
        let mut rng = Rng::derive(seed, i as u64);
        let n = rec.tokens.rows() * rec.tokens.cols();
        let k = ((ratio * n as f64).ceil() as usize).clamp(1, n);
        let all: Vec<usize> = (0..n).collect();
        let positions = rng.choose_distinct(&all, k);
        let input = masked_input(&rec.tokens, &positions);
        let logits = model.forward(&input, None)?;
        let classes = logits.shape()[1];
        for &p in &positions {
            let row = &logits.data()[p * classes..(p + 1) * classes];
            let mut best = 0usize;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            if best as u32 == rec.tokens.tokens()[p] {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(100.0 * hits as f64 / total.max(1) as f64)
}

/// Train the masked transformer on a frozen tokenizer. Returns the final
/// model and the per-epoch loss/accuracy trace.
pub fn train_maskformer(
    maps: &[SemanticMap],
    tokenizer: &dyn MapTokenizer,
    cfg: &MaskformerConfig,
    tcfg: &TrainConfig,
) -> Result<(Maskformer, AccuracyTrace)> {
    cfg.validate()?;
    tcfg.validate()?;
    if maps.is_empty() {
        return Err(Error::invalid("training requires a nonempty dataset"));
    }
    if cfg.bits != tokenizer.bits() {
        return Err(Error::shape(
            "maskformer vocabulary",
            &[cfg.bits],
            &[tokenizer.bits()],
        ));
    }
    let grid_rows = maps[0].height() / tokenizer.patch_size();
    let grid_cols = maps[0].width() / tokenizer.patch_size();
    if (cfg.grid_rows, cfg.grid_cols) != (grid_rows, grid_cols) {
        return Err(Error::shape(
            "maskformer grid",
            &[cfg.grid_rows, cfg.grid_cols],
            &[grid_rows, grid_cols],
        ));
    }

    let records = build_records(maps, tokenizer)?;
    let (train_idx, val_idx) =
        crate::quantizers::split_indices(maps.len(), tcfg.val_fraction, tcfg.seed);
    let val_records: Vec<&MapRecord> = val_idx.iter().map(|&i| &records[i]).collect();

    let mut model = Maskformer::new(cfg.clone(), tcfg.seed)?;
    let mut flat: Vec<Tensor> = model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
    let mut state = AdamState::for_params(&flat);

    let schedule = MaskSchedule::new(tcfg.epochs);
    let mut order = train_idx.clone();
    let mut rng = Rng::derive(tcfg.seed, 0x317A);
    let mut trace = AccuracyTrace::default();

    for epoch in 0..tcfg.epochs {
        let adam = AdamConfig::with_lr(tcfg.lr_at(epoch));
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut sample_count = 0usize;
        let mut epoch_ratio = 0.0f64;
        let mut batch_count = 0usize;
        for chunk in order.chunks(tcfg.batch) {
            // Phase 1 resamples the ratio per batch; phase 2 is fixed.
            let ratio = schedule.ratio_at(epoch as f64, &mut rng);
            epoch_ratio += ratio;
            batch_count += 1;

            let mut accum: Vec<Tensor> =
                flat.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
            for &mi in chunk {
                let rec = &records[mi];
                let plan = sample_plan_with(
                    cfg.grid_rows,
                    cfg.grid_cols,
                    tokenizer.patch_size(),
                    ratio,
                    cfg.p_obj,
                    &mut rng,
                    &rec.present,
                    |c| rec.object_patches[&c].clone(),
                )?;
                let positions: Vec<usize> = plan
                    .masked_patches()
                    .iter()
                    .map(|&(r, c)| r * cfg.grid_cols + c)
                    .collect();
                let input = masked_input(&rec.tokens, &positions);
                let target = plan.target_category().and_then(object_row);

                let mut tape = Tape::new();
                let vars = model.leaf_params(&mut tape);
                let logits = model.forward_on(&mut tape, &vars, &input, target)?;
                let loss = mt_loss_on(&mut tape, logits, &rec.tokens, &positions)?;

                let loss_v = tape.value(loss).item() as f64;
                if !loss_v.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                loss_sum += loss_v;
                sample_count += 1;

                tape.backward(loss)?;
                for (acc, &v) in accum.iter_mut().zip(&vars.ordered) {
                    for (dst, &src) in acc.data_mut().iter_mut().zip(tape.grad(v).data()) {
                        *dst += src;
                    }
                }
            }
            for t in accum.iter_mut() {
                let inv = 1.0 / chunk.len() as f32;
                for v in t.data_mut() {
                    *v *= inv;
                }
            }
            adam_step(&mut flat, &accum, &mut state, &adam)?;
            model.set_params(&flat);
        }

        let val_restoration = if val_records.is_empty() {
            f64::NAN
        } else {
            restoration_on_records(&model, &val_records, 0.5, tcfg.seed ^ epoch as u64)?
        };
        trace.epochs.push(MtEpochStats {
            epoch,
            mask_ratio: epoch_ratio / batch_count.max(1) as f64,
            train_loss: loss_sum / sample_count.max(1) as f64,
            val_restoration,
        });
    }

    Ok((model, trace))
}

/// Convert a tokenizer loss trace into JSON lines. Shared trace plumbing
/// lives here so both training stages emit the same shape.
pub fn trace_to_jsonl<T: Serialize>(rows: &[T], header: &serde_json::Value) -> String {
    let mut out = String::new();
    out.push_str(&header.to_string());
    out.push('\n');
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("serializable row"));
        out.push('\n');
    }
    out
}

/// JSON-lines form of a tokenizer loss trace.
pub fn loss_trace_jsonl(trace: &LossTrace, header: &serde_json::Value) -> String {
    trace_to_jsonl(&trace.epochs, header)
}

/// JSON-lines form of a transformer accuracy trace.
pub fn accuracy_trace_jsonl(trace: &AccuracyTrace, header: &serde_json::Value) -> String {
    trace_to_jsonl(&trace.epochs, header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::{train_bitvae, BitVaeConfig};
    use crate::scenegen::{generate_dataset, SceneSpec};

    fn tiny_setup() -> (Vec<SemanticMap>, crate::quantizers::BitVae) {
        let mut spec = SceneSpec::desk_default(0);
        spec.height = 16;
        spec.width = 16;
        spec.patch_size = 4;
        spec.room_count = (1, 2);
        spec.objects_per_room = (1, 2);
        spec.object_size = (2, 3);
        let maps = generate_dataset(&spec, 6, 11).unwrap();
        let cfg = BitVaeConfig {
            bits: 4,
            patch_size: 4,
            channels: 6,
            enc_width: 8,
            dec_width: 8,
            dec_blocks: 1,
            smooth_width: 4,
            lambda_bce: 1.0,
            lambda_iou: 1.0,
        };
        let tcfg = TrainConfig {
            epochs: 1,
            batch: 3,
            lr: 1e-3,
            seed: 1,
            val_fraction: 0.0,
        };
        let (vae, _) = train_bitvae(&maps, &cfg, &tcfg).unwrap();
        (maps, vae)
    }

    fn tiny_mf_cfg() -> MaskformerConfig {
        MaskformerConfig {
            dim: 16,
            layers: 1,
            heads: 2,
            bits: 4,
            grid_rows: 4,
            grid_cols: 4,
            object_categories: 4,
            p_obj: 0.5,
            decode: crate::maskformer::DecodeMode::SinglePass,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn training_reduces_loss() {
        let (maps, vae) = tiny_setup();
        let tcfg = TrainConfig {
            epochs: 6,
            batch: 3,
            lr: 3e-3,
            seed: 2,
            val_fraction: 0.0,
        };
        let (_, trace) = train_maskformer(&maps, &vae, &tiny_mf_cfg(), &tcfg).unwrap();
        let first = trace.epochs.first().unwrap().train_loss;
        let last = trace.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn same_seed_identical_trace() {
        let (maps, vae) = tiny_setup();
        let tcfg = TrainConfig {
            epochs: 2,
            batch: 3,
            lr: 1e-3,
            seed: 5,
            val_fraction: 0.34,
        };
        let (_, a) = train_maskformer(&maps, &vae, &tiny_mf_cfg(), &tcfg).unwrap();
        let (_, b) = train_maskformer(&maps, &vae, &tiny_mf_cfg(), &tcfg).unwrap();
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.val_restoration, y.val_restoration);
        }
    }

    #[test]
    fn untrained_model_restores_at_chance_level() {
        // Chance-level oracle: against uniformly random ground-truth tokens
        // any fixed predictor is correct with probability exactly 1/2^bits,
        // so accuracy must land within three binomial standard deviations.
        let mut rng = Rng::new(123);
        let records: Vec<MapRecord> = (0..50)
            .map(|_| {
                let tokens: Vec<u32> = (0..16).map(|_| rng.below(16) as u32).collect();
                MapRecord {
                    tokens: BitTokenGrid::new(4, 4, 4, tokens).unwrap(),
                    present: vec![],
                    object_patches: BTreeMap::new(),
                }
            })
            .collect();
        let refs: Vec<&MapRecord> = records.iter().collect();
        let model = Maskformer::new(tiny_mf_cfg(), 99).unwrap();
        let acc = restoration_on_records(&model, &refs, 0.5, 7).unwrap();
        // 50 grids x 8 masked positions = 400 Bernoulli(1/16) draws:
        // mean 6.25%, sigma ~1.21pp.
        let sigma = 100.0 * (400.0f64 * (1.0 / 16.0) * (15.0 / 16.0)).sqrt() / 400.0;
        assert!(
            (acc - 6.25).abs() <= 3.0 * sigma,
            "accuracy {acc}% outside chance band 6.25% +- {:.2}",
            3.0 * sigma
        );
    }

    #[test]
    fn vocabulary_mismatch_rejected() {
        let (maps, vae) = tiny_setup();
        let mut cfg = tiny_mf_cfg();
        cfg.bits = 5;
        let tcfg = TrainConfig::default();
        assert!(train_maskformer(&maps, &vae, &cfg, &tcfg).is_err());
    }
}
