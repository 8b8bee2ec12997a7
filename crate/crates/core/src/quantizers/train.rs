//! Training loops for the two map tokenizers.
//!
//! Both loops share the same scaffolding: deterministic train/val split,
//! per-sample tapes with gradient accumulation over a batch, Adam updates,
//! per-epoch train/val loss tracking, and best-validation weight selection.
//! A non-finite loss aborts with the failing epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::SemanticMap;
use crate::nn::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::quantizers::bitvae::{bitvae_loss, weighted_recon_loss, BitVae, BitVaeConfig};
use crate::quantizers::vq::{VqConfig, VqVae};
use crate::rng::Rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of maps held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch: 8,
            lr: 2e-3,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::invalid("epochs and batch must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must be in [0, 1)"));
        }
        if self.lr <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    /// Cosine-decayed learning rate for an epoch:`lr * (0.05 + 0.95 *
    /// (1 + cos(pi * t / T)) / 2)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let u = epoch as f64 / self.epochs.max(1) as f64;
        self.lr * (0.05 + 0.95 * (1.0 + (std::f64::consts::PI * u).cos()) / 2.0)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_total: f64,
    pub train_bce: f64,
    pub train_iou: f64,
    pub val_total: f64,
    /// Hard (argmax) pooled IoU on the validation split.
    pub val_hard_iou: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub epochs: Vec<EpochStats>,
}

/// Deterministic train/val index split.
pub(crate) fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    Rng::derive(seed, 0x5917).shuffle(&mut indices);
    let val_count = if n > 1 {
        ((n as f64 * val_fraction).round() as usize).min(n - 1)
    } else {
        0
    };
    let val = indices.split_off(n - val_count);
    (indices, val)
}

/// Pooled hard IoU between two label maps: agreements / (agreements + 2 * disagreements).
fn hard_iou(pred: &SemanticMap, gt: &SemanticMap) -> f64 {
    let agree = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .filter(|(a, b)| a == b)
        .count();
    let total = gt.labels().len();
    let disagree = total - agree;
    agree as f64 / (agree + 2 * disagree) as f64
}

fn add_into(acc: &mut [Tensor], grads: &[&Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (dst, &src) in a.data_mut().iter_mut().zip(g.data()) {
            *dst += src;
        }
    }
}

fn scale_all(acc: &mut [Tensor], factor: f32) {
    for t in acc.iter_mut() {
        for v in t.data_mut() {
            *v *= factor;
        }
    }
}

fn check_dataset(maps: &[SemanticMap], channels: usize) -> Result<()> {
    if maps.is_empty() {
        return Err(Error::invalid("training requires a nonempty dataset"));
    }
    let (h, w) = (maps[0].height(), maps[0].width());
    for m in maps {
        if m.height() != h || m.width() != w || m.channels() != channels {
            return Err(Error::shape(
                "training dataset geometry",
                &[m.height(), m.width(), m.channels()],
                &[h, w, channels],
            ));
        }
    }
    Ok(())
}

/// Train the bit autoencoder; returns the best-validation model and the
/// per-epoch loss trace.
pub fn train_bitvae(
    maps: &[SemanticMap],
    cfg: &BitVaeConfig,
    tcfg: &TrainConfig,
) -> Result<(BitVae, LossTrace)> {
    cfg.validate()?;
    tcfg.validate()?;
    check_dataset(maps, cfg.channels)?;

    let mut model = BitVae::new(cfg.clone(), tcfg.seed)?;
    let mut flat: Vec<Tensor> = model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
    let mut state = AdamState::for_params(&flat);

    let (train_idx, val_idx) = split_indices(maps.len(), tcfg.val_fraction, tcfg.seed);
    let mut order = train_idx.clone();
    let mut rng = Rng::derive(tcfg.seed, 0x0E9);
    let mut trace = LossTrace::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;

    for epoch in 0..tcfg.epochs {
        let adam = AdamConfig::with_lr(tcfg.lr_at(epoch));
        rng.shuffle(&mut order);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        for chunk in order.chunks(tcfg.batch) {
            let mut accum: Vec<Tensor> =
                flat.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
            for &mi in chunk {
                let target = maps[mi].to_tensor();
                let mut tape = Tape::new();
                let vars = model.leaf_params(&mut tape);
                let input = tape.leaf(target.clone());
                let latent = model.encode_on(&mut tape, &vars, input)?;
                let bits = tape.binarize_ste(latent);
                let probs = model.decode_on(&mut tape, &vars, bits)?;
                let bce = tape.bce_loss(probs, &target)?;
                let iou = tape.soft_iou_loss(probs, &target)?;
                let total = tape.axpby(cfg.lambda_bce, bce, cfg.lambda_iou, iou)?;

                let total_v = tape.value(total).item() as f64;
                if !total_v.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                sums.0 += total_v;
                sums.1 += tape.value(bce).item() as f64;
                sums.2 += tape.value(iou).item() as f64;

                tape.backward(total)?;
                let grads: Vec<&Tensor> = vars.ordered.iter().map(|&v| tape.grad(v)).collect();
                add_into(&mut accum, &grads);
            }
            scale_all(&mut accum, 1.0 / chunk.len() as f32);
            adam_step(&mut flat, &accum, &mut state, &adam)?;
            model.set_params(&flat);
        }

        let n_train = order.len().max(1) as f64;
        let (val_total, val_hard_iou) = if val_idx.is_empty() {
            (sums.0 / n_train, f64::NAN)
        } else {
            let mut total = 0.0;
            let mut iou = 0.0;
            for &vi in &val_idx {
                let target = maps[vi].to_tensor();
                let probs = model.reconstruct(&maps[vi])?;
                total += bitvae_loss(&target, &probs, cfg)?.total;
                iou += hard_iou(&BitVae::argmax_map(&probs)?, &maps[vi]);
            }
            (total / val_idx.len() as f64, iou / val_idx.len() as f64)
        };

        trace.epochs.push(EpochStats {
            epoch,
            train_total: sums.0 / n_train,
            train_bce: sums.1 / n_train,
            train_iou: sums.2 / n_train,
            val_total,
            val_hard_iou,
        });

        if best.as_ref().map_or(true, |(b, _)| val_total < *b) {
            best = Some((val_total, flat.clone()));
        }
    }

    if let Some((_, weights)) = best {
        model.set_params(&weights);
    }
    Ok((model, trace))
}

/// Train the VQ baseline; same scaffolding plus codebook/commitment terms.
pub fn train_vq(
    maps: &[SemanticMap],
    cfg: &VqConfig,
    tcfg: &TrainConfig,
) -> Result<(VqVae, LossTrace)> {
    cfg.validate()?;
    tcfg.validate()?;
    check_dataset(maps, cfg.channels)?;

    let mut model = VqVae::new(cfg.clone(), tcfg.seed)?;

    // Seed the codebook from real latents so codes start where the data is.
    {
        let mut latents: Vec<Vec<f32>> = Vec::new();
        'outer: for map in maps {
            let rows = model.encode_rows(&map.to_tensor())?;
            let dim = cfg.code_dim;
            for r in 0..rows.shape()[0] {
                latents.push(rows.data()[r * dim..(r + 1) * dim].to_vec());
                if latents.len() >= cfg.codes {
                    break 'outer;
                }
            }
        }
        model.init_codebook_from(&latents, tcfg.seed);
    }

    let mut flat: Vec<Tensor> = model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
    let mut state = AdamState::for_params(&flat);

    let (train_idx, val_idx) = split_indices(maps.len(), tcfg.val_fraction, tcfg.seed);
    let mut order = train_idx.clone();
    let mut rng = Rng::derive(tcfg.seed, 0x0EA);
    let mut trace = LossTrace::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;

    for epoch in 0..tcfg.epochs {
        let adam = AdamConfig::with_lr(tcfg.lr_at(epoch));
        rng.shuffle(&mut order);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        for chunk in order.chunks(tcfg.batch) {
            let mut accum: Vec<Tensor> =
                flat.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
            for &mi in chunk {
                let target = maps[mi].to_tensor();
                let (h, w) = (
                    target.shape()[1] / cfg.patch_size,
                    target.shape()[2] / cfg.patch_size,
                );
                let mut tape = Tape::new();
                let (vars, cb) = model.leaf_params(&mut tape);
                let input = tape.leaf(target.clone());
                let latent = model.encode_on(&mut tape, &vars, input)?;
                let rows = tape.chw_to_rows(latent)?;
                let (q_rows, indices) = tape.vq_quantize_ste(rows, cb)?;
                let q = tape.rows_to_chw(q_rows, h, w)?;
                let probs = model.decode_on(&mut tape, &vars, q)?;
                let bce = tape.bce_loss(probs, &target)?;
                let iou = tape.soft_iou_loss(probs, &target)?;
                let recon = tape.axpby(cfg.lambda_bce, bce, cfg.lambda_iou, iou)?;
                let cb_loss = tape.vq_codebook_loss(rows, cb, &indices)?;
                let commit = tape.vq_commitment_loss(rows, cb, &indices)?;
                let aux = tape.axpby(1.0, cb_loss, cfg.beta, commit)?;
                let total = tape.axpby(1.0, recon, 1.0, aux)?;

                let total_v = tape.value(total).item() as f64;
                if !total_v.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                sums.0 += total_v;
                sums.1 += tape.value(bce).item() as f64;
                sums.2 += tape.value(iou).item() as f64;

                tape.backward(total)?;
                let grads: Vec<&Tensor> = vars.ordered.iter().map(|&v| tape.grad(v)).collect();
                add_into(&mut accum, &grads);
            }
            scale_all(&mut accum, 1.0 / chunk.len() as f32);
            adam_step(&mut flat, &accum, &mut state, &adam)?;
            model.set_params(&flat);
        }

        let n_train = order.len().max(1) as f64;
        let (val_total, val_hard_iou) = if val_idx.is_empty() {
            (sums.0 / n_train, f64::NAN)
        } else {
            let mut total = 0.0;
            let mut iou = 0.0;
            for &vi in &val_idx {
                let target = maps[vi].to_tensor();
                let probs = model.reconstruct(&maps[vi])?;
                total += weighted_recon_loss(&target, &probs, cfg.lambda_bce, cfg.lambda_iou)?
                    .total;
                iou += hard_iou(&BitVae::argmax_map(&probs)?, &maps[vi]);
            }
            (total / val_idx.len() as f64, iou / val_idx.len() as f64)
        };

        trace.epochs.push(EpochStats {
            epoch,
            train_total: sums.0 / n_train,
            train_bce: sums.1 / n_train,
            train_iou: sums.2 / n_train,
            val_total,
            val_hard_iou,
        });

        if best.as_ref().map_or(true, |(b, _)| val_total < *b) {
            best = Some((val_total, flat.clone()));
        }
    }

    if let Some((_, weights)) = best {
        model.set_params(&weights);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::MapTokenizer;
    use crate::scenegen::{generate_dataset, SceneSpec};

    fn tiny_maps(n: usize) -> Vec<SemanticMap> {
        let mut spec = SceneSpec::desk_default(0);
        spec.height = 16;
        spec.width = 16;
        spec.patch_size = 4;
        spec.room_count = (1, 2);
        generate_dataset(&spec, n, 7).unwrap()
    }

    fn tiny_cfg() -> BitVaeConfig {
        BitVaeConfig {
            bits: 4,
            patch_size: 4,
            channels: 6,
            enc_width: 8,
            dec_width: 8,
            dec_blocks: 1,
            smooth_width: 4,
            lambda_bce: 1.0,
            lambda_iou: 1.0,
        }
    }

    #[test]
    fn five_epochs_reduce_training_loss() {
        let maps = tiny_maps(4);
        let tcfg = TrainConfig {
            epochs: 5,
            batch: 2,
            lr: 3e-3,
            seed: 1,
            val_fraction: 0.0,
        };
        let (_, trace) = train_bitvae(&maps, &tiny_cfg(), &tcfg).unwrap();
        let first = trace.epochs.first().unwrap().train_total;
        let last = trace.epochs.last().unwrap().train_total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn same_seed_gives_identical_first_epoch() {
        let maps = tiny_maps(4);
        let tcfg = TrainConfig {
            epochs: 1,
            batch: 2,
            lr: 1e-3,
            seed: 9,
            val_fraction: 0.0,
        };
        let (_, a) = train_bitvae(&maps, &tiny_cfg(), &tcfg).unwrap();
        let (_, b) = train_bitvae(&maps, &tiny_cfg(), &tcfg).unwrap();
        assert_eq!(a.epochs[0].train_total, b.epochs[0].train_total);
        assert_eq!(a.epochs[0].train_bce, b.epochs[0].train_bce);
    }

    #[test]
    fn zero_iou_weight_reduces_total_to_bce() {
        let maps = tiny_maps(3);
        let mut cfg = tiny_cfg();
        cfg.lambda_iou = 0.0;
        let tcfg = TrainConfig {
            epochs: 2,
            batch: 3,
            lr: 1e-3,
            seed: 2,
            val_fraction: 0.0,
        };
        let (_, trace) = train_bitvae(&maps, &cfg, &tcfg).unwrap();
        for e in &trace.epochs {
            assert!((e.train_total - e.train_bce).abs() < 1e-9);
        }
    }

    #[test]
    fn vq_training_runs_and_reduces_loss() {
        let maps = tiny_maps(4);
        let cfg = VqConfig {
            codes: 16,
            code_dim: 8,
            beta: 0.25,
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
            epochs: 5,
            batch: 2,
            lr: 3e-3,
            seed: 3,
            val_fraction: 0.0,
        };
        let (model, trace) = train_vq(&maps, &cfg, &tcfg).unwrap();
        let first = trace.epochs.first().unwrap().train_total;
        let last = trace.epochs.last().unwrap().train_total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        let tokens = model.tokenize(&maps[0]).unwrap();
        assert!(tokens.tokens().iter().all(|&t| t < 16));
    }

    #[test]
    fn empty_dataset_rejected() {
        let tcfg = TrainConfig::default();
        assert!(train_bitvae(&[], &tiny_cfg(), &tcfg).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a_train, a_val) = split_indices(100, 0.1, 5);
        let (b_train, b_val) = split_indices(100, 0.1, 5);
        assert_eq!(a_train, b_train);
        assert_eq!(a_val, b_val);
        assert_eq!(a_val.len(), 10);
        let mut all: Vec<usize> = a_train.iter().chain(&a_val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
