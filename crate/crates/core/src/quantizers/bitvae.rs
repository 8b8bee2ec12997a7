//! Binarizing map autoencoder.
//!
//! Encodes each map patch into `b` latent features, sign-binarizes them into
//! bits, and packs the bits into an integer token without any codebook
//! lookup. The decoder reconstructs per-channel probabilities from the bit
//! planes. Training minimizes `lambda_bce * BCE + lambda_iou * softIoU`;
//! gradients cross the binarizer straight through, clipped to inputs in
//! [-1, 1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{PartialMap, SemanticMap};
use crate::nn::{Checkpoint, Tape, Tensor, Var};
use crate::quantizers::backbone::{Backbone, BackboneShape, BackboneVars};
use crate::quantizers::{bits_to_index, index_to_bits, BitTokenGrid, MapTokenizer};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitVaeConfig {
    /// Bits per patch token; vocabulary is 2^bits (+1 mask).
    pub bits: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    /// Residual 3x3 blocks at patch resolution.
    pub dec_blocks: usize,
    /// Channels of the full-resolution smoothing stage.
    pub smooth_width: usize,
    pub lambda_bce: f64,
    pub lambda_iou: f64,
}

impl BitVaeConfig {
    /// Desk-scale default: 6 bits over 8x8 patches of a 6-channel map.
    /// The IoU weight is above the BCE weight so rare object channels keep
    /// gradient pressure under heavy class imbalance.
    pub fn desk_default() -> Self {
        BitVaeConfig {
            bits: 6,
            patch_size: 8,
            channels: 6,
            enc_width: 48,
            dec_width: 48,
            dec_blocks: 2,
            smooth_width: 16,
            lambda_bce: 1.0,
            lambda_iou: 3.0,
        }
    }

    /// Paper-scale preset: 9 bits over 16x16 patches of a 224x224 map.
    pub fn paper_scale(channels: usize) -> Self {
        BitVaeConfig {
            bits: 9,
            patch_size: 16,
            channels,
            enc_width: 128,
            dec_width: 128,
            dec_blocks: 4,
            smooth_width: 64,
            lambda_bce: 1.0,
            lambda_iou: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > 16 {
            return Err(Error::invalid(format!("bits {} outside [1, 16]", self.bits)));
        }
        if self.lambda_bce < 0.0 || self.lambda_iou < 0.0 {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        self.backbone_shape().validate()
    }

    fn backbone_shape(&self) -> BackboneShape {
        BackboneShape {
            channels: self.channels,
            latent: self.bits,
            patch_size: self.patch_size,
            enc_width: self.enc_width,
            dec_width: self.dec_width,
            dec_blocks: self.dec_blocks,
            smooth_width: self.smooth_width,
        }
    }
}

/// Elementwise sign binarization (0 maps to -1); no gradient tracking.
pub fn binarize(features: &Tensor) -> Tensor {
    features.map(|v| if v > 0.0 { 1.0 } else { -1.0 })
}

/// BCE / soft-IoU loss components for a reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub iou: f64,
}

pub(crate) fn weighted_recon_loss(
    target: &Tensor,
    pred: &Tensor,
    lambda_bce: f64,
    lambda_iou: f64,
) -> Result<LossParts> {
    let mut tape: Tape<f32> = Tape::new();
    let p = tape.leaf(pred.clone());
    let bce = tape.bce_loss(p, target)?;
    let iou = tape.soft_iou_loss(p, target)?;
    let bce = tape.value(bce).item() as f64;
    let iou = tape.value(iou).item() as f64;
    Ok(LossParts {
        total: lambda_bce * bce + lambda_iou * iou,
        bce,
        iou,
    })
}

/// Weighted reconstruction loss between a one-hot target and a probability
/// map, both (C, H, W).
pub fn bitvae_loss(target: &Tensor, pred: &Tensor, cfg: &BitVaeConfig) -> Result<LossParts> {
    weighted_recon_loss(target, pred, cfg.lambda_bce, cfg.lambda_iou)
}

#[derive(Clone, Debug)]
pub struct BitVae {
    cfg: BitVaeConfig,
    backbone: Backbone,
}

impl BitVae {
    pub fn new(cfg: BitVaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, 0xB17);
        let backbone = Backbone::new(cfg.backbone_shape(), &mut rng)?;
        Ok(BitVae { cfg, backbone })
    }

    pub fn config(&self) -> &BitVaeConfig {
        &self.cfg
    }

    /// Parameters in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.backbone.named_params()
    }

    pub(crate) fn set_params(&mut self, values: &[Tensor]) {
        self.backbone.set_params(values);
    }

    pub(crate) fn leaf_params(&self, tape: &mut Tape<f32>) -> BackboneVars {
        self.backbone.leaf_params(tape)
    }

    #[doc(hidden)]
    pub fn leaf_params_public(&self, tape: &mut Tape<f32>) -> BackboneVars {
        self.backbone.leaf_params(tape)
    }

    #[doc(hidden)]
    pub fn encode_on_public(&self, tape: &mut Tape<f32>, vars: &BackboneVars, input: Var) -> Result<Var> {
        self.backbone.encode_on(tape, vars, input)
    }

    #[doc(hidden)]
    pub fn decode_on_public(&self, tape: &mut Tape<f32>, vars: &BackboneVars, latent: Var) -> Result<Var> {
        self.backbone.decode_on(tape, vars, latent)
    }

    pub(crate) fn encode_on(
        &self,
        tape: &mut Tape<f32>,
        vars: &BackboneVars,
        input: Var,
    ) -> Result<Var> {
        self.backbone.encode_on(tape, vars, input)
    }

    pub(crate) fn decode_on(
        &self,
        tape: &mut Tape<f32>,
        vars: &BackboneVars,
        latent: Var,
    ) -> Result<Var> {
        self.backbone.decode_on(tape, vars, latent)
    }

    /// Patch features m = E(M) as a (bits, H/P, W/P) tensor.
    pub fn encode(&self, input: &Tensor) -> Result<Tensor> {
        self.backbone.encode(input)
    }

    /// Decode a +-1 bit grid (bits, h, w) to channel probabilities (C, H, W).
    pub fn decode(&self, bit_grid: &Tensor) -> Result<Tensor> {
        self.backbone.decode(bit_grid)
    }

    /// Full roundtrip decode(binarize(encode(M))) as channel probabilities.
    pub fn reconstruct(&self, map: &SemanticMap) -> Result<Tensor> {
        let features = self.encode(&map.to_tensor())?;
        self.decode(&binarize(&features))
    }

    /// Argmax a probability map (C, H, W) into a one-hot semantic map.
    pub fn argmax_map(probs: &Tensor) -> Result<SemanticMap> {
        let shape = probs.shape();
        if shape.len() != 3 {
            return Err(Error::shape("argmax_map", shape, &[3]));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let plane = h * w;
        let data = probs.data();
        let mut labels = vec![0u8; plane];
        for (idx, label) in labels.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_v = data[idx];
            for ch in 1..c {
                let v = data[ch * plane + idx];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            *label = best as u8;
        }
        SemanticMap::from_labels(h, w, c, labels)
    }

    fn grid_tokens(&self, features: &Tensor) -> Result<BitTokenGrid> {
        let shape = features.shape();
        let (bits, rows, cols) = (shape[0], shape[1], shape[2]);
        let plane = rows * cols;
        let data = features.data();
        let mut tokens = Vec::with_capacity(plane);
        let mut bitvec = vec![0.0f32; bits];
        for idx in 0..plane {
            for (k, slot) in bitvec.iter_mut().enumerate() {
                *slot = if data[k * plane + idx] > 0.0 { 1.0 } else { -1.0 };
            }
            tokens.push(bits_to_index(&bitvec)?);
        }
        BitTokenGrid::new(rows, cols, bits, tokens)
    }

    pub fn to_checkpoint(&self, seed: u64, fingerprint: &str) -> Checkpoint {
        let blob = serde_json::json!({
            "kind": "bitvae",
            "config": self.cfg,
            "seed": seed,
            "fingerprint": fingerprint,
        });
        let mut ckpt = Checkpoint::new(blob.to_string());
        for (name, tensor) in self.named_params() {
            ckpt.push(name, tensor.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let blob: serde_json::Value = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::invalid(format!("bad checkpoint config blob: {e}")))?;
        if blob["kind"] != "bitvae" {
            return Err(Error::invalid(format!(
                "checkpoint kind {:?} is not bitvae",
                blob["kind"]
            )));
        }
        let cfg: BitVaeConfig = serde_json::from_value(blob["config"].clone())
            .map_err(|e| Error::invalid(format!("bad bitvae config: {e}")))?;
        let mut model = BitVae::new(cfg, 0)?;
        let values: Result<Vec<Tensor>> = model
            .named_params()
            .iter()
            .map(|(name, current)| {
                let stored = ckpt.get(name)?;
                if stored.shape() != current.shape() {
                    return Err(Error::shape(
                        format!("checkpoint tensor {name}"),
                        stored.shape(),
                        current.shape(),
                    ));
                }
                Ok(stored.clone())
            })
            .collect();
        model.set_params(&values?);
        Ok(model)
    }
}

impl MapTokenizer for BitVae {
    fn bits(&self) -> usize {
        self.cfg.bits
    }

    fn patch_size(&self) -> usize {
        self.cfg.patch_size
    }

    fn channels(&self) -> usize {
        self.cfg.channels
    }

    fn tokenize(&self, map: &SemanticMap) -> Result<BitTokenGrid> {
        let features = self.encode(&map.to_tensor())?;
        self.grid_tokens(&features)
    }

    fn tokenize_partial(&self, pm: &PartialMap, theta_obs: f64) -> Result<BitTokenGrid> {
        if !(0.0..=1.0).contains(&theta_obs) {
            return Err(Error::invalid(format!(
                "theta_obs {theta_obs} outside [0, 1]"
            )));
        }
        let features = self.encode(&pm.to_tensor())?;
        let mut tokens = self.grid_tokens(&features)?;
        let mask = tokens.mask_token();
        for r in 0..tokens.rows() {
            for c in 0..tokens.cols() {
                if pm.unobserved_fraction(r, c, self.cfg.patch_size) > theta_obs {
                    tokens.set_token(r, c, mask)?;
                }
            }
        }
        Ok(tokens)
    }

    fn decode_tokens(&self, tokens: &BitTokenGrid) -> Result<SemanticMap> {
        if tokens.bits() != self.cfg.bits {
            return Err(Error::shape(
                "decode_tokens",
                &[tokens.bits()],
                &[self.cfg.bits],
            ));
        }
        if tokens.count_masked() > 0 {
            return Err(Error::invalid(
                "decode_tokens requires a mask-free token grid",
            ));
        }
        let (rows, cols, bits) = (tokens.rows(), tokens.cols(), tokens.bits());
        let plane = rows * cols;
        let mut data = vec![0.0f32; bits * plane];
        for idx in 0..plane {
            let bitvec = index_to_bits(tokens.tokens()[idx], bits)?;
            for (k, &b) in bitvec.iter().enumerate() {
                data[k * plane + idx] = b;
            }
        }
        let latent = Tensor::from_vec(vec![bits, rows, cols], data)?;
        let probs = self.decode(&latent)?;
        BitVae::argmax_map(&probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::MaskPlan;
    use crate::scenegen::{generate_scene, SceneSpec};

    fn small_cfg() -> BitVaeConfig {
        BitVaeConfig {
            bits: 4,
            patch_size: 4,
            channels: 3,
            enc_width: 8,
            dec_width: 8,
            dec_blocks: 1,
            smooth_width: 4,
            lambda_bce: 1.0,
            lambda_iou: 1.0,
        }
    }

    fn random_map(seed: u64, h: usize, w: usize, c: usize) -> SemanticMap {
        let mut rng = Rng::new(seed);
        let labels: Vec<u8> = (0..h * w).map(|_| rng.below(c as u64) as u8).collect();
        SemanticMap::from_labels(h, w, c, labels).unwrap()
    }

    #[test]
    fn encode_shapes() {
        let model = BitVae::new(BitVaeConfig::desk_default(), 1).unwrap();
        let map = random_map(1, 64, 64, 6);
        let m = model.encode(&map.to_tensor()).unwrap();
        assert_eq!(m.shape(), &[6, 8, 8]);

        // Paper-scale geometry: 224x224, patch 16, 9 bits -> 14x14x9.
        let paper = BitVae::new(BitVaeConfig::paper_scale(6), 1).unwrap();
        let big = random_map(2, 224, 224, 6);
        let m = paper.encode(&big.to_tensor()).unwrap();
        assert_eq!(m.shape(), &[9, 14, 14]);
    }

    #[test]
    fn encode_rejects_bad_geometry() {
        let model = BitVae::new(small_cfg(), 1).unwrap();
        let map = random_map(3, 6, 6, 3); // 6 not divisible by 4
        assert!(model.encode(&map.to_tensor()).is_err());
    }

    #[test]
    fn patch_locality() {
        // Changing one patch's pixels changes only that patch's feature
        // column and token.
        let model = BitVae::new(small_cfg(), 2).unwrap();
        let map = random_map(4, 16, 16, 3);
        let base = model.encode(&map.to_tensor()).unwrap();
        let base_tokens = model.tokenize(&map).unwrap();

        let mut labels = map.labels().to_vec();
        // Perturb patch (1, 2): rows 4..8, cols 8..12.
        for r in 4..8 {
            for c in 8..12 {
                labels[r * 16 + c] = (labels[r * 16 + c] + 1) % 3;
            }
        }
        let changed = SemanticMap::from_labels(16, 16, 3, labels).unwrap();
        let after = model.encode(&changed.to_tensor()).unwrap();
        let after_tokens = model.tokenize(&changed).unwrap();

        let plane = 4 * 4;
        for idx in 0..plane {
            let (r, c) = (idx / 4, idx % 4);
            let same =
                (0..4).all(|k| base.data()[k * plane + idx] == after.data()[k * plane + idx]);
            if (r, c) == (1, 2) {
                assert!(!same, "perturbed patch features unchanged");
            } else {
                assert!(same, "patch ({r},{c}) features changed");
                assert_eq!(base_tokens.token(r, c), after_tokens.token(r, c));
            }
        }
    }

    #[test]
    fn decode_output_shape_and_determinism() {
        let model = BitVae::new(small_cfg(), 3).unwrap();
        let map = random_map(5, 16, 16, 3);
        let a = model.reconstruct(&map).unwrap();
        let b = model.reconstruct(&map).unwrap();
        assert_eq!(a.shape(), &[3, 16, 16]);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn tokenize_matches_composition_of_public_ops() {
        // Compositional oracle: encode -> binarize -> bits_to_index per patch.
        let model = BitVae::new(small_cfg(), 6).unwrap();
        let map = random_map(7, 16, 16, 3);
        let tokens = model.tokenize(&map).unwrap();

        let features = model.encode(&map.to_tensor()).unwrap();
        let bits = binarize(&features);
        let plane = 16;
        for idx in 0..plane {
            let vec: Vec<f32> = (0..4).map(|k| bits.data()[k * plane + idx]).collect();
            assert_eq!(tokens.tokens()[idx], bits_to_index(&vec).unwrap());
        }
        assert!(tokens.tokens().iter().all(|&t| t < 16));
        assert_eq!(tokens.count_masked(), 0);
    }

    #[test]
    fn tokenize_partial_thresholds() {
        let model = BitVae::new(small_cfg(), 8).unwrap();
        let map = random_map(9, 16, 16, 3);

        // Fully observed partial map tokenizes identically to the map.
        let pm = PartialMap::fully_observed(&map);
        let t1 = model.tokenize_partial(&pm, 0.5).unwrap();
        assert_eq!(t1, model.tokenize(&map).unwrap());

        // Fully masked -> every token is the mask.
        let all: Vec<_> = (0..4).flat_map(|r| (0..4).map(move |c| (r, c))).collect();
        let plan = MaskPlan::for_map(&map, 4, all, None).unwrap();
        let pm = crate::map::apply_mask(&map, &plan).unwrap();
        let t2 = model.tokenize_partial(&pm, 0.5).unwrap();
        assert_eq!(t2.count_masked(), 16);
        assert!(t2.tokens().iter().all(|&t| t == 16));
    }

    #[test]
    fn tokenize_partial_majority_unobserved_patch_masks() {
        let model = BitVae::new(small_cfg(), 10).unwrap();
        // 60% of patch (0,0) unobserved with theta 0.5 -> masked.
        let mut observed = vec![true; 16 * 16];
        let mut count = 0;
        'outer: for r in 0..4 {
            for c in 0..4 {
                observed[r * 16 + c] = false;
                count += 1;
                if count == 10 {
                    break 'outer;
                }
            }
        }
        let pm = PartialMap::new(16, 16, 3, vec![0; 256], observed).unwrap();
        let tokens = model.tokenize_partial(&pm, 0.5).unwrap();
        assert!(tokens.is_masked(0, 0));
        assert!(!tokens.is_masked(0, 1));
    }

    #[test]
    fn straight_through_gradient_contract() {
        // The gradient arriving at the encoder features equals the gradient
        // the decoder produces w.r.t. the binarized tensor wherever the
        // feature is inside [-1, 1], and is zero outside.
        let model = BitVae::new(small_cfg(), 11).unwrap();
        let map = random_map(12, 16, 16, 3);
        let target = map.to_tensor();

        let mut tape = Tape::new();
        let vars = model.leaf_params(&mut tape);
        let input = tape.leaf(target.clone());
        let m = model.encode_on(&mut tape, &vars, input).unwrap();
        let z = tape.binarize_ste(m);
        let probs = model.decode_on(&mut tape, &vars, z).unwrap();
        let loss = tape.bce_loss(probs, &target).unwrap();
        tape.backward(loss).unwrap();

        let feature_values = tape.value(m).data().to_vec();
        let gm = tape.grad(m).data().to_vec();
        let gz = tape.grad(z).data().to_vec();
        let mut inside = 0;
        for ((&f, &a), &b) in feature_values.iter().zip(&gm).zip(&gz) {
            if f.abs() <= 1.0 {
                assert_eq!(a, b);
                inside += 1;
            } else {
                assert_eq!(a, 0.0);
            }
        }
        assert!(inside > 0, "no features inside the clip interval");
    }

    #[test]
    fn loss_identity_and_disjoint_cases() {
        let cfg = small_cfg();
        let map = {
            // Every channel nonempty.
            let mut labels = vec![0u8; 16];
            for (i, l) in labels.iter_mut().enumerate() {
                *l = (i % 3) as u8;
            }
            SemanticMap::from_labels(4, 4, 3, labels).unwrap()
        };
        let target = map.to_tensor();

        // Exact binary prediction: both parts vanish.
        let parts = bitvae_loss(&target, &target, &cfg).unwrap();
        assert!(parts.bce <= 1.2e-7, "bce {}", parts.bce);
        assert!(parts.iou <= 1e-6, "iou {}", parts.iou);

        // Complement prediction on nonempty channels: IoU term is 1.
        let flipped = target.map(|v| 1.0 - v);
        let parts = bitvae_loss(&target, &flipped, &cfg).unwrap();
        assert!((parts.iou - 1.0).abs() < 1e-6, "iou {}", parts.iou);
    }

    #[test]
    fn loss_matches_naive_summation_oracle() {
        let cfg = small_cfg();
        let mut rng = Rng::new(13);
        let target = random_map(14, 8, 8, 3).to_tensor();
        let pred = Tensor::from_vec(
            vec![3, 8, 8],
            (0..192).map(|_| rng.uniform(0.05, 0.95) as f32).collect(),
        )
        .unwrap();
        let parts = bitvae_loss(&target, &pred, &cfg).unwrap();

        // Naive per-channel summation at f64.
        let plane = 64;
        let mut bce = 0.0f64;
        let mut iou_sum = 0.0f64;
        for c in 0..3 {
            let mut inter = 0.0f64;
            let mut union = 0.0f64;
            for i in 0..plane {
                let t = target.data()[c * plane + i] as f64;
                let p = pred.data()[c * plane + i] as f64;
                bce += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                inter += t * p;
                union += t + p - t * p;
            }
            iou_sum += inter / union;
        }
        bce /= 192.0;
        let iou = 1.0 - iou_sum / 3.0;
        assert!((parts.bce - bce).abs() < 1e-6);
        assert!((parts.iou - iou).abs() < 1e-6);
        assert!((parts.total - (bce + iou)).abs() < 1e-6);
    }

    #[test]
    fn soft_iou_term_stays_in_unit_interval() {
        let cfg = small_cfg();
        let mut rng = Rng::new(40);
        for trial in 0..50 {
            let target = random_map(trial as u64 + 100, 8, 8, 3).to_tensor();
            let pred = Tensor::from_vec(
                vec![3, 8, 8],
                (0..192).map(|_| rng.uniform(1e-4, 1.0 - 1e-4) as f32).collect(),
            )
            .unwrap();
            let parts = bitvae_loss(&target, &pred, &cfg).unwrap();
            assert!((0.0..=1.0).contains(&parts.iou), "iou {} at {trial}", parts.iou);
        }
        // Binary mismatch on a nonempty channel keeps the term positive.
        let target = random_map(7, 8, 8, 3).to_tensor();
        let mut wrong = target.clone();
        let flip = wrong.data()[0];
        wrong.data_mut()[0] = 1.0 - flip;
        wrong.data_mut()[64] = flip;
        let parts = bitvae_loss(&target, &wrong, &cfg).unwrap();
        assert!(parts.iou > 0.0);
    }

    #[test]
    fn lambda_weights_scale_total() {
        let mut cfg = small_cfg();
        cfg.lambda_iou = 0.0;
        let target = random_map(15, 8, 8, 3).to_tensor();
        let pred = Tensor::full(vec![3, 8, 8], 0.4);
        let parts = bitvae_loss(&target, &pred, &cfg).unwrap();
        assert_eq!(parts.total, parts.bce);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = BitVae::new(small_cfg(), 20).unwrap();
        let dir = std::env::temp_dir().join("mapbert-bitvae-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bitvae.ckpt");
        model.to_checkpoint(20, "cafebabe").save(&path).unwrap();
        let loaded = BitVae::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let map = random_map(21, 16, 16, 3);
        assert_eq!(model.tokenize(&map).unwrap(), loaded.tokenize(&map).unwrap());
    }

    #[test]
    fn scene_roundtrip_has_valid_output() {
        let model = BitVae::new(BitVaeConfig::desk_default(), 30).unwrap();
        let map = generate_scene(&SceneSpec::desk_default(30)).unwrap();
        let tokens = model.tokenize(&map).unwrap();
        let out = model.decode_tokens(&tokens).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (64, 64, 6));
    }
}
