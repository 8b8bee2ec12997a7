//! Codebook VQ autoencoder baseline.
//!
//! Same encoder/decoder backbone as the bit autoencoder, but the per-patch
//! latent is a `code_dim`-vector quantized to its nearest codebook entry.
//! Tokens are codebook indices; the codebook size must be a power of two so
//! VQ tokens share the bit-grid plumbing (bits = log2 codes, mask = codes).
//!
//! Training uses the standard stop-gradient split: reconstruction gradients
//! reach the encoder straight through the quantizer, the codebook moves
//! toward encoder outputs, and a beta-weighted commitment term pulls encoder
//! outputs toward their codes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{PartialMap, SemanticMap};
use crate::nn::{init, Checkpoint, Tape, Tensor, Var};
use crate::quantizers::backbone::{Backbone, BackboneShape, BackboneVars};
use crate::quantizers::bitvae::BitVae;
use crate::quantizers::{BitTokenGrid, MapTokenizer};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    /// Codebook size N; must be a power of two.
    pub codes: usize,
    pub code_dim: usize,
    /// Commitment loss weight.
    pub beta: f64,
    pub patch_size: usize,
    pub channels: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    pub dec_blocks: usize,
    pub smooth_width: usize,
    pub lambda_bce: f64,
    pub lambda_iou: f64,
}

impl VqConfig {
    /// Desk-scale default: 64 codes of dimension 16 (vocabulary matched to
    /// the 6-bit tokenizer).
    pub fn desk_default() -> Self {
        VqConfig {
            codes: 64,
            code_dim: 16,
            beta: 0.25,
            patch_size: 8,
            channels: 6,
            enc_width: 32,
            dec_width: 48,
            dec_blocks: 2,
            smooth_width: 16,
            lambda_bce: 1.0,
            lambda_iou: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codes < 2 || !self.codes.is_power_of_two() {
            return Err(Error::invalid(format!(
                "codebook size {} must be a power of two >= 2",
                self.codes
            )));
        }
        if self.code_dim == 0 {
            return Err(Error::invalid("code_dim must be positive"));
        }
        if self.beta < 0.0 || self.lambda_bce < 0.0 || self.lambda_iou < 0.0 {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        self.backbone_shape().validate()
    }

    pub fn bits(&self) -> usize {
        self.codes.trailing_zeros() as usize
    }

    fn backbone_shape(&self) -> BackboneShape {
        BackboneShape {
            channels: self.channels,
            latent: self.code_dim,
            patch_size: self.patch_size,
            enc_width: self.enc_width,
            dec_width: self.dec_width,
            dec_blocks: self.dec_blocks,
            smooth_width: self.smooth_width,
        }
    }
}

/// Nearest codebook entry by Euclidean distance; ties break to the lowest
/// index. Returns the index and the quantized vector.
pub fn vq_quantize(query: &[f32], codebook: &Tensor) -> Result<(usize, Vec<f32>)> {
    let shape = codebook.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid("vq_quantize requires a nonempty (N, D) codebook"));
    }
    let (_, dim) = (shape[0], shape[1]);
    if query.len() != dim {
        return Err(Error::shape("vq_quantize", &[query.len()], &[dim]));
    }
    let mut tape: Tape<f32> = Tape::new();
    let cb = tape.leaf(codebook.clone());
    let z = tape.leaf(Tensor::from_vec(vec![1, dim], query.to_vec())?);
    let (q, idx) = tape.vq_quantize_ste(z, cb)?;
    Ok((idx[0], tape.value(q).data().to_vec()))
}

#[derive(Clone, Debug)]
pub struct VqVae {
    cfg: VqConfig,
    backbone: Backbone,
    codebook: Tensor,
}

impl VqVae {
    pub fn new(cfg: VqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, 0x5109);
        let backbone = Backbone::new(cfg.backbone_shape(), &mut rng)?;
        let codebook = init::trunc_normal(vec![cfg.codes, cfg.code_dim], 0.02, &mut rng);
        Ok(VqVae {
            cfg,
            backbone,
            codebook,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.cfg
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    /// Re-seed the codebook from data latents (cyclically, with small
    /// deterministic jitter). Reduces dead codes compared to blind random
    /// init.
    pub fn init_codebook_from(&mut self, latents: &[Vec<f32>], seed: u64) {
        if latents.is_empty() {
            return;
        }
        let mut rng = Rng::derive(seed, 0xC0DE);
        let dim = self.cfg.code_dim;
        let mut data = Vec::with_capacity(self.cfg.codes * dim);
        for i in 0..self.cfg.codes {
            let src = &latents[i % latents.len()];
            for j in 0..dim {
                data.push(src[j] + rng.trunc_normal(0.01) as f32);
            }
        }
        self.codebook = Tensor::from_vec(vec![self.cfg.codes, dim], data).expect("shape fixed");
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_params();
        out.push(("codebook".into(), &self.codebook));
        out
    }

    pub(crate) fn set_params(&mut self, values: &[Tensor]) {
        let (body, last) = values.split_at(values.len() - 1);
        self.backbone.set_params(body);
        self.codebook = last[0].clone();
    }

    pub(crate) fn leaf_params(&self, tape: &mut Tape<f32>) -> (BackboneVars, Var) {
        let mut vars = self.backbone.leaf_params(tape);
        let cb = tape.leaf(self.codebook.clone());
        vars.ordered.push(cb);
        (vars, cb)
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

    /// Per-patch latent rows (h*w, code_dim) for a (C, H, W) input.
    pub fn encode_rows(&self, input: &Tensor) -> Result<Tensor> {
        let latent = self.backbone.encode(input)?;
        let mut tape: Tape<f32> = Tape::new();
        let v = tape.leaf(latent);
        let rows = tape.chw_to_rows(v)?;
        Ok(tape.value(rows).clone())
    }

    /// Encode -> quantize -> decode as channel probabilities (C, H, W).
    pub fn reconstruct(&self, map: &SemanticMap) -> Result<Tensor> {
        let input = map.to_tensor();
        let latent = self.backbone.encode(&input)?;
        let shape = latent.shape().to_vec();
        let (rows, cols) = (shape[1], shape[2]);
        let plane = rows * cols;
        let dim = self.cfg.code_dim;
        let cb = self.codebook.data();
        let mut quantized = vec![0.0f32; dim * plane];
        let mut query = vec![0.0f32; dim];
        for idx in 0..plane {
            for (k, slot) in query.iter_mut().enumerate() {
                *slot = latent.data()[k * plane + idx];
            }
            let (code, _) = vq_quantize(&query, &self.codebook)?;
            for k in 0..dim {
                quantized[k * plane + idx] = cb[code * dim + k];
            }
        }
        let q = Tensor::from_vec(vec![dim, rows, cols], quantized)?;
        self.backbone.decode(&q)
    }

    fn token_grid(&self, input: &Tensor) -> Result<BitTokenGrid> {
        let latent = self.backbone.encode(input)?;
        let shape = latent.shape().to_vec();
        let (rows, cols) = (shape[1], shape[2]);
        let plane = rows * cols;
        let dim = self.cfg.code_dim;
        let data = latent.data();
        let mut query = vec![0.0f32; dim];
        let mut tokens = Vec::with_capacity(plane);
        for idx in 0..plane {
            for (k, slot) in query.iter_mut().enumerate() {
                *slot = data[k * plane + idx];
            }
            let (code, _) = vq_quantize(&query, &self.codebook)?;
            tokens.push(code as u32);
        }
        BitTokenGrid::new(rows, cols, self.cfg.bits(), tokens)
    }

    pub fn to_checkpoint(&self, seed: u64, fingerprint: &str) -> Checkpoint {
        let blob = serde_json::json!({
            "kind": "vqvae",
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
        if blob["kind"] != "vqvae" {
            return Err(Error::invalid(format!(
                "checkpoint kind {:?} is not vqvae",
                blob["kind"]
            )));
        }
        let cfg: VqConfig = serde_json::from_value(blob["config"].clone())
            .map_err(|e| Error::invalid(format!("bad vqvae config: {e}")))?;
        let mut model = VqVae::new(cfg, 0)?;
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

impl MapTokenizer for VqVae {
    fn bits(&self) -> usize {
        self.cfg.bits()
    }

    fn patch_size(&self) -> usize {
        self.cfg.patch_size
    }

    fn channels(&self) -> usize {
        self.cfg.channels
    }

    fn tokenize(&self, map: &SemanticMap) -> Result<BitTokenGrid> {
        self.token_grid(&map.to_tensor())
    }

    fn tokenize_partial(&self, pm: &PartialMap, theta_obs: f64) -> Result<BitTokenGrid> {
        if !(0.0..=1.0).contains(&theta_obs) {
            return Err(Error::invalid(format!(
                "theta_obs {theta_obs} outside [0, 1]"
            )));
        }
        let mut tokens = self.token_grid(&pm.to_tensor())?;
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
        if tokens.bits() != self.cfg.bits() {
            return Err(Error::shape(
                "decode_tokens",
                &[tokens.bits()],
                &[self.cfg.bits()],
            ));
        }
        if tokens.count_masked() > 0 {
            return Err(Error::invalid(
                "decode_tokens requires a mask-free token grid",
            ));
        }
        let (rows, cols) = (tokens.rows(), tokens.cols());
        let plane = rows * cols;
        let dim = self.cfg.code_dim;
        let cb = self.codebook.data();
        let mut data = vec![0.0f32; dim * plane];
        for idx in 0..plane {
            let code = tokens.tokens()[idx] as usize;
            for k in 0..dim {
                data[k * plane + idx] = cb[code * dim + k];
            }
        }
        let latent = Tensor::from_vec(vec![dim, rows, cols], data)?;
        let probs = self.backbone.decode(&latent)?;
        BitVae::argmax_map(&probs)
    }
}
