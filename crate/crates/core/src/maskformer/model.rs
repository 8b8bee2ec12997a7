//! Bidirectional masked transformer over bit-token grids.
//!
//! The input sequence is one conditioning token (a learned per-category
//! target embedding, or the learned null row when no target is given)
//! followed by the grid's token embeddings, plus learned absolute position
//! embeddings. Pre-norm blocks with full bidirectional attention; the head
//! projects every grid position to logits over the 2^b legal tokens. The
//! mask token is input vocabulary only: it is never a predictable class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init, Checkpoint, Tape, Tensor, Var};
use crate::quantizers::BitTokenGrid;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    /// One forward pass; every masked position takes its argmax token.
    SinglePass,
    /// Confidence-ordered refinement over `steps` rounds with a cosine
    /// keep schedule.
    Iterative { steps: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskformerConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Token bits; the embedding vocabulary is 2^bits + 1 (mask included).
    pub bits: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Number of object categories n; the target table has n + 1 rows.
    pub object_categories: usize,
    /// Probability of the object-aware masking branch during training.
    pub p_obj: f64,
    pub decode: DecodeMode,
    pub mlp_ratio: usize,
}

impl MaskformerConfig {
    /// Desk-scale default: 128 dim, 4 layers, 4 heads.
    pub fn desk_default(bits: usize, grid_rows: usize, grid_cols: usize, n: usize) -> Self {
        MaskformerConfig {
            dim: 128,
            layers: 4,
            heads: 4,
            bits,
            grid_rows,
            grid_cols,
            object_categories: n,
            p_obj: 0.5,
            decode: DecodeMode::SinglePass,
            mlp_ratio: 4,
        }
    }

    /// Base preset: 768 channels, 12 heads/layers.
    pub fn vit_b(bits: usize, grid_rows: usize, grid_cols: usize, n: usize) -> Self {
        MaskformerConfig {
            dim: 768,
            layers: 12,
            heads: 12,
            ..MaskformerConfig::desk_default(bits, grid_rows, grid_cols, n)
        }
    }

    /// Large preset: 1024 channels, 16 heads/layers.
    pub fn vit_l(bits: usize, grid_rows: usize, grid_cols: usize, n: usize) -> Self {
        MaskformerConfig {
            dim: 1024,
            layers: 16,
            heads: 16,
            ..MaskformerConfig::desk_default(bits, grid_rows, grid_cols, n)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("layers and mlp_ratio must be positive"));
        }
        if self.bits == 0 || self.bits > 16 {
            return Err(Error::invalid(format!("bits {} outside [1, 16]", self.bits)));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if let DecodeMode::Iterative { steps } = self.decode {
            if steps == 0 {
                return Err(Error::invalid("iterative decode needs at least one step"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_obj) {
            return Err(Error::invalid("p_obj must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Legal output classes (mask token excluded).
    pub fn classes(&self) -> usize {
        1 << self.bits
    }

    /// Input vocabulary (mask token included).
    pub fn vocabulary(&self) -> usize {
        (1 << self.bits) + 1
    }

    pub fn sequence_len(&self) -> usize {
        self.grid_rows * self.grid_cols + 1
    }

    /// Target-table row used when no category is given.
    pub fn null_row(&self) -> usize {
        self.object_categories
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

struct BlockVars {
    ln1: (Var, Var),
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

#[doc(hidden)]
pub struct MaskformerVars {
    token_emb: Var,
    pos_emb: Var,
    target_emb: Var,
    blocks: Vec<BlockVars>,
    ln_f: (Var, Var),
    head: (Var, Var),
    pub ordered: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Maskformer {
    cfg: MaskformerConfig,
    token_emb: Tensor,
    pos_emb: Tensor,
    target_emb: Tensor,
    blocks: Vec<Block>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

const LN_EPS: f64 = 1e-5;

impl Maskformer {
    pub fn new(cfg: MaskformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, 0x3A5F);
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1_g: init::ones(vec![d]),
                ln1_b: init::zeros(vec![d]),
                wq: init::linear_weight(d, d, &mut rng),
                bq: init::zeros(vec![d]),
                wk: init::linear_weight(d, d, &mut rng),
                bk: init::zeros(vec![d]),
                wv: init::linear_weight(d, d, &mut rng),
                bv: init::zeros(vec![d]),
                wo: init::linear_weight(d, d, &mut rng),
                bo: init::zeros(vec![d]),
                ln2_g: init::ones(vec![d]),
                ln2_b: init::zeros(vec![d]),
                w1: init::linear_weight(d, hidden, &mut rng),
                b1: init::zeros(vec![hidden]),
                w2: init::linear_weight(hidden, d, &mut rng),
                b2: init::zeros(vec![d]),
            })
            .collect();
        Ok(Maskformer {
            token_emb: init::trunc_normal(vec![cfg.vocabulary(), d], 0.02, &mut rng),
            pos_emb: init::trunc_normal(vec![cfg.sequence_len(), d], 0.02, &mut rng),
            target_emb: init::trunc_normal(vec![cfg.object_categories + 1, d], 0.02, &mut rng),
            blocks,
            ln_f_g: init::ones(vec![d]),
            ln_f_b: init::zeros(vec![d]),
            head_w: init::linear_weight(d, cfg.classes(), &mut rng),
            head_b: init::zeros(vec![cfg.classes()]),
            cfg,
        })
    }

    pub fn config(&self) -> &MaskformerConfig {
        &self.cfg
    }

    /// Override the inference decode mode (training checkpoints carry the
    /// mode they were configured with; evaluation may choose another).
    pub fn set_decode_mode(&mut self, mode: DecodeMode) {
        self.cfg.decode = mode;
    }

    /// The learned target-embedding table ((n + 1) x d; last row is null).
    pub fn target_table(&self) -> &Tensor {
        &self.target_emb
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_emb".into(), &self.token_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("target_emb".into(), &self.target_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blk{i}.ln1.g"), &b.ln1_g));
            out.push((format!("blk{i}.ln1.b"), &b.ln1_b));
            out.push((format!("blk{i}.attn.wq"), &b.wq));
            out.push((format!("blk{i}.attn.bq"), &b.bq));
            out.push((format!("blk{i}.attn.wk"), &b.wk));
            out.push((format!("blk{i}.attn.bk"), &b.bk));
            out.push((format!("blk{i}.attn.wv"), &b.wv));
            out.push((format!("blk{i}.attn.bv"), &b.bv));
            out.push((format!("blk{i}.attn.wo"), &b.wo));
            out.push((format!("blk{i}.attn.bo"), &b.bo));
            out.push((format!("blk{i}.ln2.g"), &b.ln2_g));
            out.push((format!("blk{i}.ln2.b"), &b.ln2_b));
            out.push((format!("blk{i}.mlp.w1"), &b.w1));
            out.push((format!("blk{i}.mlp.b1"), &b.b1));
            out.push((format!("blk{i}.mlp.w2"), &b.w2));
            out.push((format!("blk{i}.mlp.b2"), &b.b2));
        }
        out.push(("ln_f.g".into(), &self.ln_f_g));
        out.push(("ln_f.b".into(), &self.ln_f_b));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub(crate) fn set_params(&mut self, values: &[Tensor]) {
        let mut it = values.iter().cloned();
        let mut next = || it.next().expect("parameter count matches");
        self.token_emb = next();
        self.pos_emb = next();
        self.target_emb = next();
        for i in 0..self.blocks.len() {
            self.blocks[i].ln1_g = next();
            self.blocks[i].ln1_b = next();
            self.blocks[i].wq = next();
            self.blocks[i].bq = next();
            self.blocks[i].wk = next();
            self.blocks[i].bk = next();
            self.blocks[i].wv = next();
            self.blocks[i].bv = next();
            self.blocks[i].wo = next();
            self.blocks[i].bo = next();
            self.blocks[i].ln2_g = next();
            self.blocks[i].ln2_b = next();
            self.blocks[i].w1 = next();
            self.blocks[i].b1 = next();
            self.blocks[i].w2 = next();
            self.blocks[i].b2 = next();
        }
        self.ln_f_g = next();
        self.ln_f_b = next();
        self.head_w = next();
        self.head_b = next();
    }

    pub(crate) fn leaf_params(&self, tape: &mut Tape<f32>) -> MaskformerVars {
        let mut ordered = Vec::new();
        let one = |tape: &mut Tape<f32>, ordered: &mut Vec<Var>, t: &Tensor| {
            let v = tape.leaf(t.clone());
            ordered.push(v);
            v
        };
        let token_emb = one(tape, &mut ordered, &self.token_emb);
        let pos_emb = one(tape, &mut ordered, &self.pos_emb);
        let target_emb = one(tape, &mut ordered, &self.target_emb);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1: (one(tape, &mut ordered, &b.ln1_g), one(tape, &mut ordered, &b.ln1_b)),
                wq: one(tape, &mut ordered, &b.wq),
                bq: one(tape, &mut ordered, &b.bq),
                wk: one(tape, &mut ordered, &b.wk),
                bk: one(tape, &mut ordered, &b.bk),
                wv: one(tape, &mut ordered, &b.wv),
                bv: one(tape, &mut ordered, &b.bv),
                wo: one(tape, &mut ordered, &b.wo),
                bo: one(tape, &mut ordered, &b.bo),
                ln2: (one(tape, &mut ordered, &b.ln2_g), one(tape, &mut ordered, &b.ln2_b)),
                w1: one(tape, &mut ordered, &b.w1),
                b1: one(tape, &mut ordered, &b.b1),
                w2: one(tape, &mut ordered, &b.w2),
                b2: one(tape, &mut ordered, &b.b2),
            })
            .collect();
        let ln_f = (
            one(tape, &mut ordered, &self.ln_f_g),
            one(tape, &mut ordered, &self.ln_f_b),
        );
        let head = (
            one(tape, &mut ordered, &self.head_w),
            one(tape, &mut ordered, &self.head_b),
        );
        MaskformerVars {
            token_emb,
            pos_emb,
            target_emb,
            blocks,
            ln_f,
            head,
            ordered,
        }
    }

    fn check_tokens(&self, tokens: &BitTokenGrid) -> Result<()> {
        if tokens.bits() != self.cfg.bits
            || tokens.rows() != self.cfg.grid_rows
            || tokens.cols() != self.cfg.grid_cols
        {
            return Err(Error::shape(
                "maskformer tokens",
                &[tokens.rows(), tokens.cols(), tokens.bits()],
                &[self.cfg.grid_rows, self.cfg.grid_cols, self.cfg.bits],
            ));
        }
        Ok(())
    }

    fn target_row(&self, target: Option<usize>) -> Result<usize> {
        match target {
            Some(row) => {
                if row >= self.cfg.object_categories {
                    return Err(Error::invalid(format!(
                        "target row {row} out of range [0, {})",
                        self.cfg.object_categories
                    )));
                }
                Ok(row)
            }
            None => Ok(self.cfg.null_row()),
        }
    }

    /// Logits (grid_rows * grid_cols, 2^bits) on an existing tape.
    pub(crate) fn forward_on(
        &self,
        tape: &mut Tape<f32>,
        vars: &MaskformerVars,
        tokens: &BitTokenGrid,
        target: Option<usize>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let row = self.target_row(target)?;
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let ids: Vec<usize> = tokens.tokens().iter().map(|&t| t as usize).collect();
        let tok = tape.embedding(vars.token_emb, &ids)?;
        let prefix = tape.embedding(vars.target_emb, &[row])?;
        let mut x = tape.concat_rows(&[prefix, tok])?;
        x = tape.add(x, vars.pos_emb)?;

        for blk in &vars.blocks {
            let h = tape.layer_norm(x, blk.ln1.0, blk.ln1.1, LN_EPS)?;
            let q = tape.linear(h, blk.wq, blk.bq)?;
            let k = tape.linear(h, blk.wk, blk.bk)?;
            let v = tape.linear(h, blk.wv, blk.bv)?;
            let mut heads_out = Vec::with_capacity(heads);
            for i in 0..heads {
                let qi = tape.slice_cols(q, i * dh, dh)?;
                let ki = tape.slice_cols(k, i * dh, dh)?;
                let vi = tape.slice_cols(v, i * dh, dh)?;
                let scores = tape.matmul_nt(qi, ki)?;
                let scores = tape.scale(scale, scores);
                let attn = tape.softmax(scores)?;
                heads_out.push(tape.matmul(attn, vi)?);
            }
            let merged = tape.concat_cols(&heads_out)?;
            let att = tape.linear(merged, blk.wo, blk.bo)?;
            x = tape.add(x, att)?;

            let h2 = tape.layer_norm(x, blk.ln2.0, blk.ln2.1, LN_EPS)?;
            let m = tape.linear(h2, blk.w1, blk.b1)?;
            let m = tape.gelu(m);
            let m = tape.linear(m, blk.w2, blk.b2)?;
            x = tape.add(x, m)?;
        }

        let x = tape.layer_norm(x, vars.ln_f.0, vars.ln_f.1, LN_EPS)?;
        let grid_rows: Vec<usize> = (1..self.cfg.sequence_len()).collect();
        let grid = tape.gather_rows(x, &grid_rows)?;
        tape.linear(grid, vars.head.0, vars.head.1)
    }

    /// Logits over the 2^bits legal tokens at every grid position.
    ///
    /// `target` is an object row in `[0, n)`; `None` selects the learned
    /// null embedding.
    pub fn forward(&self, tokens: &BitTokenGrid, target: Option<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.leaf_params(&mut tape);
        let out = self.forward_on(&mut tape, &vars, tokens, target)?;
        Ok(tape.value(out).clone())
    }

    #[doc(hidden)]
    pub fn leaf_params_for_tests(&self, tape: &mut Tape<f32>) -> MaskformerVars {
        self.leaf_params(tape)
    }

    #[doc(hidden)]
    pub fn forward_on_for_tests(
        &self,
        tape: &mut Tape<f32>,
        vars: &MaskformerVars,
        tokens: &BitTokenGrid,
        target: Option<usize>,
    ) -> Result<Var> {
        self.forward_on(tape, vars, tokens, target)
    }

    #[doc(hidden)]
    pub fn set_params_for_tests(&mut self, values: &[Tensor]) {
        self.set_params(values)
    }

    pub fn to_checkpoint(&self, seed: u64, fingerprint: &str) -> Checkpoint {
        let blob = serde_json::json!({
            "kind": "maskformer",
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
        if blob["kind"] != "maskformer" {
            return Err(Error::invalid(format!(
                "checkpoint kind {:?} is not maskformer",
                blob["kind"]
            )));
        }
        let cfg: MaskformerConfig = serde_json::from_value(blob["config"].clone())
            .map_err(|e| Error::invalid(format!("bad maskformer config: {e}")))?;
        let mut model = Maskformer::new(cfg, 0)?;
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

/// Mean cross-entropy over the masked positions only, on an existing tape.
///
/// `positions` are flat row-major grid indices; `gt` is the tokenization of
/// the unmasked map. Rejects an empty position set (the loss is undefined
/// over zero positions) and mask tokens in the targets.
pub(crate) fn mt_loss_on(
    tape: &mut Tape<f32>,
    logits: Var,
    gt: &BitTokenGrid,
    positions: &[usize],
) -> Result<Var> {
    mt_loss_on_impl(tape, logits, gt, positions)
}

#[doc(hidden)]
pub fn mt_loss_on_for_tests(
    tape: &mut Tape<f32>,
    logits: Var,
    gt: &BitTokenGrid,
    positions: &[usize],
) -> Result<Var> {
    mt_loss_on_impl(tape, logits, gt, positions)
}

fn mt_loss_on_impl(
    tape: &mut Tape<f32>,
    logits: Var,
    gt: &BitTokenGrid,
    positions: &[usize],
) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::invalid("mt_loss over an empty masked set"));
    }
    let mask = gt.mask_token();
    let targets: Result<Vec<usize>> = positions
        .iter()
        .map(|&p| {
            let t = *gt
                .tokens()
                .get(p)
                .ok_or_else(|| Error::invalid(format!("position {p} outside grid")))?;
            if t == mask {
                return Err(Error::invalid(
                    "ground-truth tokens must come from an unmasked map",
                ));
            }
            Ok(t as usize)
        })
        .collect();
    let sel = tape.gather_rows(logits, positions)?;
    tape.cross_entropy(sel, &targets?)
}

/// Mean cross-entropy of `logits` (grid positions x 2^bits) against the
/// ground-truth tokens at the plan's masked positions.
pub fn mt_loss(logits: &Tensor, gt: &BitTokenGrid, positions: &[usize]) -> Result<f64> {
    let mut tape: Tape<f32> = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = mt_loss_on(&mut tape, l, gt, positions)?;
    Ok(tape.value(loss).item() as f64)
}
