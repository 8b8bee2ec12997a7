//! End-to-end map completion: partial map in, complete one-hot map out.

use crate::error::{Error, Result};
use crate::map::{object_row, PartialMap, SemanticMap};
use crate::maskformer::model::{DecodeMode, Maskformer};
use crate::nn::Tensor;
use crate::quantizers::{BitTokenGrid, MapTokenizer};

/// A frozen tokenizer/transformer pair ready for inference.
pub struct Completer<'a> {
    pub tokenizer: &'a dyn MapTokenizer,
    pub model: &'a Maskformer,
    /// Patch observability threshold for partial tokenization.
    pub theta_obs: f64,
}

impl<'a> Completer<'a> {
    pub fn new(tokenizer: &'a dyn MapTokenizer, model: &'a Maskformer) -> Self {
        Completer {
            tokenizer,
            model,
            theta_obs: 0.5,
        }
    }

    /// Complete a partial map, optionally conditioned on a target object
    /// category (palette id >= 2), using the model's configured decode mode.
    pub fn generate(&self, pm: &PartialMap, target_category: Option<u8>) -> Result<SemanticMap> {
        self.generate_with(pm, target_category, self.model.config().decode)
    }

    /// Complete a partial map with an explicit decode mode.
    pub fn generate_with(
        &self,
        pm: &PartialMap,
        target_category: Option<u8>,
        mode: DecodeMode,
    ) -> Result<SemanticMap> {
        let target = match target_category {
            Some(id) => Some(object_row(id).ok_or_else(|| {
                Error::invalid(format!("category {id} is not an object category"))
            })?),
            None => None,
        };
        let mut tokens = self.tokenizer.tokenize_partial(pm, self.theta_obs)?;
        let masked = tokens.masked_positions();
        if !masked.is_empty() {
            match mode {
                DecodeMode::SinglePass => {
                    let logits = self.model.forward(&tokens, target)?;
                    fill_argmax(&mut tokens, &logits, &masked)?;
                }
                DecodeMode::Iterative { steps } => {
                    self.iterative_fill(&mut tokens, target, masked, steps)?;
                }
            }
        }
        self.tokenizer.decode_tokens(&tokens)
    }

    /// Predict tokens for the masked positions only, single pass. Exposed
    /// for token-level evaluation.
    pub fn predict_tokens(
        &self,
        tokens: &BitTokenGrid,
        target: Option<usize>,
    ) -> Result<BitTokenGrid> {
        let masked = tokens.masked_positions();
        let mut out = tokens.clone();
        if !masked.is_empty() {
            let logits = self.model.forward(tokens, target)?;
            fill_argmax(&mut out, &logits, &masked)?;
        }
        Ok(out)
    }

    /// Confidence-ordered refinement: each round keeps the most confident
    /// fraction of predictions, following a cosine schedule that leaves
    /// `cos(pi/2 * r / steps)` of the original masked set unfilled after
    /// round r. Already-filled tokens are kept.
    fn iterative_fill(
        &self,
        tokens: &mut BitTokenGrid,
        target: Option<usize>,
        masked: Vec<usize>,
        steps: usize,
    ) -> Result<()> {
        let m0 = masked.len();
        let cols = tokens.cols();
        for round in 1..=steps {
            let still: Vec<usize> = tokens.masked_positions();
            if still.is_empty() {
                break;
            }
            let keep_masked = if round == steps {
                0
            } else {
                let frac = (std::f64::consts::PI / 2.0 * round as f64 / steps as f64).cos();
                ((m0 as f64 * frac).floor() as usize).min(still.len().saturating_sub(1))
            };
            let to_fill = still.len() - keep_masked;

            let logits = self.model.forward(tokens, target)?;
            // Confidence = softmax probability of the argmax class.
            let mut scored: Vec<(usize, u32, f64)> = still
                .iter()
                .map(|&pos| {
                    let (token, conf) = row_argmax_confidence(&logits, pos);
                    (pos, token, conf)
                })
                .collect();
            // Highest confidence first; ties break to the lowest position.
            scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
            for &(pos, token, _) in scored.iter().take(to_fill) {
                tokens.set_token(pos / cols, pos % cols, token)?;
            }
        }
        Ok(())
    }
}

fn row_argmax_confidence(logits: &Tensor, row: usize) -> (u32, f64) {
    let k = logits.shape()[1];
    let data = &logits.data()[row * k..(row + 1) * k];
    let mut best = 0usize;
    let mut best_v = data[0];
    for (j, &v) in data.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    let mut denom = 0.0f64;
    for &v in data {
        denom += ((v - best_v) as f64).exp();
    }
    (best as u32, 1.0 / denom)
}

fn fill_argmax(tokens: &mut BitTokenGrid, logits: &Tensor, positions: &[usize]) -> Result<()> {
    let cols = tokens.cols();
    for &pos in positions {
        let (token, _) = row_argmax_confidence(logits, pos);
        tokens.set_token(pos / cols, pos % cols, token)?;
    }
    Ok(())
}
