//! Map tokenizers: the bit-quantizing autoencoder, the codebook VQ baseline,
//! and the bit/index token algebra shared by both.

mod backbone;
mod bitvae;
mod train;
mod vq;

pub use bitvae::{binarize, bitvae_loss, BitVae, BitVaeConfig, LossParts};
pub use train::{train_bitvae, train_vq, EpochStats, LossTrace, TrainConfig};
pub use vq::{vq_quantize, VqConfig, VqVae};

pub(crate) use train::split_indices;

use crate::error::{Error, Result};
use crate::map::{PartialMap, SemanticMap};

/// Reserved mask token for `b`-bit vocabularies.
pub const fn mask_token(bits: usize) -> u32 {
    1 << bits
}

/// Grid of integer tokens in `[0, 2^b]`, where `2^b` is the mask token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTokenGrid {
    rows: usize,
    cols: usize,
    bits: usize,
    tokens: Vec<u32>,
}

impl BitTokenGrid {
    pub fn new(rows: usize, cols: usize, bits: usize, tokens: Vec<u32>) -> Result<Self> {
        if bits == 0 || bits > 16 {
            return Err(Error::invalid(format!("bits {bits} outside [1, 16]")));
        }
        if tokens.len() != rows * cols {
            return Err(Error::shape("BitTokenGrid", &[rows, cols], &[tokens.len()]));
        }
        let mask = mask_token(bits);
        for (i, &t) in tokens.iter().enumerate() {
            if t > mask {
                return Err(Error::invalid(format!(
                    "token {t} at patch ({}, {}) exceeds mask index {mask}",
                    i / cols,
                    i % cols
                )));
            }
        }
        Ok(BitTokenGrid {
            rows,
            cols,
            bits,
            tokens,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn mask_token(&self) -> u32 {
        mask_token(self.bits)
    }

    #[inline]
    pub fn token(&self, row: usize, col: usize) -> u32 {
        self.tokens[row * self.cols + col]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn set_token(&mut self, row: usize, col: usize, token: u32) -> Result<()> {
        if token > self.mask_token() {
            return Err(Error::invalid(format!("token {token} out of range")));
        }
        self.tokens[row * self.cols + col] = token;
        Ok(())
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.token(row, col) == self.mask_token()
    }

    /// Flat sequence positions (row-major) currently holding the mask token.
    pub fn masked_positions(&self) -> Vec<usize> {
        let mask = self.mask_token();
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == mask).then_some(i))
            .collect()
    }

    pub fn count_masked(&self) -> usize {
        let mask = self.mask_token();
        self.tokens.iter().filter(|&&t| t == mask).count()
    }
}

/// Pack a +-1 bit vector into an integer, LSB first: bit k contributes
/// `((bit_k + 1) / 2) << k`.
pub fn bits_to_index(bits: &[f32]) -> Result<u32> {
    if bits.is_empty() || bits.len() > 16 {
        return Err(Error::invalid(format!(
            "bit vector length {} outside [1, 16]",
            bits.len()
        )));
    }
    let mut index = 0u32;
    for (k, &b) in bits.iter().enumerate() {
        if b == 1.0 {
            index |= 1 << k;
        } else if b != -1.0 {
            return Err(Error::invalid(format!("bit {k} is {b}, expected -1 or 1")));
        }
    }
    Ok(index)
}

/// Unpack an integer in `[0, 2^b)` into a +-1 bit vector, LSB first.
pub fn index_to_bits(index: u32, bits: usize) -> Result<Vec<f32>> {
    if bits == 0 || bits > 16 {
        return Err(Error::invalid(format!("bits {bits} outside [1, 16]")));
    }
    if index >= (1 << bits) {
        return Err(Error::invalid(format!(
            "index {index} out of range [0, {})",
            1u32 << bits
        )));
    }
    Ok((0..bits)
        .map(|k| if index & (1 << k) != 0 { 1.0 } else { -1.0 })
        .collect())
}

/// A frozen model that tokenizes maps and decodes token grids back to maps.
pub trait MapTokenizer {
    /// log2 of the legal token vocabulary (mask token excluded).
    fn bits(&self) -> usize;
    fn patch_size(&self) -> usize;
    fn channels(&self) -> usize;

    /// Tokenize a complete map; the result never contains mask tokens.
    fn tokenize(&self, map: &SemanticMap) -> Result<BitTokenGrid>;

    /// Tokenize a partial map: a patch whose unobserved-cell fraction
    /// exceeds `theta_obs` becomes the mask token; other patches are
    /// tokenized from the zero-filled observation.
    fn tokenize_partial(&self, pm: &PartialMap, theta_obs: f64) -> Result<BitTokenGrid>;

    /// Decode a mask-free token grid to a one-hot map via per-cell argmax.
    fn decode_tokens(&self, tokens: &BitTokenGrid) -> Result<SemanticMap>;
}
