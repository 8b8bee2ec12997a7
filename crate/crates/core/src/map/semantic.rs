//! One-hot semantic maps and partial observations.
//!
//! A [`SemanticMap`] is an H x W x C grid where every cell activates exactly
//! one channel. Internally the map stores the per-cell label; the one-hot
//! view is materialized on demand (`channel_value`, `to_tensor`). This makes
//! the one-hot invariant structural: no sequence of operations can produce a
//! cell whose channel sum differs from one.
//!
//! A [`PartialMap`] additionally carries an observed flag per cell;
//! unobserved cells read as all-zero channel vectors.

use crate::error::{Error, Result};
use crate::map::palette::CategoryPalette;
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    channels: usize,
    labels: Vec<u8>,
}

impl SemanticMap {
    /// Build a map from a row-major label grid, validating label range.
    pub fn from_labels(height: usize, width: usize, channels: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("map dimensions must be positive"));
        }
        if channels < 2 || channels > 256 {
            return Err(Error::invalid(format!(
                "channel count {channels} outside supported range 2..=256"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::shape(
                "from_labels",
                &[height, width],
                &[labels.len()],
            ));
        }
        for (idx, &l) in labels.iter().enumerate() {
            if (l as usize) >= channels {
                return Err(Error::invalid(format!(
                    "label {l} out of range [0, {}] at cell ({}, {})",
                    channels - 1,
                    idx / width,
                    idx % width
                )));
            }
        }
        Ok(SemanticMap {
            height,
            width,
            channels,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// One-hot channel value at a cell: 1.0 on the active channel, else 0.0.
    #[inline]
    pub fn channel_value(&self, row: usize, col: usize, channel: usize) -> f32 {
        if self.label(row, col) as usize == channel {
            1.0
        } else {
            0.0
        }
    }

    /// Channels-first (C, H, W) one-hot tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = vec![0.0f32; self.channels * self.height * self.width];
        let plane = self.height * self.width;
        for (idx, &l) in self.labels.iter().enumerate() {
            data[l as usize * plane + idx] = 1.0;
        }
        Tensor::from_vec(vec![self.channels, self.height, self.width], data)
            .expect("shape matches by construction")
    }

    pub fn count_category(&self, category: u8) -> usize {
        self.labels.iter().filter(|&&l| l == category).count()
    }

    pub fn contains_category(&self, category: u8) -> bool {
        self.labels.iter().any(|&l| l == category)
    }

    /// Object-category ids (>= 2) with at least one cell, ascending.
    pub fn present_object_categories(&self) -> Vec<u8> {
        let mut seen = vec![false; self.channels];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (2..self.channels as u8).filter(|&c| seen[c as usize]).collect()
    }
}

/// Encode a label grid into a one-hot semantic map.
///
/// Rejects labels outside the palette, reporting the offending cell.
pub fn onehot_encode(
    labels: &[u8],
    height: usize,
    width: usize,
    palette: &CategoryPalette,
) -> Result<SemanticMap> {
    SemanticMap::from_labels(height, width, palette.len(), labels.to_vec())
}

/// Per-cell argmax over channels; inverse of [`onehot_encode`].
pub fn onehot_decode(map: &SemanticMap) -> Vec<u8> {
    map.labels().to_vec()
}

/// A partially observed map: observed cells are one-hot, unobserved cells
/// read as all-zero channel vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialMap {
    height: usize,
    width: usize,
    channels: usize,
    labels: Vec<u8>,
    observed: Vec<bool>,
}

impl PartialMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        labels: Vec<u8>,
        observed: Vec<bool>,
    ) -> Result<Self> {
        let base = SemanticMap::from_labels(height, width, channels, labels)?;
        if observed.len() != height * width {
            return Err(Error::shape(
                "PartialMap::new",
                &[height * width],
                &[observed.len()],
            ));
        }
        Ok(PartialMap {
            height,
            width,
            channels,
            labels: base.labels,
            observed,
        })
    }

    /// A fully observed view of a complete map.
    pub fn fully_observed(map: &SemanticMap) -> Self {
        PartialMap {
            height: map.height,
            width: map.width,
            channels: map.channels,
            labels: map.labels.clone(),
            observed: vec![true; map.labels.len()],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.observed[row * self.width + col]
    }

    /// Label of an observed cell, `None` when unobserved.
    #[inline]
    pub fn label(&self, row: usize, col: usize) -> Option<u8> {
        if self.is_observed(row, col) {
            Some(self.labels[row * self.width + col])
        } else {
            None
        }
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    /// One-hot channel value; all-zero at unobserved cells.
    #[inline]
    pub fn channel_value(&self, row: usize, col: usize, channel: usize) -> f32 {
        match self.label(row, col) {
            Some(l) if l as usize == channel => 1.0,
            _ => 0.0,
        }
    }

    /// Channels-first (C, H, W) tensor with zeros at unobserved cells.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = vec![0.0f32; self.channels * self.height * self.width];
        let plane = self.height * self.width;
        for idx in 0..self.labels.len() {
            if self.observed[idx] {
                data[self.labels[idx] as usize * plane + idx] = 1.0;
            }
        }
        Tensor::from_vec(vec![self.channels, self.height, self.width], data)
            .expect("shape matches by construction")
    }

    /// Fraction of unobserved cells inside one patch.
    pub fn unobserved_fraction(&self, patch_row: usize, patch_col: usize, patch: usize) -> f64 {
        let mut unobserved = 0usize;
        for i in 0..patch {
            for j in 0..patch {
                if !self.is_observed(patch_row * patch + i, patch_col * patch + j) {
                    unobserved += 1;
                }
            }
        }
        unobserved as f64 / (patch * patch) as f64
    }

    pub fn fully_observed_flag(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn palette() -> CategoryPalette {
        CategoryPalette::new(&[("free", [255, 255, 255]), ("occ", [0, 0, 0]), ("obj", [9, 9, 9])])
            .unwrap()
    }

    #[test]
    fn encode_single_cell() {
        let map = onehot_encode(&[0], 1, 1, &palette()).unwrap();
        assert_eq!(map.channel_value(0, 0, 0), 1.0);
        assert_eq!(map.channel_value(0, 0, 1), 0.0);
        assert_eq!(map.channel_value(0, 0, 2), 0.0);
    }

    #[test]
    fn encode_two_cells() {
        let map = onehot_encode(&[1, 2], 2, 1, &palette()).unwrap();
        assert_eq!(
            (0..3).map(|c| map.channel_value(0, 0, c)).collect::<Vec<_>>(),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            (0..3).map(|c| map.channel_value(1, 0, c)).collect::<Vec<_>>(),
            vec![0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn encode_rejects_out_of_range_label() {
        let err = onehot_encode(&[5], 1, 1, &palette()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label 5"), "{msg}");
        assert!(msg.contains("(0, 0)"), "{msg}");
    }

    #[test]
    fn decode_roundtrip() {
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let labels: Vec<u8> = (0..12 * 8).map(|_| rng.below(3) as u8).collect();
            let map = onehot_encode(&labels, 12, 8, &palette()).unwrap();
            assert_eq!(onehot_decode(&map), labels);
        }
    }

    #[test]
    fn decode_all_free() {
        let map = onehot_encode(&[0; 16], 4, 4, &palette()).unwrap();
        assert!(onehot_decode(&map).iter().all(|&l| l == 0));
    }

    #[test]
    fn onehot_channel_sum_is_one() {
        let mut rng = Rng::new(3);
        let labels: Vec<u8> = (0..64).map(|_| rng.below(3) as u8).collect();
        let map = onehot_encode(&labels, 8, 8, &palette()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let sum: f32 = (0..3).map(|c| map.channel_value(i, j, c)).sum();
                assert_eq!(sum, 1.0);
            }
        }
    }

    #[test]
    fn tensor_layout_channels_first() {
        let map = onehot_encode(&[2, 0], 1, 2, &palette()).unwrap();
        let t = map.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        // cell (0,0) has label 2 -> plane 2 position 0
        assert_eq!(t.data()[2 * 2 + 0], 1.0);
        // cell (0,1) has label 0 -> plane 0 position 1
        assert_eq!(t.data()[1], 1.0);
    }

    #[test]
    fn partial_map_zero_at_unobserved() {
        let pm = PartialMap::new(1, 2, 3, vec![1, 2], vec![true, false]).unwrap();
        assert_eq!(pm.label(0, 0), Some(1));
        assert_eq!(pm.label(0, 1), None);
        let sum: f32 = (0..3).map(|c| pm.channel_value(0, 1, c)).sum();
        assert_eq!(sum, 0.0);
    }
}
