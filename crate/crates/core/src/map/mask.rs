//! Patch-level masking: plans, application, and object-patch selection.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::map::semantic::{PartialMap, SemanticMap};

/// (row, col) coordinate in the patch grid.
pub type PatchCoord = (usize, usize);

/// A set of patches to hide, with an optional target category that the plan
/// was built around. Patch coordinates index the `(H/P) x (W/P)` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    patch_size: usize,
    patch_rows: usize,
    patch_cols: usize,
    masked: BTreeSet<PatchCoord>,
    target_category: Option<u8>,
}

impl MaskPlan {
    pub fn new(
        patch_size: usize,
        patch_rows: usize,
        patch_cols: usize,
        masked: impl IntoIterator<Item = PatchCoord>,
        target_category: Option<u8>,
    ) -> Result<Self> {
        if patch_size == 0 || patch_rows == 0 || patch_cols == 0 {
            return Err(Error::invalid("mask plan geometry must be positive"));
        }
        let masked: BTreeSet<PatchCoord> = masked.into_iter().collect();
        for &(r, c) in &masked {
            if r >= patch_rows || c >= patch_cols {
                return Err(Error::invalid(format!(
                    "masked patch ({r}, {c}) outside {patch_rows}x{patch_cols} patch grid"
                )));
            }
        }
        Ok(MaskPlan {
            patch_size,
            patch_rows,
            patch_cols,
            masked,
            target_category,
        })
    }

    /// Plan matching a map's geometry. Fails if the map is not divisible
    /// into `patch_size` patches.
    pub fn for_map(
        map: &SemanticMap,
        patch_size: usize,
        masked: impl IntoIterator<Item = PatchCoord>,
        target_category: Option<u8>,
    ) -> Result<Self> {
        let (rows, cols) = patch_grid(map.height(), map.width(), patch_size)?;
        MaskPlan::new(patch_size, rows, cols, masked, target_category)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn patch_rows(&self) -> usize {
        self.patch_rows
    }

    pub fn patch_cols(&self) -> usize {
        self.patch_cols
    }

    pub fn masked_patches(&self) -> &BTreeSet<PatchCoord> {
        &self.masked
    }

    pub fn target_category(&self) -> Option<u8> {
        self.target_category
    }

    pub fn is_masked(&self, coord: PatchCoord) -> bool {
        self.masked.contains(&coord)
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    /// Check the plan covers every patch where `target_category` appears.
    /// Vacuously true for untargeted plans.
    pub fn covers_target(&self, map: &SemanticMap) -> Result<bool> {
        let Some(c) = self.target_category else {
            return Ok(true);
        };
        let patches = object_patches(map, c, self.patch_size)?;
        Ok(patches.iter().all(|p| self.masked.contains(p)))
    }
}

/// Patch grid dimensions for a map, rejecting indivisible geometry.
pub fn patch_grid(height: usize, width: usize, patch_size: usize) -> Result<(usize, usize)> {
    if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
        return Err(Error::shape(
            "patch geometry",
            &[height, width],
            &[patch_size],
        ));
    }
    Ok((height / patch_size, width / patch_size))
}

/// Zero out every cell inside the plan's masked patches and flag it
/// unobserved; all other cells are copied and flagged observed.
pub fn apply_mask(map: &SemanticMap, plan: &MaskPlan) -> Result<PartialMap> {
    let (rows, cols) = patch_grid(map.height(), map.width(), plan.patch_size)?;
    if rows != plan.patch_rows || cols != plan.patch_cols {
        return Err(Error::shape(
            "apply_mask",
            &[rows, cols],
            &[plan.patch_rows, plan.patch_cols],
        ));
    }
    let p = plan.patch_size;
    let mut labels = map.labels().to_vec();
    let mut observed = vec![true; labels.len()];
    for &(pr, pc) in &plan.masked {
        for i in 0..p {
            let row = pr * p + i;
            for j in 0..p {
                let idx = row * map.width() + pc * p + j;
                labels[idx] = 0;
                observed[idx] = false;
            }
        }
    }
    PartialMap::new(map.height(), map.width(), map.channels(), labels, observed)
}

/// The set of patches containing at least one cell of `category`.
pub fn object_patches(
    map: &SemanticMap,
    category: u8,
    patch_size: usize,
) -> Result<BTreeSet<PatchCoord>> {
    if (category as usize) >= map.channels() {
        return Err(Error::invalid(format!(
            "category {category} out of range [0, {}]",
            map.channels() - 1
        )));
    }
    let (_, _) = patch_grid(map.height(), map.width(), patch_size)?;
    let mut patches = BTreeSet::new();
    for row in 0..map.height() {
        for col in 0..map.width() {
            if map.label(row, col) == category {
                patches.insert((row / patch_size, col / patch_size));
            }
        }
    }
    Ok(patches)
}
