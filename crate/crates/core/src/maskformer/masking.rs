//! Training-time mask plan sampling.
//!
//! Two complementary strategies: pure random patch masking, and object-aware
//! masking that hides every patch of a chosen category before topping up
//! with random patches. The object-aware branch is taken with probability
//! `p_obj` when the map contains at least one object category.

use std::collections::BTreeSet;

use crate::error::Result;
use crate::map::{object_patches, patch_grid, MaskPlan, PatchCoord, SemanticMap};
use crate::rng::Rng;

/// Sample a plan masking `ceil(ratio * rows * cols)` patches (never fewer
/// than the chosen category's patches in the object-aware branch).
pub fn sample_mask_plan(
    map: &SemanticMap,
    patch_size: usize,
    ratio: f64,
    p_obj: f64,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    let (rows, cols) = patch_grid(map.height(), map.width(), patch_size)?;
    let present = map.present_object_categories();
    sample_plan_with(rows, cols, patch_size, ratio, p_obj, rng, &present, |c| {
        object_patches(map, c, patch_size).expect("category present in map")
    })
}

/// Core sampler; callers may supply cached object-patch lookups.
pub(crate) fn sample_plan_with(
    rows: usize,
    cols: usize,
    patch_size: usize,
    ratio: f64,
    p_obj: f64,
    rng: &mut Rng,
    present: &[u8],
    object_patches_for: impl Fn(u8) -> BTreeSet<PatchCoord>,
) -> Result<MaskPlan> {
    let total = rows * cols;
    let want = ((ratio * total as f64).ceil() as usize).clamp(1, total);

    let object_aware = !present.is_empty() && rng.bernoulli(p_obj);
    let (mut masked, target) = if object_aware {
        let c = present[rng.below(present.len() as u64) as usize];
        (object_patches_for(c), Some(c))
    } else {
        (BTreeSet::new(), None)
    };

    let pool: Vec<PatchCoord> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|p| !masked.contains(p))
        .collect();
    let extra = want.saturating_sub(masked.len()).min(pool.len());
    for p in rng.choose_distinct(&pool, extra) {
        masked.insert(p);
    }

    MaskPlan::new(patch_size, rows, cols, masked, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::FIRST_OBJECT_ID;
    use crate::scenegen::{generate_scene, SceneSpec};

    fn object_bearing_map(seed: u64) -> SemanticMap {
        let mut spec = SceneSpec::desk_default(seed);
        spec.objects_per_room = (1, 2);
        let mut s = seed;
        loop {
            spec.seed = s;
            let map = generate_scene(&spec).unwrap();
            if !map.present_object_categories().is_empty() {
                return map;
            }
            s += 1;
        }
    }

    #[test]
    fn full_ratio_masks_everything() {
        let map = object_bearing_map(1);
        let mut rng = Rng::new(1);
        let plan = sample_mask_plan(&map, 8, 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(plan.len(), 64);
    }

    #[test]
    fn object_plan_covers_object_patches() {
        let map = object_bearing_map(2);
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let plan = sample_mask_plan(&map, 8, 0.3, 1.0, &mut rng).unwrap();
            let c = plan.target_category().expect("object-aware plan");
            assert!(c >= FIRST_OBJECT_ID);
            assert!(plan.covers_target(&map).unwrap());
            // Requested volume is honored unless object patches exceed it.
            let obj = object_patches(&map, c, 8).unwrap();
            let want = (0.3f64 * 64.0).ceil() as usize;
            assert_eq!(plan.len(), want.max(obj.len()));
        }
    }

    #[test]
    fn p_obj_mixing_fraction() {
        // Monte-Carlo: with p_obj = 0.5 on an object-bearing map, the
        // object-aware fraction lands near one half.
        let map = object_bearing_map(3);
        let mut rng = Rng::new(3);
        let mut object_aware = 0;
        let trials = 1000;
        for _ in 0..trials {
            let plan = sample_mask_plan(&map, 8, 0.4, 0.5, &mut rng).unwrap();
            if plan.target_category().is_some() {
                object_aware += 1;
            }
        }
        let fraction = object_aware as f64 / trials as f64;
        assert!((0.45..=0.55).contains(&fraction), "fraction {fraction}");
    }

    #[test]
    fn objectless_map_yields_untargeted_plans() {
        let mut spec = SceneSpec::desk_default(4);
        spec.objects_per_room = (0, 0);
        let map = generate_scene(&spec).unwrap();
        let mut rng = Rng::new(4);
        let plan = sample_mask_plan(&map, 8, 0.5, 1.0, &mut rng).unwrap();
        assert!(plan.target_category().is_none());
        assert_eq!(plan.len(), 32);
    }

    #[test]
    fn sampling_is_deterministic() {
        let map = object_bearing_map(5);
        let plan1 = sample_mask_plan(&map, 8, 0.4, 0.5, &mut Rng::new(9)).unwrap();
        let plan2 = sample_mask_plan(&map, 8, 0.4, 0.5, &mut Rng::new(9)).unwrap();
        assert_eq!(plan1, plan2);
    }
}
