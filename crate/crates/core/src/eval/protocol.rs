//! Evaluation protocols: object-aware generation quality, the simulated
//! success ratio, and token restoration accuracy.
//!
//! The generation protocol mirrors training's object-aware masking: pick a
//! present object category, hide every patch containing it plus random
//! patches up to the masking fraction, complete the map conditioned on the
//! category, and compare against ground truth.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::metrics::{map_metrics, Metrics};
use crate::map::{apply_mask, object_patches, patch_grid, MaskPlan, SemanticMap};
use crate::maskformer::Completer;
use crate::rng::Rng;

/// How the completer is conditioned during a protocol run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    /// Pass the masked category as the target.
    CorrectTarget,
    /// Pass no target (null embedding row).
    NullTarget,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SsrProtocol {
    /// Total fraction of patches hidden per trial.
    pub mask_fraction: f64,
    /// Minimum predicted-cell overlap with ground truth for success.
    pub min_overlap: usize,
    pub trials: usize,
    pub seed: u64,
    pub conditioning: Conditioning,
}

impl Default for SsrProtocol {
    fn default() -> Self {
        SsrProtocol {
            mask_fraction: 0.5,
            min_overlap: 1,
            trials: 1000,
            seed: 0,
            conditioning: Conditioning::CorrectTarget,
        }
    }
}

/// One protocol trial.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub map_index: usize,
    pub target_category: u8,
    pub masked_patches: usize,
    pub success: bool,
    pub metrics: Metrics,
}

/// Aggregate outcome of a protocol run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub trials_run: usize,
    pub skipped: usize,
    pub successes: usize,
    pub ssr_percent: f64,
    /// Mean generation-quality metrics over trials, in percent.
    pub mean_iou: f64,
    pub mean_recall: f64,
    pub mean_precision: f64,
    pub mean_f1: f64,
    pub records: Vec<TrialRecord>,
}

/// Build the protocol's mask plan: all patches of `category` plus random
/// patches up to `ceil(fraction * patches)`.
pub fn object_aware_plan(
    map: &SemanticMap,
    category: u8,
    fraction: f64,
    patch_size: usize,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    let (rows, cols) = patch_grid(map.height(), map.width(), patch_size)?;
    let total = rows * cols;
    let want = ((fraction * total as f64).ceil() as usize).clamp(1, total);
    let mut masked: BTreeSet<(usize, usize)> = object_patches(map, category, patch_size)?;
    let pool: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|p| !masked.contains(p))
        .collect();
    let extra = want.saturating_sub(masked.len()).min(pool.len());
    for p in rng.choose_distinct(&pool, extra) {
        masked.insert(p);
    }
    MaskPlan::new(patch_size, rows, cols, masked, Some(category))
}

/// Success rule: at least `min_overlap` cells inside the masked area where
/// both prediction and ground truth carry the target category.
pub fn trial_success(
    pred: &SemanticMap,
    gt: &SemanticMap,
    plan: &MaskPlan,
    category: u8,
    min_overlap: usize,
) -> bool {
    let p = plan.patch_size();
    let mut overlap = 0usize;
    for &(pr, pc) in plan.masked_patches() {
        for i in 0..p {
            for j in 0..p {
                let (r, c) = (pr * p + i, pc * p + j);
                if gt.label(r, c) == category && pred.label(r, c) == category {
                    overlap += 1;
                    if overlap >= min_overlap {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// The category and mask plan for one protocol trial, or `None` when the
/// map has no object category to conceal. Deterministic in
/// `(protocol.seed, trial)`.
pub fn trial_plan(
    map: &SemanticMap,
    patch_size: usize,
    protocol: &SsrProtocol,
    trial: usize,
) -> Result<Option<(u8, MaskPlan)>> {
    let mut rng = Rng::derive(protocol.seed, trial as u64);
    let present = map.present_object_categories();
    if present.is_empty() {
        return Ok(None);
    }
    let category = present[rng.below(present.len() as u64) as usize];
    let plan = object_aware_plan(map, category, protocol.mask_fraction, patch_size, &mut rng)?;
    Ok(Some((category, plan)))
}

/// Run the object-aware protocol: per trial, conceal one present category
/// entirely (plus random patches to the masking fraction), complete, and
/// score success and map quality. Trials on maps without any object
/// category are skipped and counted.
pub fn run_protocol(
    completer: &Completer,
    maps: &[SemanticMap],
    protocol: &SsrProtocol,
) -> Result<ProtocolOutcome> {
    let patch = completer.tokenizer.patch_size();
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let mut successes = 0usize;
    let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);

    for trial in 0..protocol.trials {
        let map_index = trial % maps.len();
        let map = &maps[map_index];
        let Some((category, plan)) = trial_plan(map, patch, protocol, trial)? else {
            skipped += 1;
            continue;
        };
        let pm = apply_mask(map, &plan)?;
        let target = match protocol.conditioning {
            Conditioning::CorrectTarget => Some(category),
            Conditioning::NullTarget => None,
        };
        let pred = completer.generate(&pm, target)?;
        let success = trial_success(&pred, map, &plan, category, protocol.min_overlap);
        if success {
            successes += 1;
        }
        let metrics = map_metrics(&pred, map)?;
        sums.0 += metrics.iou;
        sums.1 += metrics.recall;
        sums.2 += metrics.precision;
        sums.3 += metrics.f1;
        records.push(TrialRecord {
            trial,
            map_index,
            target_category: category,
            masked_patches: plan.len(),
            success,
            metrics,
        });
    }

    let run = records.len();
    let denom = run.max(1) as f64;
    Ok(ProtocolOutcome {
        trials_run: run,
        skipped,
        successes,
        ssr_percent: 100.0 * successes as f64 / denom,
        mean_iou: 100.0 * sums.0 / denom,
        mean_recall: 100.0 * sums.1 / denom,
        mean_precision: 100.0 * sums.2 / denom,
        mean_f1: 100.0 * sums.3 / denom,
        records,
    })
}

/// Simulated success ratio (percent) under the object-aware protocol.
pub fn ssr(completer: &Completer, maps: &[SemanticMap], protocol: &SsrProtocol) -> Result<f64> {
    Ok(run_protocol(completer, maps, protocol)?.ssr_percent)
}

/// Exact-index matches between predicted and ground-truth tokens at the
/// scored positions.
pub(crate) fn score_restoration(
    predicted: &crate::quantizers::BitTokenGrid,
    gt: &crate::quantizers::BitTokenGrid,
    positions: &[usize],
) -> (u64, u64) {
    let hits = positions
        .iter()
        .filter(|&&p| predicted.tokens()[p] == gt.tokens()[p])
        .count() as u64;
    (hits, positions.len() as u64)
}

/// Top-1 restoration accuracy (percent): tokenize each map, hide
/// `ceil(ratio * positions)` random token positions, predict single-pass
/// without a target, and score exact index matches at the hidden positions.
///
/// Each map's hidden positions derive from a hash of its own labels, so the
/// statistic does not depend on the order maps are supplied in.
pub fn restoration_accuracy(
    completer: &Completer,
    maps: &[SemanticMap],
    ratio: f64,
    seed: u64,
) -> Result<f64> {
    let mut hits = 0u64;
    let mut total = 0u64;
    for map in maps {
        let gt = completer.tokenizer.tokenize(map)?;
        let n = gt.rows() * gt.cols();
        let k = ((ratio * n as f64).ceil() as usize).clamp(1, n);
        let mut rng = Rng::derive(seed, crate::fingerprint::fnv1a64(map.labels()));
        let all: Vec<usize> = (0..n).collect();
        let positions = rng.choose_distinct(&all, k);

        let mut input = gt.clone();
        let mask = input.mask_token();
        let cols = input.cols();
        for &p in &positions {
            input.set_token(p / cols, p % cols, mask)?;
        }
        let predicted = completer.predict_tokens(&input, None)?;
        let (h, t) = score_restoration(&predicted, &gt, &positions);
        hits += h;
        total += t;
    }
    Ok(100.0 * hits as f64 / total.max(1) as f64)
}
