//! Pooled segmentation metrics over one-hot maps.
//!
//! Every (cell, channel) activation is treated as a binary prediction and
//! pooled into one TP/FP/FN count across all channels (micro-averaging).
//! Per-channel counts are kept for diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::SemanticMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Ratios from pooled counts with the zero-denominator conventions:
/// an empty prediction against an empty ground truth is perfect, against a
/// nonempty one it scores zero (and symmetrically for recall).
pub fn metrics_from_counts(c: Counts) -> Metrics {
    let precision = if c.tp + c.fp == 0 {
        if c.tp + c.fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let recall = if c.tp + c.fn_ == 0 {
        if c.tp + c.fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let iou = if c.tp + c.fp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp + c.fn_) as f64
    };
    Metrics {
        iou,
        recall,
        precision,
        f1,
    }
}

/// Pooled and per-channel activation counts between two one-hot maps.
pub fn count_activations(pred: &SemanticMap, gt: &SemanticMap) -> Result<(Counts, Vec<Counts>)> {
    if (pred.height(), pred.width(), pred.channels())
        != (gt.height(), gt.width(), gt.channels())
    {
        return Err(Error::shape(
            "map_metrics",
            &[pred.height(), pred.width(), pred.channels()],
            &[gt.height(), gt.width(), gt.channels()],
        ));
    }
    let mut pooled = Counts::default();
    let mut per_channel = vec![Counts::default(); gt.channels()];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if p == g {
            pooled.tp += 1;
            per_channel[p as usize].tp += 1;
        } else {
            pooled.fp += 1;
            pooled.fn_ += 1;
            per_channel[p as usize].fp += 1;
            per_channel[g as usize].fn_ += 1;
        }
    }
    Ok((pooled, per_channel))
}

/// IoU / recall / precision / F1 between a predicted and a ground-truth map.
pub fn map_metrics(pred: &SemanticMap, gt: &SemanticMap) -> Result<Metrics> {
    let (pooled, _) = count_activations(pred, gt)?;
    Ok(metrics_from_counts(pooled))
}
