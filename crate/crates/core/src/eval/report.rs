//! Evaluation reports: the aggregate structure, JSON-lines emission, and a
//! plain-text table renderer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::protocol::{ProtocolOutcome, TrialRecord};

/// Aggregate evaluation results, all percentages in [0, 100].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub seed: u64,
    pub trials_run: usize,
    pub skipped: usize,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub ssr: f64,
    pub restoration: f64,
    /// The success rule in force, recorded because it is a configurable
    /// interpretation rather than a fixed definition.
    pub ssr_rule: String,
}

impl EvalReport {
    pub fn from_outcome(
        outcome: &ProtocolOutcome,
        restoration: f64,
        min_overlap: usize,
        fingerprint: &str,
        seed: u64,
    ) -> Result<Self> {
        let report = EvalReport {
            config_fingerprint: fingerprint.to_string(),
            seed,
            trials_run: outcome.trials_run,
            skipped: outcome.skipped,
            iou: outcome.mean_iou,
            recall: outcome.mean_recall,
            precision: outcome.mean_precision,
            f1: outcome.mean_f1,
            ssr: outcome.ssr_percent,
            restoration,
            ssr_rule: format!(
                "success = >= {min_overlap} predicted target cell(s) coinciding with ground truth inside the masked area"
            ),
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iou", self.iou),
            ("recall", self.recall),
            ("precision", self.precision),
            ("f1", self.f1),
            ("ssr", self.ssr),
            ("restoration", self.restoration),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [0, 100]")));
            }
        }
        // F1 must be the harmonic mean of the aggregate precision/recall
        // only when computed from pooled counts; per-trial means are
        // averaged independently, so the identity is checked per trial.
        Ok(())
    }

    /// One JSON object per line: a header record, then one per trial.
    pub fn to_jsonl(&self, records: &[TrialRecord]) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::json!({"kind": "summary", "report": self}).to_string());
        out.push('\n');
        for r in records {
            out.push_str(&serde_json::json!({"kind": "trial", "record": r}).to_string());
            out.push('\n');
        }
        out
    }
}

/// Render labelled metric rows as a fixed-width text table.
pub fn render_table(title: &str, rows: &[(String, EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    out.push_str(&format!(
        "{:<32} {:>8} {:>8} {:>10} {:>8} {:>8} {:>12}\n",
        "config", "IoU%", "Recall%", "Precision%", "F1%", "sSR%", "Restoration%"
    ));
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<32} {:>8.2} {:>8.2} {:>10.2} {:>8.2} {:>8.2} {:>12.2}\n",
            label, r.iou, r.recall, r.precision, r.f1, r.ssr, r.restoration
        ));
    }
    out
}
