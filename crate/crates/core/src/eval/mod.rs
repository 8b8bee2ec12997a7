//! Metrics, evaluation protocols, reports, and the ablation harness.

mod ablation;
mod metrics;
mod protocol;
mod report;

pub use ablation::{
    ablation_run, default_grid, AblationBudget, AblationCell, CellOutcome, MaskingStrategy,
    QuantizerChoice,
};
pub use metrics::{count_activations, map_metrics, metrics_from_counts, Counts, Metrics};
pub use protocol::{
    object_aware_plan, restoration_accuracy, run_protocol, ssr, trial_plan, trial_success,
    Conditioning, ProtocolOutcome, SsrProtocol, TrialRecord,
};
pub use report::{render_table, EvalReport};
