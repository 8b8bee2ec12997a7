//! Bidirectional masked transformer over bit tokens: mask scheduling and
//! sampling, the model itself, training, and end-to-end map completion.

mod generate;
mod masking;
mod model;
mod schedule;
mod train;

pub use generate::Completer;
pub use masking::sample_mask_plan;
pub use model::{mt_loss, DecodeMode, Maskformer, MaskformerConfig};
#[doc(hidden)]
pub use model::{mt_loss_on_for_tests, MaskformerVars};
pub use schedule::{mask_ratio, MaskSchedule, PHASE1_HI, PHASE1_LO, RATIO_HI, RATIO_LO};
pub use train::{
    accuracy_trace_jsonl, loss_trace_jsonl, train_maskformer, AccuracyTrace, MtEpochStats,
};
