//! Minimal dense-tensor training substrate: tensors, a reverse-mode tape,
//! Adam, finite-difference gradient checking, and checkpoint I/O.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod init;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
