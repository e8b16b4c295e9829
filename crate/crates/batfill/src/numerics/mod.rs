//! Dense-tensor primitives with reverse-mode gradients.
//!
//! Execution is define-by-run: a [`Tape`] records every primitive as it runs
//! and replays the records in reverse to accumulate gradients. All math is
//! `f64`; model parameters are quantized to the `f32` grid at update time so
//! checkpoints (stored as 32-bit floats) round-trip losslessly.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Tape, Var};
pub use tensor::{BoolMatrix, Tensor};
