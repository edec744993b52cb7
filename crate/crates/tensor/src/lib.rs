//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Everything the contact model differentiates goes through [`Tape`]: values are
//! recorded in forward order and [`Tape::backward`] replays them in reverse.
//! [`gradient_check`] compares the tape against central differences.

mod error;
mod gradcheck;
pub mod kernels;
mod params;
mod sparse;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{Gradients, ParamStore, ParamVars};
pub use sparse::SparseMatrix;
pub use tape::{Backward, Tape, Var};
pub use tensor::Tensor;
