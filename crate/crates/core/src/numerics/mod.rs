//! Minimal tensor library with reverse-mode automatic differentiation.

pub mod gemm;
mod gradcheck;
pub mod nn;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use nn::{Graph, Mode, ParamId, ParamStore};
pub use tape::{Gradients, Tape, TraceEntry, Var};
pub use tensor::Tensor;
