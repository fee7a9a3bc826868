//! Parallel, pitch-conditioned text-to-speech built on a small reverse-mode
//! autodiff engine.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod dsp;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod prosody;
pub mod ranking;
pub mod tensor_file;
pub mod text;
pub mod training;

pub use error::{Error, Result};
