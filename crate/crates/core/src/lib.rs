//! Desk-scale vision-to-language pipeline.
//!
//! Dense f64 tensors with reverse-mode autodiff, adaptive image slicing with
//! pixel-shuffle compression, a pooled-query attention adaptor with linear
//! cost in the token count, a toy causal LM trained in two stages, caption
//! corpus metrics, and an analytic/empirical complexity bench.

pub mod bench;
pub mod config;
pub mod error;
pub mod fd;
pub mod frontend;
pub mod gradcheck;
pub mod io;
pub mod lm;
pub mod metrics;
pub mod nta;
pub mod ops;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SplitMix64;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
