//! Hybrid sequence model combining a frozen HiPPO state-space layer with
//! local (window or chunk) softmax attention, plus the tooling to train it
//! on synthetic long-range tasks and benchmark its scaling on a CPU.

pub mod attention;
pub mod bench;
pub mod cli;
pub mod error;
pub mod model;
pub mod real;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Tape, Tensor, Var};
