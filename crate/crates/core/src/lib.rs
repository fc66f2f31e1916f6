//! Swapout and its relatives (dropout, stochastic depth, SkipForward) as
//! per-unit stochastic combination rules for residual blocks, on a small
//! `f64` tensor and reverse-mode autodiff core.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod network;
pub mod rules;
pub mod tensor;
pub mod train;
pub mod verification;

pub use error::{Error, Result};
pub use tensor::Tensor;
