//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The pieces: a per-forward-pass [`Tape`] of backward closures, shape-aware
//! ops defined on the tape, an insertion-ordered [`params::ParamSet`], the
//! [`optim::Adam`] optimizer, and finite-difference gradient verification.

pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
mod tape;

pub use conv::KernelPair;
pub use optim::{Adam, AdamConfig, LrGroup, OptimizerConfig};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{GradStore, Gradients, NodeId, Tape, Tensor};
