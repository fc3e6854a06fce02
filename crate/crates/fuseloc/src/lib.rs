//! Multimodal place-recognition descriptors over point clouds and images.
//!
//! The crate trains and evaluates a two-branch network: a sparse-voxel
//! feature-pyramid branch for LiDAR point clouds and a small CNN branch for
//! camera images, fused into a single global descriptor and trained with a
//! batch-hard triplet margin loss. Everything runs on CPU over a built-in
//! reverse-mode autodiff tape; runs are deterministic for a fixed seed.
//!
//! Entry points:
//! - [`autodiff`]: tape, ops, optimizer, gradient checking
//! - [`sparse`]: sparse voxel tensors and convolutions
//! - [`branches`]: the two descriptor branches and their fusion
//! - [`metric`]: triplet mining, losses, and the training loop
//! - [`dataset`]: synthetic data generation, storage, augmentation
//! - [`eval`]: retrieval metrics and modality diagnostics
//! - [`commands`]: implementations behind the `fuseloc` binary

pub mod autodiff;
pub mod branches;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod metric;
pub mod nn;
pub mod opchecks;
pub mod pooling;
pub mod sparse;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
