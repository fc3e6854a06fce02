//! Reusable network building blocks shared by both descriptor branches.

pub mod init;
pub mod norm;

pub use norm::{BatchNorm, Mode};
