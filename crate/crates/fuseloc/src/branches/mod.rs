//! Feature extraction branches and their fusion into one descriptor.

pub mod eca;
pub mod fusion;
pub mod image;
pub mod pc;

pub use eca::Eca;
pub use fusion::{fuse_descriptors, BatchOutput, FusedModel, FusionHead, FusionMode, ModelConfig};
pub use image::ImageBranch;
pub use pc::PcBranch;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor};
use crate::nn::Mode;
use crate::scalar::Scalar;

/// Bind a parameter to the tape: as a trainable leaf in training mode, as a
/// frozen constant in evaluation mode.
pub(crate) fn bind<F: Scalar>(
    tape: &Tape<F>,
    params: &ParamSet<F>,
    id: ParamId,
    mode: Mode,
) -> Tensor<F> {
    match mode {
        Mode::Train => tape.param(params, id),
        Mode::Eval => tape.param_frozen(params, id),
    }
}
