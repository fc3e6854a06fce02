//! Efficient channel attention: per-channel gates from a 1-D convolution
//! over the channel-wise global means.

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor};
use crate::error::Result;
use crate::nn::Mode;
use crate::scalar::Scalar;

/// Adaptive kernel size: t = floor((log2(C) + 1) / 2), bumped to the next
/// odd number, never below 1.
pub fn adaptive_kernel_size(channels: usize) -> usize {
    assert!(channels > 0, "eca: zero channels");
    let t = (((channels as f64).log2() + 1.0) / 2.0).floor() as usize;
    let k = if t % 2 == 1 { t } else { t + 1 };
    k.max(1)
}

/// One ECA layer over `[N, C]` rows (voxels or pixels of one feature map).
pub struct Eca {
    pub weight: ParamId,
    pub kernel_size: usize,
    pub channels: usize,
}

impl Eca {
    /// Weights start at zero: the gate opens at sigmoid(0) = 0.5 for every
    /// channel, keeping attention input-independent until trained.
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, channels: usize) -> Self {
        let k = adaptive_kernel_size(channels);
        let weight = params.add(&format!("{name}.w"), vec![k], vec![F::zero(); k]);
        Eca { weight, kernel_size: k, channels }
    }

    /// `out[n, c] = rows[n, c] * sigmoid(conv1d(col_mean(rows))[c])`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &ParamSet<F>,
        rows: &Tensor<F>,
        mode: Mode,
    ) -> Result<Tensor<F>> {
        let w = match mode {
            Mode::Train => tape.param(params, self.weight),
            Mode::Eval => tape.param_frozen(params, self.weight),
        };
        let means = tape.col_mean(rows)?;
        let mixed = tape.conv1d_same(&means, &w)?;
        let gate = tape.sigmoid(&mixed);
        tape.mul_row_vec(rows, &gate)
    }
}
