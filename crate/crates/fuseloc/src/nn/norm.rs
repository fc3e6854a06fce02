//! Batch normalization composed from tape primitives.
//!
//! Operates on row matrices `[N, C]` where N runs over every normalized
//! position in the batch (all voxels of all clouds, or all pixels of all
//! images). Training mode normalizes with batch statistics (population
//! variance) and maintains running statistics for evaluation; evaluation
//! mode normalizes with the stored running statistics.

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Forward mode of a normalization-bearing network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One batch-norm layer: scale/shift parameters plus running statistics.
#[derive(Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    /// Register a batch-norm layer under `name.{gamma,beta,running_mean,
    /// running_var}` with the standard init (γ=1, β=0, mean=0, var=1).
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, channels: usize) -> Self {
        let gamma = params.add(&format!("{name}.gamma"), vec![channels], vec![F::one(); channels]);
        let beta = params.add(&format!("{name}.beta"), vec![channels], vec![F::zero(); channels]);
        let running_mean = params.add_buffer(
            &format!("{name}.running_mean"),
            vec![channels],
            vec![F::zero(); channels],
        );
        let running_var = params.add_buffer(
            &format!("{name}.running_var"),
            vec![channels],
            vec![F::one(); channels],
        );
        BatchNorm { gamma, beta, running_mean, running_var, channels, momentum: 0.1, eps: 1e-5 }
    }

    /// Normalize `[N, C]` rows. Training requires N >= 2 and updates the
    /// running statistics (EMA with unbiased variance); evaluation uses the
    /// stored statistics and leaves them untouched.
    pub fn forward_rows<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &mut ParamSet<F>,
        x: &Tensor<F>,
        mode: Mode,
    ) -> Result<Tensor<F>> {
        let (n, c) = match x.shape() {
            [n, c] => (*n, *c),
            other => {
                return Err(Error::validation(format!(
                    "batchnorm: expected [N, C] rows, got {other:?}"
                )))
            }
        };
        if c != self.channels {
            return Err(Error::validation(format!(
                "batchnorm: {c} input channels, layer has {}",
                self.channels
            )));
        }
        let gamma = match mode {
            Mode::Train => tape.param(params, self.gamma),
            Mode::Eval => tape.param_frozen(params, self.gamma),
        };
        let beta = match mode {
            Mode::Train => tape.param(params, self.beta),
            Mode::Eval => tape.param_frozen(params, self.beta),
        };

        let (centered, inv_std) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::validation(format!(
                        "batchnorm: training mode needs at least 2 rows, got {n}"
                    )));
                }
                let mean = tape.col_mean(x)?;
                let centered = tape.sub_row_vec(x, &mean)?;
                let sq = tape.mul(&centered, &centered)?;
                let var = tape.col_mean(&sq)?; // population variance
                self.update_running(params, mean.values(), var.values(), n);
                let inv_std = tape.pow_const(&tape.add_scalar(&var, F::from_f64(self.eps)), F::from_f64(-0.5))?;
                (centered, inv_std)
            }
            Mode::Eval => {
                let mean = tape.param_frozen(params, self.running_mean);
                let var = tape.param_frozen(params, self.running_var);
                let centered = tape.sub_row_vec(x, &mean)?;
                let inv_std = tape.pow_const(&tape.add_scalar(&var, F::from_f64(self.eps)), F::from_f64(-0.5))?;
                (centered, inv_std)
            }
        };
        let xhat = tape.mul_row_vec(&centered, &inv_std)?;
        let scaled = tape.mul_row_vec(&xhat, &gamma)?;
        tape.add_row_vec(&scaled, &beta)
    }

    fn update_running<F: Scalar>(
        &self,
        params: &mut ParamSet<F>,
        batch_mean: &[F],
        batch_var_pop: &[F],
        n: usize,
    ) {
        let m = F::from_f64(self.momentum);
        let keep = F::one() - m;
        // Running variance tracks the unbiased estimate, n/(n-1) times the
        // population variance used for normalization.
        let unbias = F::from_usize(n) / F::from_usize(n - 1);
        {
            let rm = &mut params.get_mut(self.running_mean).values;
            for (r, &b) in rm.iter_mut().zip(batch_mean) {
                *r = keep * *r + m * b;
            }
        }
        {
            let rv = &mut params.get_mut(self.running_var).values;
            for (r, &b) in rv.iter_mut().zip(batch_var_pop) {
                *r = keep * *r + m * (b * unbias);
            }
        }
    }
}
