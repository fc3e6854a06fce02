//! Feature-map pooling into fixed-width descriptors: GeM (trainable
//! exponent), MAC (max), SPoC (mean).
//!
//! Maps arrive as `[N, C]` rows — occupied voxels for the sparse branch,
//! pixels for the image branch — and pool to a `[C]` vector.

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMethod {
    Gem,
    Mac,
    Spoc,
}

impl PoolMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gem" => Some(PoolMethod::Gem),
            "mac" => Some(PoolMethod::Mac),
            "spoc" => Some(PoolMethod::Spoc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PoolMethod::Gem => "gem",
            PoolMethod::Mac => "mac",
            PoolMethod::Spoc => "spoc",
        }
    }
}

/// One pooling layer. GeM owns a trainable exponent, clamped to p >= 1 in
/// the forward pass; MAC and SPoC are parameter-free.
pub struct PoolingHead {
    pub method: PoolMethod,
    /// GeM exponent parameter; `None` for MAC/SPoC.
    pub p: Option<ParamId>,
    /// Clamp floor applied to inputs before exponentiation, protecting the
    /// pow gradient at the exact zeros a ReLU map contains.
    pub eps: f64,
}

impl PoolingHead {
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, method: PoolMethod) -> Self {
        let p = match method {
            PoolMethod::Gem => {
                Some(params.add(&format!("{name}.p"), vec![1], vec![F::from_f64(3.0)]))
            }
            _ => None,
        };
        PoolingHead { method, p, eps: 1e-6 }
    }

    /// Pool `[N, C]` rows to a `[C]` descriptor.
    pub fn pool<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &ParamSet<F>,
        rows: &Tensor<F>,
        mode: Mode,
    ) -> Result<Tensor<F>> {
        match rows.shape() {
            [0, _] => return Err(Error::validation("cannot pool empty map")),
            [_, _] => {}
            other => {
                return Err(Error::validation(format!(
                    "pool: expected [N, C] rows, got {other:?}"
                )))
            }
        }
        match self.method {
            PoolMethod::Spoc => tape.col_mean(rows),
            PoolMethod::Mac => tape.col_max(rows),
            PoolMethod::Gem => {
                let p_id = self.p.expect("gem head has an exponent");
                let p_raw = match mode {
                    Mode::Train => tape.param(params, p_id),
                    Mode::Eval => tape.param_frozen(params, p_id),
                };
                let p = tape.clamp_min(&p_raw, F::one());
                let x = tape.clamp_min(rows, F::from_f64(self.eps));
                let xp = tape.pow_exp(&x, &p)?;
                let mean = tape.col_mean(&xp)?;
                let inv_p = tape.recip(&p)?;
                tape.pow_exp(&mean, &inv_p)
            }
        }
    }
}
