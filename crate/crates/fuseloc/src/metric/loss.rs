//! Triplet margin loss and the weighted multi-head objective.
//!
//! Each head (fused, point-cloud, image) gets its own triplet loss mined in
//! its own descriptor space; the total is the weighted sum
//! `(1 − (α + β))·L_F + α·L_PC + β·L_RGB`, evaluated left to right in that
//! order so the value is reproducible bit for bit.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::metric::mining::Triplet;
use crate::scalar::Scalar;

/// Weights of the multi-head objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Triplet margin `m`.
    pub margin: f64,
    /// Weight of the point-cloud head loss.
    pub alpha: f64,
    /// Weight of the image head loss.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: 0.2, alpha: 0.5, beta: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::validation(format!(
                "loss margin must be positive, got {}",
                self.margin
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::validation(format!(
                "loss weights must be nonnegative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.alpha + self.beta > 1.0 {
            return Err(Error::validation(format!(
                "alpha + beta must not exceed 1, got {}",
                self.alpha + self.beta
            )));
        }
        Ok(())
    }

    /// Weight of the fused head: `1 − (α + β)`.
    pub fn fused_weight(&self) -> f64 {
        1.0 - (self.alpha + self.beta)
    }
}

/// Mean hinge loss `max(d(a,p) − d(a,n) + m, 0)` over mined triplets, built
/// on the tape so it can be differentiated, plus the count of active
/// triplets (strictly positive loss).
///
/// An empty triplet list yields an untracked zero: callers can detect the
/// missing node and skip the optimizer step.
pub fn triplet_margin_loss<F: Scalar>(
    tape: &Tape<F>,
    descriptors: &Tensor<F>,
    triplets: &[Triplet],
    margin: f64,
) -> Result<(Tensor<F>, usize)> {
    if triplets.is_empty() {
        return Ok((tape.scalar(F::from_f64(0.0)), 0));
    }
    let n = match descriptors.shape() {
        [n, _] => *n,
        other => {
            return Err(Error::validation(format!(
                "triplet_margin_loss: expected [N, W] descriptors, got {other:?}"
            )))
        }
    };
    let mut hinges = Vec::with_capacity(triplets.len());
    let mut active = 0usize;
    for t in triplets {
        for idx in [t.anchor, t.positive, t.negative] {
            if idx >= n {
                return Err(Error::validation(format!(
                    "triplet index {idx} out of range for a batch of {n}"
                )));
            }
        }
        let a = tape.slice_rows(descriptors, t.anchor, t.anchor + 1)?;
        let p = tape.slice_rows(descriptors, t.positive, t.positive + 1)?;
        let g = tape.slice_rows(descriptors, t.negative, t.negative + 1)?;
        let d_ap = tape.euclidean_distance(&a, &p)?;
        let d_an = tape.euclidean_distance(&a, &g)?;
        let gap = tape.add_scalar(&tape.sub(&d_ap, &d_an)?, F::from_f64(margin));
        if gap.values()[0].as_f64() > 0.0 {
            active += 1;
        }
        hinges.push(tape.relu(&gap));
    }
    let refs: Vec<&Tensor<F>> = hinges.iter().collect();
    let stacked = tape.concat0(&refs)?;
    Ok((tape.mean(&stacked)?, active))
}

/// Value-only twin of [`triplet_margin_loss`]: mean hinge and active count
/// from a precomputed row-major n x n distance matrix. Used for logging and
/// diagnostics where no gradient is needed.
pub fn hinge_values(dist: &[f64], n: usize, triplets: &[Triplet], margin: f64) -> (f64, usize) {
    if triplets.is_empty() {
        return (0.0, 0);
    }
    let mut sum = 0.0;
    let mut active = 0usize;
    for t in triplets {
        let h = (dist[t.anchor * n + t.positive] - dist[t.anchor * n + t.negative] + margin)
            .max(0.0);
        if h > 0.0 {
            active += 1;
        }
        sum += h;
    }
    (sum / triplets.len() as f64, active)
}

/// Per-head losses and active-triplet counts combined into the weighted
/// total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub fused: f64,
    pub pc: f64,
    pub rgb: f64,
    pub active_fused: usize,
    pub active_pc: usize,
    pub active_rgb: usize,
    pub total: f64,
}

/// Combine per-head (loss, active count) pairs:
/// `total = (1 − (α + β))·L_F + α·L_PC + β·L_RGB`, left to right.
pub fn multi_head_loss(
    fused: (f64, usize),
    pc: (f64, usize),
    rgb: (f64, usize),
    cfg: &LossConfig,
) -> LossBreakdown {
    let total = (cfg.fused_weight() * fused.0 + cfg.alpha * pc.0) + cfg.beta * rgb.0;
    LossBreakdown {
        fused: fused.0,
        pc: pc.0,
        rgb: rgb.0,
        active_fused: fused.1,
        active_pc: pc.1,
        active_rgb: rgb.1,
        total,
    }
}
