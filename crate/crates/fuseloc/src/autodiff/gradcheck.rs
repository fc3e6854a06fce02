//! Finite-difference verification of tape gradients.
//!
//! Central differences at f64: numeric ~= (f(x+h) - f(x-h)) / 2h, compared
//! against the analytic gradient with a floored relative error so that
//! near-zero gradients do not blow the ratio up.

use rand::Rng;

use crate::autodiff::params::ParamSet;
use crate::autodiff::tape::{Tape, Tensor};
use crate::error::{Error, Result};

/// Relative error with an absolute floor: |a - n| / max(|a|, |n|, 1e-8).
pub fn floored_rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// One analytic-vs-numeric comparison.
#[derive(Debug, Clone)]
pub struct FdEntry {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl FdEntry {
    pub fn abs_err(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    fn new() -> Self {
        FdReport { entries: Vec::new() }
    }

    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = floored_rel_err(analytic, numeric);
        self.entries.push(FdEntry { label: label.to_string(), index, analytic, numeric, rel_err: rel });
    }

    pub fn checks(&self) -> usize {
        self.entries.len()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    /// Worst comparison by relative error.
    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).expect("finite rel err"))
    }

    /// Strict criterion for well-conditioned checks: every relative error
    /// below `tolerance`.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.entries.iter().all(|e| e.rel_err < tolerance)
    }

    /// Combined criterion for deep composites, where tiny true gradients sit
    /// at the finite-difference noise floor: each comparison must be close in
    /// relative OR absolute terms.
    pub fn passes_rel_or_abs(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.entries.iter().all(|e| e.rel_err < rel_tol || e.abs_err() < abs_tol)
    }

    /// Worst comparison under the combined criterion (largest absolute error
    /// among entries that fail the relative tolerance), for failure messages.
    pub fn worst_rel_or_abs(&self, rel_tol: f64) -> Option<&FdEntry> {
        self.entries
            .iter()
            .filter(|e| e.rel_err >= rel_tol)
            .max_by(|a, b| a.abs_err().partial_cmp(&b.abs_err()).expect("finite abs err"))
    }
}

/// Check every component of d(loss)/d(input) for a scalar-valued builder.
///
/// `build` is called once per probe on a fresh tape; it must be a pure
/// function of the watched input.
pub fn finite_difference_check<B>(
    label: &str,
    shape: &[usize],
    x0: &[f64],
    epsilon: f64,
    build: B,
) -> Result<FdReport>
where
    B: Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    if shape.iter().product::<usize>() != x0.len() {
        return Err(Error::validation("finite_difference_check: shape/input mismatch"));
    }
    let eval = |xs: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(shape.to_vec(), xs.to_vec());
        let loss = build(&tape, &x)?;
        if loss.len() != 1 {
            return Err(Error::validation("finite_difference_check: loss must be scalar"));
        }
        Ok(loss.scalar_value())
    };

    let analytic = {
        let tape = Tape::new();
        let x = tape.watch(shape.to_vec(), x0.to_vec());
        let loss = build(&tape, &x)?;
        let mut none = ParamSet::new();
        let grads = tape.backward(&loss, &mut none)?;
        grads.wrt(&x)
    };

    let mut report = FdReport::new();
    let mut probe = x0.to_vec();
    for i in 0..x0.len() {
        probe[i] = x0[i] + epsilon;
        let plus = eval(&probe)?;
        probe[i] = x0[i] - epsilon;
        let minus = eval(&probe)?;
        probe[i] = x0[i];
        let numeric = (plus - minus) / (2.0 * epsilon);
        report.record(label, i, analytic[i], numeric);
    }
    Ok(report)
}

/// Like [`finite_difference_check`], for builders whose graph also touches
/// a parameter set (e.g. layers that register tracked parameters). The
/// real set is handed to the backward pass so parameter nodes resolve;
/// only the watched input is probed. The builder receives the set
/// immutably — forwards that need `&mut` should clone a value-scratch
/// inside (parameter ids survive the clone).
pub fn finite_difference_check_with_params<B>(
    label: &str,
    shape: &[usize],
    x0: &[f64],
    epsilon: f64,
    params: &mut ParamSet<f64>,
    build: B,
) -> Result<FdReport>
where
    B: Fn(&Tape<f64>, &ParamSet<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    if shape.iter().product::<usize>() != x0.len() {
        return Err(Error::validation("finite_difference_check: shape/input mismatch"));
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.watch(shape.to_vec(), x0.to_vec());
        let loss = build(&tape, params, &x)?;
        let grads = tape.backward(&loss, params)?;
        grads.wrt(&x)
    };

    let mut report = FdReport::new();
    let mut probe = x0.to_vec();
    let eval = |xs: &[f64], params: &ParamSet<f64>| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(shape.to_vec(), xs.to_vec());
        let loss = build(&tape, params, &x)?;
        if loss.len() != 1 {
            return Err(Error::validation("finite_difference_check: loss must be scalar"));
        }
        Ok(loss.scalar_value())
    };
    for i in 0..x0.len() {
        probe[i] = x0[i] + epsilon;
        let plus = eval(&probe, params)?;
        probe[i] = x0[i] - epsilon;
        let minus = eval(&probe, params)?;
        probe[i] = x0[i];
        let numeric = (plus - minus) / (2.0 * epsilon);
        report.record(label, i, analytic[i], numeric);
    }
    Ok(report)
}

/// Check gradients of trainable parameters for a loss built from a
/// parameter set, probing `samples_per_param` random indices of each
/// parameter (or all of them when the parameter is small enough).
pub fn check_param_gradients<B, R>(
    params: &mut ParamSet<f64>,
    samples_per_param: usize,
    epsilon: f64,
    rng: &mut R,
    mut build: B,
) -> Result<FdReport>
where
    B: FnMut(&Tape<f64>, &ParamSet<f64>) -> Result<Tensor<f64>>,
    R: Rng,
{
    params.zero_grad();
    {
        let tape = Tape::new();
        let loss = build(&tape, params)?;
        tape.backward(&loss, params)?;
    }
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad.clone()).collect();

    let param_ids: Vec<_> =
        params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut report = FdReport::new();
    for pid in param_ids {
        let (name, len) = {
            let p = params.get(pid);
            (p.name.clone(), p.values.len())
        };
        let indices: Vec<usize> = if len <= samples_per_param {
            (0..len).collect()
        } else {
            (0..samples_per_param).map(|_| rng.gen_range(0..len)).collect()
        };
        for idx in indices {
            let orig = params.get(pid).values[idx];
            params.get_mut(pid).values[idx] = orig + epsilon;
            let plus = {
                let tape = Tape::new();
                build(&tape, params)?.scalar_value()
            };
            params.get_mut(pid).values[idx] = orig - epsilon;
            let minus = {
                let tape = Tape::new();
                build(&tape, params)?.scalar_value()
            };
            params.get_mut(pid).values[idx] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            report.record(&name, idx, analytic[pid.0][idx], numeric);
        }
    }
    Ok(report)
}
