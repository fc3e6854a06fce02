//! Named finite-difference checks, one entry per differentiable operation.
//!
//! Each check builds a small fixed input, compares analytic gradients with
//! central differences in 64-bit, and reports the worst relative error.
//! The suite backs the `gradcheck` command and the gradient acceptance
//! gate; individual entries can be run by name.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{
    check_param_gradients, finite_difference_check, finite_difference_check_with_params, FdReport,
};
use crate::autodiff::{ParamSet, Tape, Tensor};
use crate::branches::Eca;
use crate::error::{Error, Result};
use crate::metric::mining::Triplet;
use crate::metric::{triplet_margin_loss, LossConfig};
use crate::nn::{BatchNorm, Mode};
use crate::pooling::{PoolMethod, PoolingHead};
use crate::sparse::{sparse_conv, sparse_transposed_conv, SparseTensor, VoxelGrid};

/// Relative-error bound every entry must stay under.
pub const SUITE_TOLERANCE: f64 = 1e-5;

/// Default central-difference step.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Every op the suite knows, in run order.
pub const OP_NAMES: &[&str] = &[
    "dense_conv",
    "sparse_conv",
    "sparse_tconv",
    "eca",
    "gem",
    "mac",
    "spoc",
    "batchnorm",
    "triplet_loss",
    "multi_head_loss",
];

/// Aggregated outcome of one op's checks.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    /// Number of gradient components compared.
    pub checks: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Run one op's checks by name.
pub fn run_op(name: &str, epsilon: f64, tolerance: f64) -> Result<OpCheck> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::validation(format!(
            "finite-difference step must be positive, got {epsilon}"
        )));
    }
    let canonical = OP_NAMES
        .iter()
        .copied()
        .find(|n| *n == name)
        .ok_or_else(|| {
            Error::validation(format!(
                "unknown op {name:?}; available: {}",
                OP_NAMES.join(", ")
            ))
        })?;
    let reports = match canonical {
        "dense_conv" => check_dense_conv(epsilon)?,
        "sparse_conv" => check_sparse_conv(epsilon)?,
        "sparse_tconv" => check_sparse_tconv(epsilon)?,
        "eca" => check_eca(epsilon)?,
        "gem" => check_pool(PoolMethod::Gem, epsilon)?,
        "mac" => check_pool(PoolMethod::Mac, epsilon)?,
        "spoc" => check_pool(PoolMethod::Spoc, epsilon)?,
        "batchnorm" => check_batchnorm(epsilon)?,
        "triplet_loss" => check_triplet_loss(epsilon)?,
        "multi_head_loss" => check_multi_head_loss(epsilon)?,
        _ => unreachable!("op list is exhaustive"),
    };
    let checks = reports.iter().map(|r| r.checks()).sum();
    let max_rel_err = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    Ok(OpCheck { name: canonical, checks, max_rel_err, passed: max_rel_err < tolerance })
}

/// Run the whole suite, or a single op when `filter` is given.
pub fn run_suite(filter: Option<&str>, epsilon: f64, tolerance: f64) -> Result<Vec<OpCheck>> {
    match filter {
        Some(name) => Ok(vec![run_op(name, epsilon, tolerance)?]),
        None => OP_NAMES.iter().map(|n| run_op(n, epsilon, tolerance)).collect(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Sum of squares: a nonlinear scalar loss so upstream gradients vary.
fn sq_sum(tape: &Tape<f64>, y: &Tensor<f64>) -> Result<Tensor<f64>> {
    let sq = tape.mul(y, y)?;
    Ok(tape.sum(&sq))
}

fn check_dense_conv(eps: f64) -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (cin, cout, h, w) = (2usize, 3usize, 5usize, 5usize);
    let x0 = uniform(&mut rng, cin * h * w, -1.0, 1.0);
    let w0 = uniform(&mut rng, cout * cin * 9, -0.7, 0.7);

    let w_held = w0.clone();
    let wrt_input = finite_difference_check(
        "dense_conv/input",
        &[cin, h, w],
        &x0,
        eps,
        move |tape, x| {
            let wt = tape.constant(vec![cout, cin, 3, 3], w_held.clone());
            let y = tape.conv2d(x, &wt, 2, 1)?;
            sq_sum(tape, &y)
        },
    )?;

    let x_held = x0;
    let wrt_weight = finite_difference_check(
        "dense_conv/weight",
        &[cout, cin, 3, 3],
        &w0,
        eps,
        move |tape, wt| {
            let x = tape.constant(vec![cin, h, w], x_held.clone());
            let y = tape.conv2d(&x, wt, 2, 1)?;
            sq_sum(tape, &y)
        },
    )?;
    Ok(vec![wrt_input, wrt_weight])
}

fn sparse_fixture() -> (Rc<VoxelGrid>, usize) {
    let coords = [[0, 0, 0], [1, 0, 0], [0, 2, 1], [3, 3, 3], [2, 1, 0], [1, 2, 2]];
    (Rc::new(VoxelGrid::new(coords, 1).expect("valid fixture grid")), 2)
}

fn check_sparse_conv(eps: f64) -> Result<Vec<FdReport>> {
    let (grid, cin) = sparse_fixture();
    let cout = 2usize;
    let taps = 27usize; // 3x3x3 neighborhood
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let f0 = uniform(&mut rng, grid.len() * cin, -1.0, 1.0);
    let k0 = uniform(&mut rng, taps * cin * cout, -0.5, 0.5);

    let (g, k_held) = (Rc::clone(&grid), k0.clone());
    let wrt_features = finite_difference_check(
        "sparse_conv/features",
        &[grid.len(), cin],
        &f0,
        eps,
        move |tape, f| {
            let x = SparseTensor::new(Rc::clone(&g), f.clone())?;
            let kt = tape.constant(vec![taps, cin, cout], k_held.clone());
            let y = sparse_conv(tape, &x, &kt, 3, 1)?;
            sq_sum(tape, &y.feats)
        },
    )?;

    let (g, f_held) = (Rc::clone(&grid), f0);
    let wrt_kernel = finite_difference_check(
        "sparse_conv/kernel",
        &[taps, cin, cout],
        &k0,
        eps,
        move |tape, kt| {
            let x = SparseTensor::new(
                Rc::clone(&g),
                tape.constant(vec![g.len(), cin], f_held.clone()),
            )?;
            let y = sparse_conv(tape, &x, kt, 3, 1)?;
            sq_sum(tape, &y.feats)
        },
    )?;
    Ok(vec![wrt_features, wrt_kernel])
}

fn check_sparse_tconv(eps: f64) -> Result<Vec<FdReport>> {
    let (targets, cin) = sparse_fixture();
    let cout = 2usize;
    let taps = 8usize; // 2x2x2 neighborhood
    // Derive the coarse (stride 2) grid exactly as a downsampling conv would.
    let coarse = {
        let tape: Tape<f64> = Tape::new();
        let x = SparseTensor::new(
            Rc::clone(&targets),
            tape.constant(vec![targets.len(), 1], vec![1.0; targets.len()]),
        )?;
        let w = tape.constant(vec![taps, 1, 1], vec![1.0; taps]);
        sparse_conv(&tape, &x, &w, 2, 2)?.grid
    };

    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let f0 = uniform(&mut rng, coarse.len() * cin, -1.0, 1.0);
    let k0 = uniform(&mut rng, taps * cin * cout, -0.5, 0.5);

    let (cg, tg, k_held) = (Rc::clone(&coarse), Rc::clone(&targets), k0.clone());
    let wrt_features = finite_difference_check(
        "sparse_tconv/features",
        &[coarse.len(), cin],
        &f0,
        eps,
        move |tape, f| {
            let x = SparseTensor::new(Rc::clone(&cg), f.clone())?;
            let kt = tape.constant(vec![taps, cin, cout], k_held.clone());
            let y = sparse_transposed_conv(tape, &x, &kt, 2, 2, &tg)?;
            sq_sum(tape, &y.feats)
        },
    )?;

    let (cg, tg, f_held) = (Rc::clone(&coarse), Rc::clone(&targets), f0);
    let wrt_kernel = finite_difference_check(
        "sparse_tconv/kernel",
        &[taps, cin, cout],
        &k0,
        eps,
        move |tape, kt| {
            let x = SparseTensor::new(
                Rc::clone(&cg),
                tape.constant(vec![cg.len(), cin], f_held.clone()),
            )?;
            let y = sparse_transposed_conv(tape, &x, kt, 2, 2, &tg)?;
            sq_sum(tape, &y.feats)
        },
    )?;
    Ok(vec![wrt_features, wrt_kernel])
}

fn check_eca(eps: f64) -> Result<Vec<FdReport>> {
    let (rows, channels) = (6usize, 8usize);
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let x0 = uniform(&mut rng, rows * channels, -1.0, 1.0);
    let w_init = uniform(&mut rng, 3, -0.8, 0.8);

    let (x_held, w_held) = (x0.clone(), w_init.clone());
    let wrt_input = finite_difference_check(
        "eca/input",
        &[rows, channels],
        &x0,
        eps,
        move |tape, x| {
            let mut params = ParamSet::new();
            let eca = Eca::new(&mut params, "gate", channels);
            let id = params.lookup("gate.w").expect("eca weight registered");
            params.get_mut(id).values.copy_from_slice(&w_held);
            let y = eca.forward(tape, &params, x, Mode::Eval)?;
            sq_sum(tape, &y)
        },
    )?;

    let mut params = ParamSet::new();
    let eca = Eca::new(&mut params, "gate", channels);
    let id = params.lookup("gate.w")?;
    params.get_mut(id).values.copy_from_slice(&w_init);
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let wrt_weight = check_param_gradients(&mut params, 8, eps, &mut rng, |tape, ps| {
        let x = tape.constant(vec![rows, channels], x_held.clone());
        let y = eca.forward(tape, ps, &x, Mode::Train)?;
        sq_sum(tape, &y)
    })?;
    Ok(vec![wrt_input, wrt_weight])
}

fn check_pool(method: PoolMethod, eps: f64) -> Result<Vec<FdReport>> {
    let (rows, channels) = (7usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    // Positive, well-separated values: away from GeM's clamp floor and
    // MAC's tie kinks.
    let x0: Vec<f64> = (0..rows * channels)
        .map(|i| 0.15 + 0.11 * (i as f64) + rng.gen_range(0.0..0.05))
        .collect();

    let x_held = x0.clone();
    let label = method.name();
    let wrt_input = finite_difference_check(
        &format!("{label}/input"),
        &[rows, channels],
        &x0,
        eps,
        move |tape, x| {
            let mut params = ParamSet::new();
            let head = PoolingHead::new(&mut params, "pool", method);
            let d = head.pool(tape, &params, x, Mode::Eval)?;
            sq_sum(tape, &d)
        },
    )?;
    let mut reports = vec![wrt_input];

    if method == PoolMethod::Gem {
        let mut params = ParamSet::new();
        let head = PoolingHead::new(&mut params, "pool", method);
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let wrt_p = check_param_gradients(&mut params, 4, eps, &mut rng, move |tape, ps| {
            let x = tape.constant(vec![rows, channels], x_held.clone());
            let d = head.pool(tape, ps, &x, Mode::Train)?;
            sq_sum(tape, &d)
        })?;
        reports.push(wrt_p);
    }
    Ok(reports)
}

fn check_batchnorm(eps: f64) -> Result<Vec<FdReport>> {
    let (rows, channels) = (6usize, 3usize);
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let x0 = uniform(&mut rng, rows * channels, -1.5, 1.5);
    // A plain sum of squares of normalized outputs is almost invariant to
    // the input (the batch statistics renormalize perturbations away), so
    // weight each output differently to get well-conditioned gradients.
    let weights = uniform(&mut rng, rows * channels, 0.5, 2.0);

    let mut params = ParamSet::new();
    let bn = BatchNorm::new(&mut params, "bn", channels);
    // Move gamma/beta off their 1/0 initialization so gradients are generic.
    for (suffix, base) in [("gamma", 1.0f64), ("beta", 0.0f64)] {
        let id = params.lookup(&format!("bn.{suffix}"))?;
        for (i, v) in params.get_mut(id).values.iter_mut().enumerate() {
            *v = base + 0.1 * (i as f64 + 1.0);
        }
    }

    // Batch-statistics path: gamma/beta enter the graph as tracked
    // parameters, so the analytic pass needs the real set.
    let w_held = weights.clone();
    let wrt_input = finite_difference_check_with_params(
        "batchnorm/input",
        &[rows, channels],
        &x0,
        eps,
        &mut params,
        move |tape, ps, x| {
            let mut scratch = ps.clone_values();
            let y = bn.forward_rows(tape, &mut scratch, x, Mode::Train)?;
            let r = tape.constant(vec![rows, channels], w_held.clone());
            sq_sum(tape, &tape.mul(&y, &r)?)
        },
    )?;

    let x_held = x0;
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let wrt_affine = check_param_gradients(&mut params, 6, eps, &mut rng, move |tape, ps| {
        let mut scratch = ps.clone_values();
        let x = tape.constant(vec![rows, channels], x_held.clone());
        let y = bn.forward_rows(tape, &mut scratch, &x, Mode::Train)?;
        let r = tape.constant(vec![rows, channels], weights.clone());
        sq_sum(tape, &tape.mul(&y, &r)?)
    })?;
    Ok(vec![wrt_input, wrt_affine])
}

fn check_triplet_loss(eps: f64) -> Result<Vec<FdReport>> {
    let (n, width) = (5usize, 3usize);
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let x0 = uniform(&mut rng, n * width, -1.0, 1.0);
    // Fixed triplets: mining is a discrete choice, so the gradient is taken
    // at a fixed selection. A generous margin keeps every hinge active and
    // away from its kink.
    let triplets =
        vec![Triplet { anchor: 0, positive: 1, negative: 2 }, Triplet { anchor: 3, positive: 4, negative: 0 }];

    let report = finite_difference_check(
        "triplet_loss/descriptors",
        &[n, width],
        &x0,
        eps,
        move |tape, x| {
            let (loss, _) = triplet_margin_loss(tape, x, &triplets, 4.0)?;
            Ok(loss)
        },
    )?;
    Ok(vec![report])
}

fn check_multi_head_loss(eps: f64) -> Result<Vec<FdReport>> {
    // Rows 0-2 fused, 3-5 point-cloud, 6-8 image descriptors; one active
    // triplet per head; the documented weighting combines the three.
    let x0 = vec![
        0.0, 0.0, 1.0, 0.5, 1.2, 0.2, // fused a/p/n
        0.5, 0.0, -0.5, 0.3, 0.9, -0.4, // pc a/p/n
        0.0, 1.0, 0.3, 0.0, -0.2, 0.8, // rgb a/p/n
    ];
    let cfg = LossConfig { margin: 0.4, alpha: 0.3, beta: 0.2 };
    let triplet = vec![Triplet { anchor: 0, positive: 1, negative: 2 }];

    let report = finite_difference_check(
        "multi_head_loss/descriptors",
        &[9, 2],
        &x0,
        eps,
        move |tape, x| {
            let fused = tape.slice_rows(x, 0, 3)?;
            let pc = tape.slice_rows(x, 3, 6)?;
            let rgb = tape.slice_rows(x, 6, 9)?;
            let (lf, _) = triplet_margin_loss(tape, &fused, &triplet, cfg.margin)?;
            let (lp, _) = triplet_margin_loss(tape, &pc, &triplet, cfg.margin)?;
            let (lr, _) = triplet_margin_loss(tape, &rgb, &triplet, cfg.margin)?;
            let wf = tape.scale(&lf, cfg.fused_weight());
            let wp = tape.scale(&lp, cfg.alpha);
            let wr = tape.scale(&lr, cfg.beta);
            let total = tape.add(&tape.add(&wf, &wp)?, &wr)?;
            Ok(total)
        },
    )?;
    Ok(vec![report])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn the_full_suite_passes_at_the_documented_tolerance() {
        let start = Instant::now();
        let results = run_suite(None, DEFAULT_EPSILON, SUITE_TOLERANCE).unwrap();
        assert_eq!(results.len(), OP_NAMES.len());
        for r in &results {
            assert!(
                r.passed,
                "{}: max rel err {} over {} checks",
                r.name, r.max_rel_err, r.checks
            );
            assert!(r.checks > 0);
        }
        assert!(
            start.elapsed().as_secs() < 30,
            "suite took {:?}, budget is 30 s",
            start.elapsed()
        );
    }

    #[test]
    fn single_op_filter_and_unknown_names() {
        let one = run_suite(Some("gem"), DEFAULT_EPSILON, SUITE_TOLERANCE).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].name, "gem");
        assert!(run_op("warp_drive", DEFAULT_EPSILON, SUITE_TOLERANCE).is_err());
        assert!(run_op("gem", 0.0, SUITE_TOLERANCE).is_err());
    }

    #[test]
    fn a_coarse_step_degrades_the_gem_check() {
        // GeM chains fractional powers, so central differences carry an
        // O(step^2) truncation term; a coarse step must push the error
        // past the tolerance. This is the documented failure path for the
        // step flag.
        let fine = run_op("gem", 1e-6, SUITE_TOLERANCE).unwrap();
        let coarse = run_op("gem", 5e-2, SUITE_TOLERANCE).unwrap();
        assert!(fine.passed);
        assert!(!coarse.passed, "coarse max rel err {}", coarse.max_rel_err);
        assert!(coarse.max_rel_err > fine.max_rel_err);
    }
}
