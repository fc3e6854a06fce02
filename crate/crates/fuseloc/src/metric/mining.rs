//! Batch-hard triplet mining.
//!
//! For every anchor that has at least one positive and one negative in the
//! batch, pick its farthest positive and nearest negative by descriptor
//! distance. Selection is done on plain values; gradients flow later through
//! the distances of the selected triplets only.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metric::similarity::SimilarityMasks;
use crate::scalar::Scalar;

/// Indices of one mined (anchor, positive, negative) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Pairwise Euclidean distances between the rows of `[N, W]`, returned as a
/// row-major n x n matrix in f64 (selection happens off-tape).
pub fn pairwise_distances<F: Scalar>(rows: &Tensor<F>) -> Result<Vec<f64>> {
    let (n, w) = match rows.shape() {
        [n, w] => (*n, *w),
        other => {
            return Err(Error::validation(format!(
                "pairwise_distances: expected [N, W] descriptors, got {other:?}"
            )))
        }
    };
    let vals = rows.values();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut sq = 0.0;
            for c in 0..w {
                let d = vals[i * w + c].as_f64() - vals[j * w + c].as_f64();
                sq += d * d;
            }
            let d = sq.sqrt();
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    Ok(out)
}

/// Batch-hard mining over a row-major n x n distance matrix.
///
/// One triplet per anchor that has both a positive and a negative in the
/// masks: the positive at maximum distance and the negative at minimum
/// distance. Ties break to the lowest index; anchors lacking either side are
/// skipped.
pub fn batch_hard_mine(dist: &[f64], masks: &SimilarityMasks) -> Vec<Triplet> {
    let n = masks.len();
    debug_assert_eq!(dist.len(), n * n, "distance matrix / mask size mismatch");
    let mut out = Vec::new();
    for a in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            let d = dist[a * n + j];
            if masks.positive(a, j) && hardest_pos.map_or(true, |(_, best)| d > best) {
                hardest_pos = Some((j, d));
            }
            if masks.negative(a, j) && hardest_neg.map_or(true, |(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((ng, _))) = (hardest_pos, hardest_neg) {
            out.push(Triplet { anchor: a, positive: p, negative: ng });
        }
    }
    out
}
