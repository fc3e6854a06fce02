//! Geographic similarity labels between batch elements.
//!
//! Two readings are structurally similar (a positive pair) when captured at
//! most 10 m apart, dissimilar (a negative pair) when at least 50 m apart,
//! and neither in between; the gap keeps ambiguous pairs out of the loss.

/// Distance at or under which a pair is a positive.
pub const POSITIVE_RADIUS_M: f64 = 10.0;
/// Distance at or over which a pair is a negative.
pub const NEGATIVE_RADIUS_M: f64 = 50.0;

/// Dense n x n positive/negative masks; the diagonal belongs to neither.
pub struct SimilarityMasks {
    n: usize,
    positive: Vec<bool>,
    negative: Vec<bool>,
}

impl SimilarityMasks {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn positive(&self, i: usize, j: usize) -> bool {
        self.positive[i * self.n + j]
    }

    pub fn negative(&self, i: usize, j: usize) -> bool {
        self.negative[i * self.n + j]
    }

    /// True if any off-diagonal positive pair exists.
    pub fn has_positive_pair(&self) -> bool {
        self.positive.iter().any(|&p| p)
    }

    /// Whether any two of the chosen elements are positives of each other.
    pub fn has_positive_pair_among(&self, indices: &[usize]) -> bool {
        indices.iter().enumerate().any(|(k, &i)| {
            indices[k + 1..].iter().any(|&j| self.positive(i, j))
        })
    }
}

/// Build similarity masks from planar positions in meters.
///
/// `positive` iff the planar Euclidean distance is <= `pos_radius` (i != j);
/// `negative` iff it is >= `neg_radius`. Both boundaries are inclusive.
pub fn similarity_masks(
    positions: &[[f64; 2]],
    pos_radius: f64,
    neg_radius: f64,
) -> SimilarityMasks {
    let n = positions.len();
    let mut positive = vec![false; n * n];
    let mut negative = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            let d = (dx * dx + dy * dy).sqrt();
            positive[i * n + j] = d <= pos_radius;
            negative[i * n + j] = d >= neg_radius;
        }
    }
    SimilarityMasks { n, positive, negative }
}

/// Masks with the standard 10 m / 50 m thresholds.
pub fn default_similarity_masks(positions: &[[f64; 2]]) -> SimilarityMasks {
    similarity_masks(positions, POSITIVE_RADIUS_M, NEGATIVE_RADIUS_M)
}

/// Connected components of the positive relation, each sorted ascending,
/// listed in order of their smallest member. Batch sampling draws from
/// these clusters to guarantee positive pairs.
pub fn positive_clusters(masks: &SimilarityMasks) -> Vec<Vec<usize>> {
    let n = masks.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if masks.positive(i, j) {
                let (ri, rj) = (root(&mut parent, i), root(&mut parent, j));
                if ri != rj {
                    let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = root(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[r]].push(i);
    }
    clusters
}
