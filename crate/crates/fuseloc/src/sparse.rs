//! Sparse voxel tensors and the 3D convolutions of the point-cloud branch.
//!
//! A sparse tensor is a coordinate grid plus a `[N, C]` feature matrix on
//! the tape. Coordinates are canonicalized to sorted lexicographic order at
//! construction, which makes every downstream computation independent of
//! input point order and deterministic across runs. Feature math runs
//! through [`Tape::scatter_matmul`] over (input row, output row, kernel
//! offset) pair lists built here from coordinate arithmetic.

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use crate::autodiff::{KernelPair, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Voxel quantization settings: cell edge length in meters.
#[derive(Debug, Clone, Copy)]
pub struct QuantizationConfig {
    pub step: f64,
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        QuantizationConfig { step: 0.01 }
    }
}

/// Immutable coordinate set of a sparse tensor: unique integer 3-vectors,
/// every component a multiple of `stride`, stored sorted lexicographically.
pub struct VoxelGrid {
    coords: Vec<[i32; 3]>,
    lookup: HashMap<[i32; 3], u32>,
    stride: i32,
}

impl VoxelGrid {
    /// Build a grid from arbitrary coordinates; duplicates collapse.
    pub fn new(coords: impl IntoIterator<Item = [i32; 3]>, stride: i32) -> Result<Self> {
        if stride < 1 {
            return Err(Error::validation(format!("voxel grid: stride {stride} must be >= 1")));
        }
        let set: BTreeSet<[i32; 3]> = coords.into_iter().collect();
        for c in &set {
            if c.iter().any(|v| v.rem_euclid(stride) != 0) {
                return Err(Error::validation(format!(
                    "voxel grid: coordinate {c:?} is not a multiple of stride {stride}"
                )));
            }
        }
        let coords: Vec<[i32; 3]> = set.into_iter().collect();
        let lookup = coords.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        Ok(VoxelGrid { coords, lookup, stride })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    /// Coordinates in canonical (sorted) row order.
    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }

    pub fn row_of(&self, c: [i32; 3]) -> Option<usize> {
        self.lookup.get(&c).map(|&i| i as usize)
    }

    /// Inclusive bounding box, `None` when empty.
    pub fn bounding_box(&self) -> Option<([i32; 3], [i32; 3])> {
        let first = *self.coords.first()?;
        let mut lo = first;
        let mut hi = first;
        for c in &self.coords {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        Some((lo, hi))
    }
}

/// Sparse voxel tensor: shared coordinate grid + `[N, C]` features on the
/// tape. `feats.shape()[0] == grid.len()` always holds.
pub struct SparseTensor<F: Scalar> {
    pub grid: Rc<VoxelGrid>,
    pub feats: Tensor<F>,
}

impl<F: Scalar> Clone for SparseTensor<F> {
    fn clone(&self) -> Self {
        SparseTensor { grid: Rc::clone(&self.grid), feats: self.feats.clone() }
    }
}

impl<F: Scalar> SparseTensor<F> {
    pub fn new(grid: Rc<VoxelGrid>, feats: Tensor<F>) -> Result<Self> {
        match feats.shape() {
            [n, _] if *n == grid.len() => Ok(SparseTensor { grid, feats }),
            other => Err(Error::validation(format!(
                "sparse tensor: feature shape {other:?} does not match {} coordinates",
                grid.len()
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.feats.shape()[1]
    }
}

/// Quantize points into voxel coordinates: `floor(p / step)` per axis with
/// an epsilon snap so values that are exact cell boundaries up to f64
/// rounding (e.g. 0.99 / 0.01) land in the boundary cell.
pub fn quantize_coord(p: f64, step: f64) -> i32 {
    let q = p / step;
    let r = q.round();
    if (q - r).abs() < 1e-9 {
        r as i32
    } else {
        q.floor() as i32
    }
}

/// Quantize a point cloud to an occupancy grid (duplicates collapse).
pub fn quantize(points: &[[f64; 3]], cfg: QuantizationConfig) -> Result<VoxelGrid> {
    if points.is_empty() {
        return Err(Error::validation("empty point cloud"));
    }
    if cfg.step <= 0.0 {
        return Err(Error::validation(format!("quantization step {} must be > 0", cfg.step)));
    }
    for p in points {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("point cloud contains a non-finite coordinate"));
        }
    }
    let coords = points.iter().map(|p| {
        [
            quantize_coord(p[0], cfg.step),
            quantize_coord(p[1], cfg.step),
            quantize_coord(p[2], cfg.step),
        ]
    });
    VoxelGrid::new(coords, 1)
}

/// Quantize and attach the constant occupancy feature 1.0 per voxel.
pub fn quantize_to_sparse<F: Scalar>(
    tape: &Tape<F>,
    points: &[[f64; 3]],
    cfg: QuantizationConfig,
) -> Result<SparseTensor<F>> {
    let grid = Rc::new(quantize(points, cfg)?);
    let n = grid.len();
    let feats = tape.constant(vec![n, 1], vec![F::one(); n]);
    SparseTensor::new(grid, feats)
}

/// Kernel offset enumeration: odd K covers the centered cube
/// `{-K/2..K/2}^3`, K=2 covers `{0,1}^3`. Index order is x-major.
pub fn kernel_offsets(k: usize) -> Vec<[i32; 3]> {
    assert!((1..=5).contains(&k), "kernel size {k} unsupported (1..=5)");
    let range: Vec<i32> = if k % 2 == 1 {
        let h = (k / 2) as i32;
        (-h..=h).collect()
    } else {
        (0..k as i32).collect()
    };
    let mut offs = Vec::with_capacity(k * k * k);
    for &dx in &range {
        for &dy in &range {
            for &dz in &range {
                offs.push([dx, dy, dz]);
            }
        }
    }
    offs
}

fn add_scaled(c: [i32; 3], off: [i32; 3], scale: i32) -> [i32; 3] {
    [c[0] + off[0] * scale, c[1] + off[1] * scale, c[2] + off[2] * scale]
}

/// Enumerate (input row, output row, offset index) assignments:
/// `input coordinate = output coordinate + offset * step`.
fn build_pairs(
    out_grid: &VoxelGrid,
    in_grid: &VoxelGrid,
    offsets: &[[i32; 3]],
    step: i32,
) -> Vec<KernelPair> {
    let mut pairs = Vec::new();
    for (o, &t) in out_grid.coords().iter().enumerate() {
        for (j, &off) in offsets.iter().enumerate() {
            if let Some(i) = in_grid.row_of(add_scaled(t, off, step)) {
                pairs.push(KernelPair { in_row: i as u32, out_row: o as u32, offset: j as u32 });
            }
        }
    }
    pairs
}

/// Sparse 3D convolution.
///
/// `out(t) = sum_j W[j] * in(t + offset_j * in_stride)`, missing inputs
/// contributing zero. Stride 1 keeps the coordinate set; stride 2 projects
/// coordinates onto the twice-coarser lattice (`m * floor(c / m)` with
/// `m = 2 * in_stride`, floor division) and deduplicates.
pub fn sparse_conv<F: Scalar>(
    tape: &Tape<F>,
    x: &SparseTensor<F>,
    kernel: &Tensor<F>,
    k: usize,
    stride: usize,
) -> Result<SparseTensor<F>> {
    if x.grid.is_empty() {
        return Err(Error::validation("sparse_conv: empty input"));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::validation(format!("sparse_conv: unsupported stride {stride}")));
    }
    let offsets = kernel_offsets(k);
    check_kernel_shape("sparse_conv", kernel, offsets.len(), x.channels())?;

    let in_stride = x.grid.stride();
    let (out_grid, out_stride) = if stride == 1 {
        (Rc::clone(&x.grid), in_stride)
    } else {
        let m = 2 * in_stride;
        let projected = x.grid.coords().iter().map(|c| {
            [
                c[0].div_euclid(m) * m,
                c[1].div_euclid(m) * m,
                c[2].div_euclid(m) * m,
            ]
        });
        (Rc::new(VoxelGrid::new(projected, m)?), m)
    };
    debug_assert_eq!(out_grid.stride(), out_stride);

    let pairs = Rc::new(build_pairs(&out_grid, &x.grid, &offsets, in_stride));
    let feats = tape.scatter_matmul(&x.feats, kernel, pairs, out_grid.len())?;
    SparseTensor::new(out_grid, feats)
}

/// Transposed sparse 3D convolution onto an explicit target grid (the
/// coordinate set recorded from the matching bottom-up layer).
///
/// `out(t) = sum_j W[j] * in(t - offset_j * out_stride)` where
/// `out_stride = in_stride / s`; targets with no occupied source get zero
/// features.
pub fn sparse_transposed_conv<F: Scalar>(
    tape: &Tape<F>,
    x: &SparseTensor<F>,
    kernel: &Tensor<F>,
    k: usize,
    stride: usize,
    targets: &Rc<VoxelGrid>,
) -> Result<SparseTensor<F>> {
    if stride == 0 || x.grid.stride() % stride as i32 != 0 {
        return Err(Error::validation(format!(
            "sparse_transposed_conv: input stride {} not divisible by {stride}",
            x.grid.stride()
        )));
    }
    let out_stride = x.grid.stride() / stride as i32;
    if targets.stride() != out_stride {
        return Err(Error::validation(format!(
            "sparse_transposed_conv: target stride {} but expected {out_stride}",
            targets.stride()
        )));
    }
    let offsets = kernel_offsets(k);
    check_kernel_shape("sparse_transposed_conv", kernel, offsets.len(), x.channels())?;

    let mut pairs = Vec::new();
    for (o, &t) in targets.coords().iter().enumerate() {
        for (j, &off) in offsets.iter().enumerate() {
            if let Some(i) = x.grid.row_of(add_scaled(t, off, -out_stride)) {
                pairs.push(KernelPair { in_row: i as u32, out_row: o as u32, offset: j as u32 });
            }
        }
    }
    let feats = tape.scatter_matmul(&x.feats, kernel, Rc::new(pairs), targets.len())?;
    SparseTensor::new(Rc::clone(targets), feats)
}

fn check_kernel_shape<F: Scalar>(
    op: &str,
    kernel: &Tensor<F>,
    k3: usize,
    cin: usize,
) -> Result<()> {
    match kernel.shape() {
        [nk, ci, _] if *nk == k3 && *ci == cin => Ok(()),
        other => Err(Error::validation(format!(
            "{op}: kernel shape {other:?}, expected [{k3}, {cin}, Cout]"
        ))),
    }
}

/// Elementwise addition of two sparse tensors over the union of their
/// coordinate sets; where only one side is occupied its features copy over.
pub fn coordinate_aligned_add<F: Scalar>(
    tape: &Tape<F>,
    a: &SparseTensor<F>,
    b: &SparseTensor<F>,
) -> Result<SparseTensor<F>> {
    if a.grid.stride() != b.grid.stride() {
        return Err(Error::validation(format!(
            "coordinate_aligned_add: stride mismatch {} vs {}",
            a.grid.stride(),
            b.grid.stride()
        )));
    }
    if a.channels() != b.channels() {
        return Err(Error::validation(format!(
            "coordinate_aligned_add: channel mismatch {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    if a.grid.coords() == b.grid.coords() {
        // Shared coordinate set: plain elementwise add, no remapping.
        let feats = tape.add(&a.feats, &b.feats)?;
        return SparseTensor::new(Rc::clone(&a.grid), feats);
    }
    let union = Rc::new(VoxelGrid::new(
        a.grid.coords().iter().chain(b.grid.coords()).copied(),
        a.grid.stride(),
    )?);
    let map = |g: &VoxelGrid| -> Vec<usize> {
        g.coords().iter().map(|&c| union.row_of(c).expect("union contains member")).collect()
    };
    let sa = tape.scatter_rows(&a.feats, &map(&a.grid), union.len())?;
    let sb = tape.scatter_rows(&b.feats, &map(&b.grid), union.len())?;
    let feats = tape.add(&sa, &sb)?;
    SparseTensor::new(union, feats)
}

/// Write features into a zero-filled dense grid `[C, X, Y, Z]` spanning the
/// inclusive extent (absolute voxel units, multiples of the stride).
/// Index along each axis is `(coord - lo) / stride`.
pub fn densify<F: Scalar>(
    x: &SparseTensor<F>,
    lo: [i32; 3],
    hi: [i32; 3],
) -> Result<(Vec<F>, [usize; 3])> {
    let s = x.grid.stride();
    for a in 0..3 {
        if lo[a] > hi[a] || lo[a].rem_euclid(s) != 0 || (hi[a] - lo[a]) % s != 0 {
            return Err(Error::validation(format!(
                "densify: extent [{:?}, {:?}] not aligned to stride {s}",
                lo, hi
            )));
        }
    }
    let dims = [
        ((hi[0] - lo[0]) / s + 1) as usize,
        ((hi[1] - lo[1]) / s + 1) as usize,
        ((hi[2] - lo[2]) / s + 1) as usize,
    ];
    let c = x.channels();
    let mut dense = vec![F::zero(); c * dims[0] * dims[1] * dims[2]];
    for (row, coord) in x.grid.coords().iter().enumerate() {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if coord[a] < lo[a] || coord[a] > hi[a] {
                return Err(Error::validation(format!(
                    "densify: coordinate {coord:?} outside extent [{lo:?}, {hi:?}]"
                )));
            }
            idx[a] = ((coord[a] - lo[a]) / s) as usize;
        }
        for ch in 0..c {
            dense[((ch * dims[0] + idx[0]) * dims[1] + idx[1]) * dims[2] + idx[2]] =
                x.feats.values()[row * c + ch];
        }
    }
    Ok((dense, dims))
}

/// Rebuild a sparse tensor from a dense grid, keeping positions whose
/// feature row is not all zero. Inverse of [`densify`] up to zero rows.
pub fn sparsify<F: Scalar>(
    tape: &Tape<F>,
    dense: &[F],
    dims: [usize; 3],
    channels: usize,
    lo: [i32; 3],
    stride: i32,
) -> Result<SparseTensor<F>> {
    if dense.len() != channels * dims[0] * dims[1] * dims[2] {
        return Err(Error::validation("sparsify: value count does not match dims"));
    }
    let mut coords = Vec::new();
    let mut rows: Vec<F> = Vec::new();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let at = |ch: usize| dense[((ch * dims[0] + x) * dims[1] + y) * dims[2] + z];
                if (0..channels).any(|ch| at(ch) != F::zero()) {
                    coords.push([
                        lo[0] + x as i32 * stride,
                        lo[1] + y as i32 * stride,
                        lo[2] + z as i32 * stride,
                    ]);
                    for ch in 0..channels {
                        rows.push(at(ch));
                    }
                }
            }
        }
    }
    let grid = Rc::new(VoxelGrid::new(coords, stride)?);
    // Dense scan order (x, y, z ascending) is already lexicographic, so the
    // rows line up with the grid's canonical order.
    let n = grid.len();
    let feats = tape.constant(vec![n, channels], rows);
    SparseTensor::new(grid, feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones_sparse(tape: &Tape<f64>, coords: &[[i32; 3]], c: usize) -> SparseTensor<f64> {
        let grid = Rc::new(VoxelGrid::new(coords.iter().copied(), 1).unwrap());
        let n = grid.len();
        let feats = tape.constant(vec![n, c], vec![1.0; n * c]);
        SparseTensor::new(grid, feats).unwrap()
    }

    #[test]
    fn quantize_collapses_shared_cell() {
        let grid = quantize(
            &[[0.005, 0.001, 0.002], [0.006, 0.002, 0.001]],
            QuantizationConfig::default(),
        )
        .unwrap();
        assert_eq!(grid.coords(), &[[0, 0, 0]]);
    }

    #[test]
    fn quantize_extent_spans_at_most_200_cells() {
        let grid = quantize(
            &[[-1.0, -1.0, -1.0], [0.99, 0.99, 0.99]],
            QuantizationConfig::default(),
        )
        .unwrap();
        assert_eq!(grid.coords(), &[[-100, -100, -100], [99, 99, 99]]);
        let (lo, hi) = grid.bounding_box().unwrap();
        for a in 0..3 {
            assert!(hi[a] - lo[a] + 1 <= 200);
        }
    }

    #[test]
    fn quantize_rejects_empty_and_bounds_voxel_count() {
        assert!(quantize(&[], QuantizationConfig::default()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pts: Vec<[f64; 3]> = (0..4096)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let grid = quantize(&pts, QuantizationConfig::default()).unwrap();
        assert!(grid.len() > 0 && grid.len() <= 4096);
    }

    #[test]
    fn identity_1x1_conv_preserves_features() {
        let tape: Tape<f64> = Tape::new();
        let x = ones_sparse(&tape, &[[2, 3, 4]], 2);
        let kernel = tape.constant(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = sparse_conv(&tape, &x, &kernel, 1, 1).unwrap();
        assert_eq!(y.grid.coords(), x.grid.coords());
        assert_eq!(y.feats.values(), x.feats.values());
    }

    #[test]
    fn center_tap_doubles_single_voxel() {
        let tape: Tape<f64> = Tape::new();
        let x = ones_sparse(&tape, &[[0, 0, 0]], 1);
        // K=3: 27 offsets, center at index 13; only the center tap is 2.
        let mut w = vec![0.0; 27];
        w[13] = 2.0;
        let kernel = tape.constant(vec![27, 1, 1], w);
        let offsets = kernel_offsets(3);
        assert_eq!(offsets[13], [0, 0, 0]);
        let y = sparse_conv(&tape, &x, &kernel, 3, 1).unwrap();
        assert_eq!(y.grid.coords(), x.grid.coords());
        assert_eq!(y.feats.values(), &[2.0]);
    }

    /// Brute-force reference: evaluates the conv definition directly from a
    /// coordinate-to-feature map.
    fn conv_oracle(
        in_coords: &[[i32; 3]],
        in_feats: &[f64],
        cin: usize,
        kernel: &[f64],
        cout: usize,
        k: usize,
        in_stride: i32,
        out_coords: &[[i32; 3]],
    ) -> Vec<f64> {
        let map: HashMap<[i32; 3], usize> =
            in_coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let offsets = kernel_offsets(k);
        let mut out = vec![0.0; out_coords.len() * cout];
        for (o, &t) in out_coords.iter().enumerate() {
            for (j, &off) in offsets.iter().enumerate() {
                if let Some(&i) = map.get(&add_scaled(t, off, in_stride)) {
                    for ci in 0..cin {
                        for co in 0..cout {
                            out[o * cout + co] +=
                                in_feats[i * cin + ci] * kernel[(j * cin + ci) * cout + co];
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_densified_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let k = [2, 3][trial % 2];
            let stride = [1, 2][(trial / 2) % 2];
            let (cin, cout) = (2, 3);
            let n = rng.gen_range(1..30);
            let coords: Vec<[i32; 3]> = (0..n)
                .map(|_| [rng.gen_range(0..6), rng.gen_range(0..6), rng.gen_range(0..6)])
                .collect();
            let tape: Tape<f64> = Tape::new();
            let grid = Rc::new(VoxelGrid::new(coords.iter().copied(), 1).unwrap());
            let nv = grid.len();
            let feats: Vec<f64> = (0..nv * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = SparseTensor::new(
                Rc::clone(&grid),
                tape.constant(vec![nv, cin], feats.clone()),
            )
            .unwrap();
            let kw: Vec<f64> =
                (0..k * k * k * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kernel = tape.constant(vec![k * k * k, cin, cout], kw.clone());
            let y = sparse_conv(&tape, &x, &kernel, k, stride).unwrap();
            let expect =
                conv_oracle(grid.coords(), &feats, cin, &kw, cout, k, 1, y.grid.coords());
            for (a, b) in y.feats.values().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn stride2_projects_coords_and_never_grows() {
        let tape: Tape<f64> = Tape::new();
        let x = ones_sparse(&tape, &[[-3, 0, 1], [-2, 0, 1], [4, 5, 5]], 1);
        let kernel = tape.constant(vec![8, 1, 1], vec![1.0; 8]);
        let y = sparse_conv(&tape, &x, &kernel, 2, 2).unwrap();
        // floor division toward -inf: -3 -> -4, -2 -> -2, 4 -> 4
        assert_eq!(y.grid.coords(), &[[-4, 0, 0], [-2, 0, 0], [4, 4, 4]]);
        assert_eq!(y.grid.stride(), 2);
        assert!(y.grid.len() <= x.grid.len());
    }

    #[test]
    fn transposed_conv_broadcasts_to_children() {
        let tape: Tape<f64> = Tape::new();
        let grid = Rc::new(VoxelGrid::new([[0, 0, 0]], 2).unwrap());
        let x = SparseTensor::new(grid, tape.constant(vec![1, 1], vec![7.0])).unwrap();
        let kernel = tape.constant(vec![8, 1, 1], vec![1.0; 8]);
        let children: Vec<[i32; 3]> = kernel_offsets(2);
        let targets = Rc::new(VoxelGrid::new(children.iter().copied(), 1).unwrap());
        let y = sparse_transposed_conv(&tape, &x, &kernel, 2, 2, &targets).unwrap();
        assert_eq!(y.grid.stride(), 1);
        assert_eq!(y.feats.values(), &[7.0; 8]);
    }

    #[test]
    fn transposed_conv_without_support_is_zero() {
        let tape: Tape<f64> = Tape::new();
        let grid = Rc::new(VoxelGrid::new([[0, 0, 0]], 2).unwrap());
        let x = SparseTensor::new(grid, tape.constant(vec![1, 1], vec![7.0])).unwrap();
        let kernel = tape.constant(vec![8, 1, 1], vec![1.0; 8]);
        let targets = Rc::new(VoxelGrid::new([[9, 9, 9]], 1).unwrap());
        let y = sparse_transposed_conv(&tape, &x, &kernel, 2, 2, &targets).unwrap();
        assert_eq!(y.feats.values(), &[0.0]);
    }

    #[test]
    fn transposed_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let (cin, cout, k, s) = (2, 2, 2, 2);
            let n = rng.gen_range(1..12);
            let coords: Vec<[i32; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(0..4) * 2,
                        rng.gen_range(0..4) * 2,
                        rng.gen_range(0..4) * 2,
                    ]
                })
                .collect();
            let tape: Tape<f64> = Tape::new();
            let grid = Rc::new(VoxelGrid::new(coords, 2).unwrap());
            let nv = grid.len();
            let feats: Vec<f64> = (0..nv * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = SparseTensor::new(Rc::clone(&grid), tape.constant(vec![nv, cin], feats.clone()))
                .unwrap();
            let kw: Vec<f64> =
                (0..k * k * k * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kernel = tape.constant(vec![k * k * k, cin, cout], kw.clone());
            let tn = rng.gen_range(1..20);
            let targets = Rc::new(
                VoxelGrid::new(
                    (0..tn).map(|_| {
                        [rng.gen_range(0..8), rng.gen_range(0..8), rng.gen_range(0..8)]
                    }),
                    1,
                )
                .unwrap(),
            );
            let y = sparse_transposed_conv(&tape, &x, &kernel, k, s, &targets).unwrap();
            // Oracle with negated offsets: in = t - off.
            let map: HashMap<[i32; 3], usize> =
                grid.coords().iter().enumerate().map(|(i, &c)| (c, i)).collect();
            let offsets = kernel_offsets(k);
            let mut expect = vec![0.0; targets.len() * cout];
            for (o, &t) in targets.coords().iter().enumerate() {
                for (j, &off) in offsets.iter().enumerate() {
                    if let Some(&i) = map.get(&add_scaled(t, off, -1)) {
                        for ci in 0..cin {
                            for co in 0..cout {
                                expect[o * cout + co] +=
                                    feats[i * cin + ci] * kw[(j * cin + ci) * cout + co];
                            }
                        }
                    }
                }
            }
            for (a, b) in y.feats.values().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_add_identity_disjoint_and_overlap() {
        let tape: Tape<f64> = Tape::new();
        // Identity: adding zeros on the same coords.
        let a = ones_sparse(&tape, &[[0, 0, 0], [1, 0, 0]], 1);
        let zeros = SparseTensor::new(
            Rc::clone(&a.grid),
            tape.constant(vec![2, 1], vec![0.0, 0.0]),
        )
        .unwrap();
        let same = coordinate_aligned_add(&tape, &a, &zeros).unwrap();
        assert_eq!(same.feats.values(), a.feats.values());

        // Disjoint coords concatenate.
        let b = ones_sparse(&tape, &[[5, 5, 5]], 1);
        let dis = coordinate_aligned_add(&tape, &a, &b).unwrap();
        assert_eq!(dis.grid.len(), 3);
        assert_eq!(dis.feats.values(), &[1.0, 1.0, 1.0]);

        // Overlap adds.
        let c = ones_sparse(&tape, &[[1, 0, 0], [2, 0, 0]], 1);
        let ov = coordinate_aligned_add(&tape, &a, &c).unwrap();
        assert_eq!(ov.grid.coords(), &[[0, 0, 0], [1, 0, 0], [2, 0, 0]]);
        assert_eq!(ov.feats.values(), &[1.0, 2.0, 1.0]);
    }

    #[test]
    fn aligned_add_rejects_mismatches() {
        let tape: Tape<f64> = Tape::new();
        let a = ones_sparse(&tape, &[[0, 0, 0]], 1);
        let b = ones_sparse(&tape, &[[0, 0, 0]], 2);
        assert!(coordinate_aligned_add(&tape, &a, &b).is_err());
        let g2 = Rc::new(VoxelGrid::new([[0, 0, 0]], 2).unwrap());
        let c = SparseTensor::new(g2, tape.constant(vec![1, 1], vec![1.0])).unwrap();
        assert!(coordinate_aligned_add(&tape, &a, &c).is_err());
    }

    #[test]
    fn densify_and_round_trip() {
        let tape: Tape<f64> = Tape::new();
        let grid = Rc::new(VoxelGrid::new([[0, 0, 0]], 1).unwrap());
        let x = SparseTensor::new(grid, tape.constant(vec![1, 1], vec![7.0])).unwrap();
        let (dense, dims) = densify(&x, [0, 0, 0], [1, 1, 1]).unwrap();
        assert_eq!(dims, [2, 2, 2]);
        assert_eq!(dense.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(dense[0], 7.0);

        // Round trip a fully-occupied grid.
        let full: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        let sp = sparsify(&tape, &full, [2, 2, 2], 1, [0, 0, 0], 1).unwrap();
        assert_eq!(sp.grid.len(), 8);
        let (back, _) = densify(&sp, [0, 0, 0], [1, 1, 1]).unwrap();
        assert_eq!(back, full);

        // Out-of-extent coordinate errors.
        assert!(densify(&x, [1, 1, 1], [2, 2, 2]).is_err());
    }

    #[test]
    fn voxel_count_equals_nonzero_dense_rows() {
        let tape: Tape<f64> = Tape::new();
        let x = ones_sparse(&tape, &[[0, 0, 0], [2, 1, 0], [1, 1, 1]], 1);
        let (dense, _) = densify(&x, [0, 0, 0], [2, 2, 2]).unwrap();
        assert_eq!(dense.iter().filter(|v| **v != 0.0).count(), x.grid.len());
    }

    #[test]
    fn features_invariant_to_point_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)])
            .collect();
        let kw: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |points: &[[f64; 3]]| -> Vec<f64> {
            let tape: Tape<f64> = Tape::new();
            let x = quantize_to_sparse(&tape, points, QuantizationConfig::default()).unwrap();
            let kernel = tape.constant(vec![27, 1, 1], kw.clone());
            let y = sparse_conv(&tape, &x, &kernel, 3, 1).unwrap();
            y.feats.values().to_vec()
        };

        let base = run(&pts);
        let mut shuffled = pts.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        assert_eq!(run(&shuffled), base, "bitwise equality under permutation");
    }

    #[test]
    fn sparse_ops_pass_finite_difference_checks() {
        use crate::autodiff::gradcheck::finite_difference_check;
        let coords = [[0, 0, 0], [1, 0, 0], [0, 2, 1], [3, 3, 3]];
        let grid = Rc::new(VoxelGrid::new(coords, 1).unwrap());
        let (cin, cout, k) = (2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats: Vec<f64> = (0..grid.len() * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kw: Vec<f64> = (0..8 * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // d(loss)/d(kernel)
        let grid_k = Rc::clone(&grid);
        let feats_k = feats.clone();
        let report = finite_difference_check(
            "sparse_conv kernel",
            &[8 * cin * cout],
            &kw,
            1e-6,
            move |tape, w| {
                let w3 = tape.reshape(w, vec![8, cin, cout])?;
                let x = SparseTensor::new(
                    Rc::clone(&grid_k),
                    tape.constant(vec![grid_k.len(), cin], feats_k.clone()),
                )?;
                let y = sparse_conv(tape, &x, &w3, k, 2)?;
                let sq = tape.mul(&y.feats, &y.feats)?;
                Ok(tape.sum(&sq))
            },
        )
        .unwrap();
        assert!(report.passes(1e-5), "kernel grad rel err {}", report.max_rel_err());

        // d(loss)/d(features)
        let kw2 = kw.clone();
        let grid_f = Rc::clone(&grid);
        let report = finite_difference_check(
            "sparse_conv features",
            &[grid.len(), cin],
            &feats,
            1e-6,
            move |tape, f| {
                let x = SparseTensor::new(Rc::clone(&grid_f), f.clone())?;
                let w = tape.constant(vec![8, cin, cout], kw2.clone());
                let y = sparse_conv(tape, &x, &w, k, 2)?;
                let sq = tape.mul(&y.feats, &y.feats)?;
                Ok(tape.sum(&sq))
            },
        )
        .unwrap();
        assert!(report.passes(1e-5), "feature grad rel err {}", report.max_rel_err());
        let _ = ParamSet::<f64>::new();
    }
}
