//! Point-cloud branch: a sparse-voxel feature pyramid.
//!
//! Bottom-up: Conv0 (K=5, s=1) then three stages of a K=2 s=2 downsampling
//! convolution followed by a residual block (two K=3 convs and channel
//! attention inside the bracket, then the skip addition). Top-down: 1x1
//! lateral convolutions from the last two bottom-up outputs to the
//! descriptor width, a K=2 s=2 transposed convolution upsampling the
//! deepest map onto the stride-4 coordinate set, and an elementwise add.
//! Every convolution inside Conv0..Conv3 is followed by batch norm and
//! ReLU; the lateral and transposed convolutions are linear with bias.
//!
//! Batch normalization runs over the concatenated voxel rows of the whole
//! batch; attention pools over each element's own voxels.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor};
use crate::branches::eca::Eca;
use crate::branches::bind;
use crate::error::{Error, Result};
use crate::nn::init::kaiming_uniform;
use crate::nn::{BatchNorm, Mode};
use crate::scalar::Scalar;
use crate::sparse::{
    coordinate_aligned_add, sparse_conv, sparse_transposed_conv, SparseTensor, VoxelGrid,
};

struct SparseConvLayer {
    w: ParamId,
    k: usize,
    stride: usize,
}

impl SparseConvLayer {
    fn new<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let taps = k * k * k;
        let w = params.add(
            &format!("{name}.w"),
            vec![taps, cin, cout],
            kaiming_uniform(rng, cin * taps, taps * cin * cout),
        );
        SparseConvLayer { w, k, stride }
    }

    fn forward<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &ParamSet<F>,
        x: &SparseTensor<F>,
        mode: Mode,
    ) -> Result<SparseTensor<F>> {
        let w = bind(tape, params, self.w, mode);
        sparse_conv(tape, x, &w, self.k, self.stride)
    }
}

/// Batch norm + ReLU over the concatenated voxel rows of all elements,
/// split back onto each element's grid afterwards.
fn bn_relu_batch<F: Scalar>(
    tape: &Tape<F>,
    params: &mut ParamSet<F>,
    bn: &BatchNorm,
    xs: &[SparseTensor<F>],
    mode: Mode,
) -> Result<Vec<SparseTensor<F>>> {
    let feats: Vec<&Tensor<F>> = xs.iter().map(|x| &x.feats).collect();
    let rows = tape.concat0(&feats)?;
    let normed = bn.forward_rows(tape, params, &rows, mode)?;
    let act = tape.relu(&normed);
    let mut out = Vec::with_capacity(xs.len());
    let mut r0 = 0;
    for x in xs {
        let n = x.grid.len();
        let f = tape.slice_rows(&act, r0, r0 + n)?;
        out.push(SparseTensor::new(Rc::clone(&x.grid), f)?);
        r0 += n;
    }
    Ok(out)
}

struct ResidualBlock {
    conv_a: SparseConvLayer,
    bn_a: BatchNorm,
    conv_b: SparseConvLayer,
    bn_b: BatchNorm,
    eca: Eca,
}

impl ResidualBlock {
    fn new<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        let conv_a = SparseConvLayer::new(params, rng, &format!("{name}.a"), channels, channels, 3, 1);
        let bn_a = BatchNorm::new(params, &format!("{name}.a.bn"), channels);
        let conv_b = SparseConvLayer::new(params, rng, &format!("{name}.b"), channels, channels, 3, 1);
        let bn_b = BatchNorm::new(params, &format!("{name}.b.bn"), channels);
        let eca = Eca::new(params, &format!("{name}.eca"), channels);
        ResidualBlock { conv_a, bn_a, conv_b, bn_b, eca }
    }

    fn forward_batch<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &mut ParamSet<F>,
        xs: &[SparseTensor<F>],
        mode: Mode,
    ) -> Result<Vec<SparseTensor<F>>> {
        let a: Vec<SparseTensor<F>> = xs
            .iter()
            .map(|x| self.conv_a.forward(tape, params, x, mode))
            .collect::<Result<_>>()?;
        let a = bn_relu_batch(tape, params, &self.bn_a, &a, mode)?;
        let b: Vec<SparseTensor<F>> = a
            .iter()
            .map(|x| self.conv_b.forward(tape, params, x, mode))
            .collect::<Result<_>>()?;
        let b = bn_relu_batch(tape, params, &self.bn_b, &b, mode)?;
        let mut out = Vec::with_capacity(xs.len());
        for (x, bx) in xs.iter().zip(&b) {
            let gated = self.eca.forward(tape, params, &bx.feats, mode)?;
            let gated = SparseTensor::new(Rc::clone(&bx.grid), gated)?;
            out.push(coordinate_aligned_add(tape, x, &gated)?);
        }
        Ok(out)
    }
}

/// The sparse feature-pyramid branch; output maps have `k` channels at
/// tensor stride 4.
pub struct PcBranch {
    conv0: SparseConvLayer,
    bn0: BatchNorm,
    downs: Vec<SparseConvLayer>,
    down_bns: Vec<BatchNorm>,
    blocks: Vec<ResidualBlock>,
    lat2_w: ParamId,
    lat2_b: ParamId,
    lat3_w: ParamId,
    lat3_b: ParamId,
    tconv_w: ParamId,
    tconv_b: ParamId,
    pub k_out: usize,
}

impl PcBranch {
    pub fn new<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        rng: &mut R,
        channels: [usize; 4],
        k_out: usize,
    ) -> Self {
        let conv0 = SparseConvLayer::new(params, rng, "pc.conv0", 1, channels[0], 5, 1);
        let bn0 = BatchNorm::new(params, "pc.conv0.bn", channels[0]);
        let mut downs = Vec::new();
        let mut down_bns = Vec::new();
        let mut blocks = Vec::new();
        for i in 1..=3 {
            let (cin, cout) = (channels[i - 1], channels[i]);
            downs.push(SparseConvLayer::new(
                params,
                rng,
                &format!("pc.conv{i}.down"),
                cin,
                cout,
                2,
                2,
            ));
            down_bns.push(BatchNorm::new(params, &format!("pc.conv{i}.down.bn"), cout));
            blocks.push(ResidualBlock::new(params, rng, &format!("pc.conv{i}.res"), cout));
        }
        let lat2_w = params.add(
            "pc.lat2.w",
            vec![k_out, channels[2]],
            kaiming_uniform(rng, channels[2], k_out * channels[2]),
        );
        let lat2_b = params.add("pc.lat2.b", vec![k_out], vec![F::zero(); k_out]);
        let lat3_w = params.add(
            "pc.lat3.w",
            vec![k_out, channels[3]],
            kaiming_uniform(rng, channels[3], k_out * channels[3]),
        );
        let lat3_b = params.add("pc.lat3.b", vec![k_out], vec![F::zero(); k_out]);
        let tconv_w = params.add(
            "pc.tconv3.w",
            vec![8, k_out, k_out],
            kaiming_uniform(rng, k_out * 8, 8 * k_out * k_out),
        );
        let tconv_b = params.add("pc.tconv3.b", vec![k_out], vec![F::zero(); k_out]);
        PcBranch { conv0, bn0, downs, down_bns, blocks, lat2_w, lat2_b, lat3_w, lat3_b, tconv_w, tconv_b, k_out }
    }

    /// Forward a batch of occupancy grids to per-element stride-4 feature
    /// maps with `k_out` channels.
    pub fn forward_batch<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &mut ParamSet<F>,
        clouds: &[Rc<VoxelGrid>],
        mode: Mode,
    ) -> Result<Vec<SparseTensor<F>>> {
        if clouds.is_empty() {
            return Err(Error::validation("point-cloud branch: empty batch"));
        }
        let mut xs: Vec<SparseTensor<F>> = clouds
            .iter()
            .map(|g| {
                if g.stride() != 1 {
                    return Err(Error::validation("point-cloud branch: input stride must be 1"));
                }
                let n = g.len();
                SparseTensor::new(Rc::clone(g), tape.constant(vec![n, 1], vec![F::one(); n]))
            })
            .collect::<Result<_>>()?;

        xs = xs
            .iter()
            .map(|x| self.conv0.forward(tape, params, x, mode))
            .collect::<Result<_>>()?;
        xs = bn_relu_batch(tape, params, &self.bn0, &xs, mode)?;

        let mut conv2_out: Option<Vec<SparseTensor<F>>> = None;
        for i in 0..3 {
            xs = xs
                .iter()
                .map(|x| self.downs[i].forward(tape, params, x, mode))
                .collect::<Result<_>>()?;
            xs = bn_relu_batch(tape, params, &self.down_bns[i], &xs, mode)?;
            xs = self.blocks[i].forward_batch(tape, params, &xs, mode)?;
            if i == 1 {
                conv2_out = Some(xs.clone());
            }
        }
        let conv2_out = conv2_out.expect("three pyramid stages ran");
        let conv3_out = xs;

        let lat2_w = bind(tape, params, self.lat2_w, mode);
        let lat2_b = bind(tape, params, self.lat2_b, mode);
        let lat3_w = bind(tape, params, self.lat3_w, mode);
        let lat3_b = bind(tape, params, self.lat3_b, mode);
        let tconv_w = bind(tape, params, self.tconv_w, mode);
        let tconv_b = bind(tape, params, self.tconv_b, mode);

        let mut out = Vec::with_capacity(conv2_out.len());
        for (c2, c3) in conv2_out.iter().zip(&conv3_out) {
            let l2 = tape.linear(&c2.feats, &lat2_w, Some(&lat2_b))?;
            let l2 = SparseTensor::new(Rc::clone(&c2.grid), l2)?;
            let l3 = tape.linear(&c3.feats, &lat3_w, Some(&lat3_b))?;
            let l3 = SparseTensor::new(Rc::clone(&c3.grid), l3)?;
            let up = sparse_transposed_conv(tape, &l3, &tconv_w, 2, 2, &c2.grid)?;
            let up_feats = tape.add_row_vec(&up.feats, &tconv_b)?;
            let up = SparseTensor::new(Rc::clone(&c2.grid), up_feats)?;
            out.push(coordinate_aligned_add(tape, &l2, &up)?);
        }
        Ok(out)
    }
}
