//! Image branch: a compact strided CNN.
//!
//! Four blocks of 3x3 stride-2 pad-1 convolution (no bias), batch norm and
//! ReLU, widening 32 -> 64 -> 128 -> 256 channels in the full-size
//! configuration, followed by a biased 1x1 convolution down to the
//! descriptor width `k`. The output is a spatial feature map with `k`
//! channels, pooled elsewhere into the image descriptor.
//!
//! Batch norm runs over the concatenated pixel rows of the whole batch, so
//! training statistics come from every spatial position of every element.

use rand::Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor};
use crate::branches::bind;
use crate::error::{Error, Result};
use crate::nn::init::{kaiming_uniform, linear_uniform};
use crate::nn::{BatchNorm, Mode};
use crate::scalar::Scalar;

/// Spatial map `[C, H, W]` to normalization rows `[H*W, C]`.
pub(crate) fn chw_to_rows<F: Scalar>(
    tape: &Tape<F>,
    x: &Tensor<F>,
) -> Result<(Tensor<F>, usize, usize)> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(Error::validation(format!("expected [C, H, W] map, got {other:?}"))),
    };
    let flat = tape.reshape(x, vec![c, h * w])?;
    Ok((tape.transpose2d(&flat)?, h, w))
}

/// Inverse of [`chw_to_rows`].
fn rows_to_chw<F: Scalar>(tape: &Tape<F>, rows: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    let c = rows.shape()[1];
    let t = tape.transpose2d(rows)?;
    tape.reshape(&t, vec![c, h, w])
}

/// The image feature extractor; output maps have `k_out` channels.
pub struct ImageBranch {
    conv_ws: Vec<ParamId>,
    bns: Vec<BatchNorm>,
    reduce_w: ParamId,
    reduce_b: ParamId,
    pub k_out: usize,
}

impl ImageBranch {
    pub fn new<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        rng: &mut R,
        channels: [usize; 4],
        k_out: usize,
    ) -> Self {
        let mut conv_ws = Vec::new();
        let mut bns = Vec::new();
        let mut cin = 3;
        for (i, &cout) in channels.iter().enumerate() {
            conv_ws.push(params.add(
                &format!("img.conv{i}.w"),
                vec![cout, cin, 3, 3],
                kaiming_uniform(rng, cin * 9, cout * cin * 9),
            ));
            bns.push(BatchNorm::new(params, &format!("img.conv{i}.bn"), cout));
            cin = cout;
        }
        let reduce_w = params.add(
            "img.reduce.w",
            vec![k_out, cin],
            linear_uniform(rng, cin, k_out * cin),
        );
        let reduce_b = params.add("img.reduce.b", vec![k_out], vec![F::zero(); k_out]);
        ImageBranch { conv_ws, bns, reduce_w, reduce_b, k_out }
    }

    /// Forward a batch of `[3, H, W]` images (H, W >= 32) to per-element
    /// feature maps `[k_out, H/16, W/16]` (ceiling division per block).
    pub fn forward_batch<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &mut ParamSet<F>,
        images: &[Tensor<F>],
        mode: Mode,
    ) -> Result<Vec<Tensor<F>>> {
        if images.is_empty() {
            return Err(Error::validation("image branch: empty batch"));
        }
        for img in images {
            match img.shape() {
                [3, h, w] if *h >= 32 && *w >= 32 => {}
                other => {
                    return Err(Error::validation(format!(
                        "image branch: expected [3, H>=32, W>=32], got {other:?}"
                    )))
                }
            }
        }
        let mut maps: Vec<Tensor<F>> = images.to_vec();
        for (w_id, bn) in self.conv_ws.iter().zip(&self.bns) {
            let w = bind(tape, params, *w_id, mode);
            let convs: Vec<Tensor<F>> = maps
                .iter()
                .map(|m| tape.conv2d(m, &w, 2, 1))
                .collect::<Result<_>>()?;
            let mut rows = Vec::with_capacity(convs.len());
            let mut dims = Vec::with_capacity(convs.len());
            for m in &convs {
                let (r, h, wd) = chw_to_rows(tape, m)?;
                rows.push(r);
                dims.push((h, wd));
            }
            let row_refs: Vec<&Tensor<F>> = rows.iter().collect();
            let cat = tape.concat0(&row_refs)?;
            let normed = bn.forward_rows(tape, params, &cat, mode)?;
            let act = tape.relu(&normed);
            let mut out = Vec::with_capacity(maps.len());
            let mut r0 = 0;
            for (h, wd) in dims {
                let n = h * wd;
                let piece = tape.slice_rows(&act, r0, r0 + n)?;
                out.push(rows_to_chw(tape, &piece, h, wd)?);
                r0 += n;
            }
            maps = out;
        }
        // Biased 1x1 convolution down to the descriptor width, applied as a
        // per-pixel linear map.
        let rw = bind(tape, params, self.reduce_w, mode);
        let rb = bind(tape, params, self.reduce_b, mode);
        maps.iter()
            .map(|m| {
                let (rows, h, w) = chw_to_rows(tape, m)?;
                let reduced = tape.linear(&rows, &rw, Some(&rb))?;
                rows_to_chw(tape, &reduced, h, w)
            })
            .collect()
    }
}
