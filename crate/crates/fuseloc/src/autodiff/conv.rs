//! Differentiable convolution and matrix primitives: dense 2-D convolution
//! over `[C, H, W]` images, the zero-padded 1-D convolution used by channel
//! attention, fully-connected layers, and the gather/scatter matmul that
//! powers sparse voxel convolutions.

use std::rc::Rc;

use crate::autodiff::tape::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One (input row, output row, kernel offset) assignment for
/// [`Tape::scatter_matmul`]. Built by the sparse-convolution layer from
/// coordinate arithmetic; the op itself never looks at coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelPair {
    pub in_row: u32,
    pub out_row: u32,
    pub offset: u32,
}

impl<F: Scalar> Tape<F> {
    /// 2-D convolution: `x [Cin, H, W]` with `w [Cout, Cin, kh, kw]`,
    /// zero padding `pad`, square stride `stride`.
    ///
    /// `H' = (H + 2*pad - kh) / stride + 1` (floor), same for `W'`.
    pub fn conv2d(
        &self,
        x: &Tensor<F>,
        w: &Tensor<F>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<F>> {
        let (cin, h, wid) = match x.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(Error::validation(format!(
                    "conv2d: expected [C, H, W] input, got {other:?}"
                )))
            }
        };
        let (cout, wcin, kh, kw) = match w.shape() {
            [o, i, kh, kw] => (*o, *i, *kh, *kw),
            other => {
                return Err(Error::validation(format!(
                    "conv2d: expected [Cout, Cin, kh, kw] weight, got {other:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(Error::validation(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::validation("conv2d: zero stride"));
        }
        if h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(Error::validation(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wid + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wid + 2 * pad - kw) / stride + 1;

        let xv = x.values();
        let wv = w.values();
        let mut out = vec![F::zero(); cout * oh * ow];
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = F::zero();
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wid as isize {
                                    continue;
                                }
                                acc += xv[(ic * h + iy as usize) * wid + ix as usize]
                                    * wv[((oc * cin + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }

        let node = if x.node().is_some() || w.node().is_some() {
            let (xn, wn) = (x.node(), w.node());
            let xv = Rc::clone(&x.values);
            let wv = Rc::clone(&w.values);
            Some(self.push(
                out.len(),
                Some(Box::new(move |g, grads| {
                    if let Some(xn) = xn {
                        let buf = grads.buf_mut(xn);
                        for oc in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = g[(oc * oh + oy) * ow + ox];
                                    for ic in 0..cin {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= wid as isize {
                                                    continue;
                                                }
                                                buf[(ic * h + iy as usize) * wid + ix as usize] +=
                                                    go * wv[((oc * cin + ic) * kh + ky) * kw + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(wn) = wn {
                        let buf = grads.buf_mut(wn);
                        for oc in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = g[(oc * oh + oy) * ow + ox];
                                    for ic in 0..cin {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= wid as isize {
                                                    continue;
                                                }
                                                buf[((oc * cin + ic) * kh + ky) * kw + kx] += go
                                                    * xv[(ic * h + iy as usize) * wid
                                                        + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                })),
            ))
        } else {
            None
        };
        Ok(Tensor { shape: vec![cout, oh, ow], values: Rc::new(out), node })
    }

    /// Add a per-channel bias `[C]` to a `[C, H, W]` tensor.
    pub fn add_channel_bias(&self, x: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (c, h, w) = match x.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(Error::validation(format!(
                    "add_channel_bias: expected [C, H, W], got {other:?}"
                )))
            }
        };
        if b.shape() != [c] {
            return Err(Error::validation(format!(
                "add_channel_bias: bias shape {:?} for {c} channels",
                b.shape()
            )));
        }
        let hw = h * w;
        let mut out = x.values().to_vec();
        for ch in 0..c {
            let bv = b.values()[ch];
            for p in &mut out[ch * hw..(ch + 1) * hw] {
                *p += bv;
            }
        }
        let node = if x.node().is_some() || b.node().is_some() {
            let (xn, bn) = (x.node(), b.node());
            Some(self.push(
                out.len(),
                Some(Box::new(move |g, grads| {
                    if let Some(xn) = xn {
                        let buf = grads.buf_mut(xn);
                        for (dst, &src) in buf.iter_mut().zip(g.iter()) {
                            *dst += src;
                        }
                    }
                    if let Some(bn) = bn {
                        let buf = grads.buf_mut(bn);
                        for ch in 0..c {
                            let mut acc = F::zero();
                            for &gv in &g[ch * hw..(ch + 1) * hw] {
                                acc += gv;
                            }
                            buf[ch] += acc;
                        }
                    }
                })),
            ))
        } else {
            None
        };
        Ok(Tensor { shape: vec![c, h, w], values: Rc::new(out), node })
    }

    /// Zero-padded 1-D convolution of a `[C]` signal with a `[k]` filter
    /// (`k` odd), same-length output: `out[i] = sum_j w[j] * x[i + j - k/2]`.
    pub fn conv1d_same(&self, x: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
        let c = match x.shape() {
            [c] => *c,
            other => {
                return Err(Error::validation(format!(
                    "conv1d_same: expected [C] input, got {other:?}"
                )))
            }
        };
        let k = match w.shape() {
            [k] if k % 2 == 1 => *k,
            other => {
                return Err(Error::validation(format!(
                    "conv1d_same: expected odd-length [k] filter, got {other:?}"
                )))
            }
        };
        let half = (k / 2) as isize;
        let xv = x.values();
        let wv = w.values();
        let mut out = vec![F::zero(); c];
        for i in 0..c {
            let mut acc = F::zero();
            for j in 0..k {
                let src = i as isize + j as isize - half;
                if src >= 0 && src < c as isize {
                    acc += wv[j] * xv[src as usize];
                }
            }
            out[i] = acc;
        }
        let node = if x.node().is_some() || w.node().is_some() {
            let (xn, wn) = (x.node(), w.node());
            let xv = Rc::clone(&x.values);
            let wv = Rc::clone(&w.values);
            Some(self.push(
                c,
                Some(Box::new(move |g, grads| {
                    if let Some(xn) = xn {
                        let buf = grads.buf_mut(xn);
                        for i in 0..c {
                            for j in 0..k {
                                let src = i as isize + j as isize - half;
                                if src >= 0 && src < c as isize {
                                    buf[src as usize] += g[i] * wv[j];
                                }
                            }
                        }
                    }
                    if let Some(wn) = wn {
                        let buf = grads.buf_mut(wn);
                        for i in 0..c {
                            for j in 0..k {
                                let src = i as isize + j as isize - half;
                                if src >= 0 && src < c as isize {
                                    buf[j] += g[i] * xv[src as usize];
                                }
                            }
                        }
                    }
                })),
            ))
        } else {
            None
        };
        Ok(Tensor { shape: vec![c], values: Rc::new(out), node })
    }

    /// Fully connected layer: `x [N, In]` times `w [Out, In]` transposed,
    /// plus optional bias `[Out]`, yielding `[N, Out]`.
    pub fn linear(&self, x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let (n, dim_in) = match x.shape() {
            [n, i] => (*n, *i),
            other => {
                return Err(Error::validation(format!(
                    "linear: expected [N, In] input, got {other:?}"
                )))
            }
        };
        let (dim_out, w_in) = match w.shape() {
            [o, i] => (*o, *i),
            other => {
                return Err(Error::validation(format!(
                    "linear: expected [Out, In] weight, got {other:?}"
                )))
            }
        };
        if w_in != dim_in {
            return Err(Error::validation(format!(
                "linear: input width {dim_in} does not match weight width {w_in}"
            )));
        }
        if let Some(b) = b {
            if b.shape() != [dim_out] {
                return Err(Error::validation(format!(
                    "linear: bias shape {:?} for {dim_out} outputs",
                    b.shape()
                )));
            }
        }
        let xv = x.values();
        let wv = w.values();
        let mut out = vec![F::zero(); n * dim_out];
        for r in 0..n {
            for o in 0..dim_out {
                let mut acc = F::zero();
                for i in 0..dim_in {
                    acc += xv[r * dim_in + i] * wv[o * dim_in + i];
                }
                if let Some(b) = b {
                    acc += b.values()[o];
                }
                out[r * dim_out + o] = acc;
            }
        }
        let tracked =
            x.node().is_some() || w.node().is_some() || b.map_or(false, |b| b.node().is_some());
        let node = if tracked {
            let (xn, wn, bn) = (x.node(), w.node(), b.and_then(|b| b.node()));
            let xv = Rc::clone(&x.values);
            let wv = Rc::clone(&w.values);
            Some(self.push(
                out.len(),
                Some(Box::new(move |g, grads| {
                    if let Some(xn) = xn {
                        let buf = grads.buf_mut(xn);
                        for r in 0..n {
                            for o in 0..dim_out {
                                let go = g[r * dim_out + o];
                                for i in 0..dim_in {
                                    buf[r * dim_in + i] += go * wv[o * dim_in + i];
                                }
                            }
                        }
                    }
                    if let Some(wn) = wn {
                        let buf = grads.buf_mut(wn);
                        for r in 0..n {
                            for o in 0..dim_out {
                                let go = g[r * dim_out + o];
                                for i in 0..dim_in {
                                    buf[o * dim_in + i] += go * xv[r * dim_in + i];
                                }
                            }
                        }
                    }
                    if let Some(bn) = bn {
                        let buf = grads.buf_mut(bn);
                        for r in 0..n {
                            for o in 0..dim_out {
                                buf[o] += g[r * dim_out + o];
                            }
                        }
                    }
                })),
            ))
        } else {
            None
        };
        Ok(Tensor { shape: vec![n, dim_out], values: Rc::new(out), node })
    }

    /// Scatter-accumulated matmul over row pairs:
    ///
    /// `out[p.out_row] += feats[p.in_row] x kernel[p.offset]` for every
    /// pair, where `feats` is `[N_in, Cin]`, `kernel` is `[K, Cin, Cout]`
    /// and the output is `[n_out, Cout]` (unassigned rows stay zero).
    ///
    /// Accumulation order is the pair order, so results are deterministic
    /// for a fixed pair list.
    pub fn scatter_matmul(
        &self,
        feats: &Tensor<F>,
        kernel: &Tensor<F>,
        pairs: Rc<Vec<KernelPair>>,
        n_out: usize,
    ) -> Result<Tensor<F>> {
        let (n_in, cin) = match feats.shape() {
            [n, c] => (*n, *c),
            other => {
                return Err(Error::validation(format!(
                    "scatter_matmul: expected [N, Cin] features, got {other:?}"
                )))
            }
        };
        let (k, kcin, cout) = match kernel.shape() {
            [k, i, o] => (*k, *i, *o),
            other => {
                return Err(Error::validation(format!(
                    "scatter_matmul: expected [K, Cin, Cout] kernel, got {other:?}"
                )))
            }
        };
        if kcin != cin {
            return Err(Error::validation(format!(
                "scatter_matmul: features have {cin} channels, kernel expects {kcin}"
            )));
        }
        for p in pairs.iter() {
            if p.in_row as usize >= n_in || p.out_row as usize >= n_out || p.offset as usize >= k {
                return Err(Error::validation(format!(
                    "scatter_matmul: pair {p:?} out of range (n_in={n_in}, n_out={n_out}, k={k})"
                )));
            }
        }
        let fv = feats.values();
        let kv = kernel.values();
        let mut out = vec![F::zero(); n_out * cout];
        for p in pairs.iter() {
            let frow = &fv[p.in_row as usize * cin..(p.in_row as usize + 1) * cin];
            let kmat = &kv[p.offset as usize * cin * cout..(p.offset as usize + 1) * cin * cout];
            let orow = &mut out[p.out_row as usize * cout..(p.out_row as usize + 1) * cout];
            for i in 0..cin {
                let f = frow[i];
                let krow = &kmat[i * cout..(i + 1) * cout];
                for (o, &kw) in orow.iter_mut().zip(krow) {
                    *o += f * kw;
                }
            }
        }
        let node = if feats.node().is_some() || kernel.node().is_some() {
            let (fnode, knode) = (feats.node(), kernel.node());
            let fv = Rc::clone(&feats.values);
            let kv = Rc::clone(&kernel.values);
            let pairs_b = Rc::clone(&pairs);
            Some(self.push(
                out.len(),
                Some(Box::new(move |g, grads| {
                    if let Some(fnode) = fnode {
                        let buf = grads.buf_mut(fnode);
                        for p in pairs_b.iter() {
                            let kmat = &kv[p.offset as usize * cin * cout
                                ..(p.offset as usize + 1) * cin * cout];
                            let grow =
                                &g[p.out_row as usize * cout..(p.out_row as usize + 1) * cout];
                            let frow =
                                &mut buf[p.in_row as usize * cin..(p.in_row as usize + 1) * cin];
                            for i in 0..cin {
                                let krow = &kmat[i * cout..(i + 1) * cout];
                                let mut acc = F::zero();
                                for (kw, gv) in krow.iter().zip(grow) {
                                    acc += *kw * *gv;
                                }
                                frow[i] += acc;
                            }
                        }
                    }
                    if let Some(knode) = knode {
                        let buf = grads.buf_mut(knode);
                        for p in pairs_b.iter() {
                            let frow =
                                &fv[p.in_row as usize * cin..(p.in_row as usize + 1) * cin];
                            let grow =
                                &g[p.out_row as usize * cout..(p.out_row as usize + 1) * cout];
                            let kmat = &mut buf[p.offset as usize * cin * cout
                                ..(p.offset as usize + 1) * cin * cout];
                            for i in 0..cin {
                                let f = frow[i];
                                let krow = &mut kmat[i * cout..(i + 1) * cout];
                                for (kw, gv) in krow.iter_mut().zip(grow) {
                                    *kw += f * *gv;
                                }
                            }
                        }
                    }
                })),
            ))
        } else {
            None
        };
        Ok(Tensor { shape: vec![n_out, cout], values: Rc::new(out), node })
    }
}
