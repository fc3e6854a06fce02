//! Differentiable tensor operations: elementwise maps, reductions, shape
//! manipulation, and row/column broadcasts over `[N, C]` matrices.
//!
//! Every op follows the same contract: outputs are tracked iff at least one
//! operand is tracked, and backward closures *accumulate* (`+=`) into parent
//! gradient buffers so shared subexpressions sum their contributions.

use std::rc::Rc;

use crate::autodiff::tape::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn same_shape<F: Scalar>(op: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn rows_cols<F: Scalar>(op: &str, x: &Tensor<F>) -> Result<(usize, usize)> {
    match x.shape() {
        [n, c] => Ok((*n, *c)),
        other => Err(Error::validation(format!("{op}: expected a [N, C] matrix, got {other:?}"))),
    }
}

impl<F: Scalar> Tape<F> {
    // ---- elementwise binary ----

    pub fn add(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("add", a, b)?;
        let out: Vec<F> = a.values().iter().zip(b.values()).map(|(&x, &y)| x + y).collect();
        let node = if a.node().is_some() || b.node().is_some() {
            let (an, bn, len) = (a.node(), b.node(), out.len());
            Some(self.push(
                len,
                Some(Box::new(move |g, grads| {
                    if let Some(an) = an {
                        let buf = grads.buf_mut(an);
                        for i in 0..len {
                            buf[i] += g[i];
                        }
                    }
                    if let Some(bn) = bn {
                        let buf = grads.buf_mut(bn);
                        for i in 0..len {
                            buf[i] += g[i];
                        }
                    }
                })),
            ))
        } else {
            None
        };
        Ok(Tensor { shape: a.shape().to_vec(), values: Rc::new(out), node })
    }

    pub fn sub(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("sub", a, b)?;
        let out: Vec<F> = a.values().iter().zip(b.values()).map(|(&x, &y)| x - y).collect();
        let node = if a.node().is_some() || b.node().is_some() {
            let (an, bn, len) = (a.node(), b.node(), out.len());
            Some(self.push(
                len,
                Some(Box::new(move |g, grads| {
                    if let Some(an) = an {
                        let buf = grads.buf_mut(an);
                        for i in 0..len {
                            buf[i] += g[i];
                        }
                    }
                    if let Some(bn) = bn {
                        let buf = grads.buf_mut(bn);
                        for i in 0..len {
                            buf[i] -= g[i];
                        }
                    }
                })),
            ))
        } else {
            None
        };
        Ok(Tensor { shape: a.shape().to_vec(), values: Rc::new(out), node })
    }

    pub fn mul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("mul", a, b)?;
        let out: Vec<F> = a.values().iter().zip(b.values()).map(|(&x, &y)| x * y).collect();
        let node = if a.node().is_some() || b.node().is_some() {
            let (an, bn, len) = (a.node(), b.node(), out.len());
            let (av, bv) = (Rc::clone(&a.values), Rc::clone(&b.values));
            Some(self.push(
                len,
                Some(Box::new(move |g, grads| {
                    if let Some(an) = an {
                        let buf = grads.buf_mut(an);
                        for i in 0..len {
                            buf[i] += g[i] * bv[i];
                        }
                    }
                    if let Some(bn) = bn {
                        let buf = grads.buf_mut(bn);
                        for i in 0..len {
                            buf[i] += g[i] * av[i];
                        }
                    }
                })),
            ))
        } else {
            None
        };
        Ok(Tensor { shape: a.shape().to_vec(), values: Rc::new(out), node })
    }

    // ---- elementwise with scalar constants ----

    pub fn scale(&self, x: &Tensor<F>, c: F) -> Tensor<F> {
        let out: Vec<F> = x.values().iter().map(|&v| v * c).collect();
        let node = x.node().map(|xn| {
            let len = out.len();
            self.push(
                len,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for i in 0..len {
                        buf[i] += g[i] * c;
                    }
                })),
            )
        });
        Tensor { shape: x.shape().to_vec(), values: Rc::new(out), node }
    }

    pub fn add_scalar(&self, x: &Tensor<F>, c: F) -> Tensor<F> {
        let out: Vec<F> = x.values().iter().map(|&v| v + c).collect();
        let node = x.node().map(|xn| {
            let len = out.len();
            self.push(
                len,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for i in 0..len {
                        buf[i] += g[i];
                    }
                })),
            )
        });
        Tensor { shape: x.shape().to_vec(), values: Rc::new(out), node }
    }

    /// `x^e` for a fixed exponent. Rejects negative bases with non-integer
    /// exponents; the derivative at `x == 0` with `e < 1` is taken as 0.
    pub fn pow_const(&self, x: &Tensor<F>, e: F) -> Result<Tensor<F>> {
        let integer_exp = e == e.floor();
        if !integer_exp && x.values().iter().any(|v| *v < F::zero()) {
            return Err(Error::numeric(format!(
                "pow_const: negative base with non-integer exponent {e:?}"
            )));
        }
        let out: Vec<F> = x.values().iter().map(|&v| v.powf(e)).collect();
        let node = x.node().map(|xn| {
            let len = out.len();
            let xv = Rc::clone(&x.values);
            self.push(
                len,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    let one = F::one();
                    for i in 0..len {
                        if xv[i] == F::zero() && e < one {
                            continue;
                        }
                        buf[i] += g[i] * e * xv[i].powf(e - one);
                    }
                })),
            )
        });
        Ok(Tensor { shape: x.shape().to_vec(), values: Rc::new(out), node })
    }

    /// `x^e` where the exponent is a tracked scalar tensor. Requires a
    /// non-negative base. `d/de = y * ln(x)`, taken as 0 where `x == 0`.
    pub fn pow_exp(&self, x: &Tensor<F>, e: &Tensor<F>) -> Result<Tensor<F>> {
        if e.len() != 1 {
            return Err(Error::validation("pow_exp: exponent must be a scalar tensor"));
        }
        if x.values().iter().any(|v| *v < F::zero()) {
            return Err(Error::numeric("pow_exp: negative base"));
        }
        let ev = e.scalar_value();
        // Exponent exactly 1 is the identity; skip powf so the fast path is
        // bit-identical to the input.
        let out: Vec<F> = if ev == F::one() {
            x.values().to_vec()
        } else {
            x.values().iter().map(|&v| v.powf(ev)).collect()
        };
        let node = if x.node().is_some() || e.node().is_some() {
            let (xn, en, len) = (x.node(), e.node(), out.len());
            let xv = Rc::clone(&x.values);
            let yv = Rc::new(out.clone());
            Some(self.push(
                len,
                Some(Box::new(move |g, grads| {
                    let one = F::one();
                    if let Some(xn) = xn {
                        let buf = grads.buf_mut(xn);
                        for i in 0..len {
                            if xv[i] == F::zero() && ev < one {
                                continue;
                            }
                            buf[i] += g[i] * ev * xv[i].powf(ev - one);
                        }
                    }
                    if let Some(en) = en {
                        let mut de = F::zero();
                        for i in 0..len {
                            if xv[i] > F::zero() {
                                de += g[i] * yv[i] * xv[i].ln();
                            }
                        }
                        grads.buf_mut(en)[0] += de;
                    }
                })),
            ))
        } else {
            None
        };
        Ok(Tensor { shape: x.shape().to_vec(), values: Rc::new(out), node })
    }

    /// `1 / x` elementwise.
    pub fn recip(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.values().iter().any(|v| *v == F::zero()) {
            return Err(Error::numeric("recip: division by zero"));
        }
        let out: Vec<F> = x.values().iter().map(|&v| F::one() / v).collect();
        let node = x.node().map(|xn| {
            let len = out.len();
            let yv = Rc::new(out.clone());
            self.push(
                len,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for i in 0..len {
                        buf[i] -= g[i] * yv[i] * yv[i];
                    }
                })),
            )
        });
        Ok(Tensor { shape: x.shape().to_vec(), values: Rc::new(out), node })
    }

    /// `max(x, c)` elementwise; gradient passes where `x >= c`.
    pub fn clamp_min(&self, x: &Tensor<F>, c: F) -> Tensor<F> {
        let out: Vec<F> = x.values().iter().map(|&v| if v < c { c } else { v }).collect();
        let node = x.node().map(|xn| {
            let len = out.len();
            let xv = Rc::clone(&x.values);
            self.push(
                len,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for i in 0..len {
                        if xv[i] >= c {
                            buf[i] += g[i];
                        }
                    }
                })),
            )
        });
        Tensor { shape: x.shape().to_vec(), values: Rc::new(out), node }
    }

    // ---- elementwise unary ----

    pub fn relu(&self, x: &Tensor<F>) -> Tensor<F> {
        let z = F::zero();
        let out: Vec<F> = x.values().iter().map(|&v| if v > z { v } else { z }).collect();
        let node = x.node().map(|xn| {
            let len = out.len();
            let xv = Rc::clone(&x.values);
            self.push(
                len,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for i in 0..len {
                        if xv[i] > F::zero() {
                            buf[i] += g[i];
                        }
                    }
                })),
            )
        });
        Tensor { shape: x.shape().to_vec(), values: Rc::new(out), node }
    }

    pub fn sigmoid(&self, x: &Tensor<F>) -> Tensor<F> {
        let one = F::one();
        let out: Vec<F> = x.values().iter().map(|&v| one / (one + (-v).exp())).collect();
        let node = x.node().map(|xn| {
            let len = out.len();
            let yv = Rc::new(out.clone());
            self.push(
                len,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for i in 0..len {
                        let s = yv[i];
                        buf[i] += g[i] * s * (F::one() - s);
                    }
                })),
            )
        });
        Tensor { shape: x.shape().to_vec(), values: Rc::new(out), node }
    }

    /// Square root with a guarded derivative: contributions at `x == 0`
    /// are dropped instead of dividing by zero.
    pub fn sqrt_guarded(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.values().iter().any(|v| *v < F::zero()) {
            return Err(Error::numeric("sqrt_guarded: negative input"));
        }
        let out: Vec<F> = x.values().iter().map(|&v| v.sqrt()).collect();
        let node = x.node().map(|xn| {
            let len = out.len();
            let yv = Rc::new(out.clone());
            self.push(
                len,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    let half = F::from_f64(0.5);
                    for i in 0..len {
                        if yv[i] > F::zero() {
                            buf[i] += g[i] * half / yv[i];
                        }
                    }
                })),
            )
        });
        Ok(Tensor { shape: x.shape().to_vec(), values: Rc::new(out), node })
    }

    // ---- reductions ----

    pub fn sum(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut acc = F::zero();
        for &v in x.values() {
            acc += v;
        }
        let node = x.node().map(|xn| {
            let len = x.len();
            self.push(
                1,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for b in buf.iter_mut().take(len) {
                        *b += g[0];
                    }
                })),
            )
        });
        Tensor { shape: vec![1], values: Rc::new(vec![acc]), node }
    }

    pub fn mean(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.is_empty() {
            return Err(Error::validation("mean: empty tensor"));
        }
        let n = F::from_usize(x.len());
        let s = self.sum(x);
        Ok(self.scale(&s, F::one() / n))
    }

    /// Column means of a `[N, C]` matrix: averages over rows, yields `[C]`.
    pub fn col_mean(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, c) = rows_cols("col_mean", x)?;
        if n == 0 {
            return Err(Error::validation("col_mean: zero rows"));
        }
        let inv_n = F::one() / F::from_usize(n);
        let mut out = vec![F::zero(); c];
        for r in 0..n {
            let row = &x.values()[r * c..(r + 1) * c];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o *= inv_n;
        }
        let node = x.node().map(|xn| {
            self.push(
                c,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for r in 0..n {
                        for j in 0..c {
                            buf[r * c + j] += g[j] * inv_n;
                        }
                    }
                })),
            )
        });
        Ok(Tensor { shape: vec![c], values: Rc::new(out), node })
    }

    /// Column maxima of a `[N, C]` matrix; gradient routes to the argmax
    /// row per column, ties broken toward the lowest row index.
    pub fn col_max(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, c) = rows_cols("col_max", x)?;
        if n == 0 {
            return Err(Error::validation("col_max: zero rows"));
        }
        let mut out = x.values()[..c].to_vec();
        let mut arg = vec![0usize; c];
        for r in 1..n {
            let row = &x.values()[r * c..(r + 1) * c];
            for j in 0..c {
                if row[j] > out[j] {
                    out[j] = row[j];
                    arg[j] = r;
                }
            }
        }
        let node = x.node().map(|xn| {
            let arg = Rc::new(arg);
            self.push(
                c,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for j in 0..c {
                        buf[arg[j] * c + j] += g[j];
                    }
                })),
            )
        });
        Ok(Tensor { shape: vec![c], values: Rc::new(out), node })
    }

    // ---- shape ----

    /// Reinterpret the shape without touching values. Shares the parent's
    /// tape node: gradient contributions through every alias sum up.
    pub fn reshape(&self, x: &Tensor<F>, shape: Vec<usize>) -> Result<Tensor<F>> {
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::validation(format!(
                "reshape: {:?} ({} values) -> {:?} is not size-preserving",
                x.shape(),
                x.len(),
                shape
            )));
        }
        Ok(Tensor { shape, values: Rc::clone(&x.values), node: x.node() })
    }

    pub fn transpose2d(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, c) = rows_cols("transpose2d", x)?;
        let mut out = vec![F::zero(); n * c];
        for r in 0..n {
            for j in 0..c {
                out[j * n + r] = x.values()[r * c + j];
            }
        }
        let node = x.node().map(|xn| {
            self.push(
                n * c,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for r in 0..n {
                        for j in 0..c {
                            buf[r * c + j] += g[j * n + r];
                        }
                    }
                })),
            )
        });
        Ok(Tensor { shape: vec![c, n], values: Rc::new(out), node })
    }

    /// Concatenate along axis 0. All shapes must agree beyond axis 0.
    pub fn concat0(&self, xs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        if xs.is_empty() {
            return Err(Error::validation("concat0: empty input list"));
        }
        let tail = &xs[0].shape()[1..];
        for x in xs {
            if x.shape().is_empty() || &x.shape()[1..] != tail {
                return Err(Error::validation(format!(
                    "concat0: incompatible shapes {:?} vs {:?}",
                    xs[0].shape(),
                    x.shape()
                )));
            }
        }
        let n0: usize = xs.iter().map(|x| x.shape()[0]).sum();
        let mut shape = vec![n0];
        shape.extend_from_slice(tail);
        let mut out = Vec::with_capacity(shape.iter().product());
        for x in xs {
            out.extend_from_slice(x.values());
        }
        let tracked = xs.iter().any(|x| x.node().is_some());
        let node = if tracked {
            let mut parts = Vec::with_capacity(xs.len());
            let mut offset = 0usize;
            for x in xs {
                parts.push((x.node(), offset, x.len()));
                offset += x.len();
            }
            Some(self.push(
                out.len(),
                Some(Box::new(move |g, grads| {
                    for &(node, offset, len) in &parts {
                        if let Some(node) = node {
                            let buf = grads.buf_mut(node);
                            for i in 0..len {
                                buf[i] += g[offset + i];
                            }
                        }
                    }
                })),
            ))
        } else {
            None
        };
        Ok(Tensor { shape, values: Rc::new(out), node })
    }

    /// Stack `[C]` vectors (all the same length) into an `[N, C]` matrix.
    pub fn stack_rows(&self, xs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let reshaped: Vec<Tensor<F>> = xs
            .iter()
            .map(|x| {
                let mut shape = vec![1];
                shape.extend_from_slice(x.shape());
                self.reshape(x, shape)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<F>> = reshaped.iter().collect();
        self.concat0(&refs)
    }

    /// Rows `r0..r1` of a `[N, C]` matrix.
    pub fn slice_rows(&self, x: &Tensor<F>, r0: usize, r1: usize) -> Result<Tensor<F>> {
        let (n, c) = rows_cols("slice_rows", x)?;
        if r0 > r1 || r1 > n {
            return Err(Error::validation(format!(
                "slice_rows: range {r0}..{r1} out of bounds for {n} rows"
            )));
        }
        let out = x.values()[r0 * c..r1 * c].to_vec();
        let node = x.node().map(|xn| {
            let len = out.len();
            self.push(
                len,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for i in 0..len {
                        buf[r0 * c + i] += g[i];
                    }
                })),
            )
        });
        Ok(Tensor { shape: vec![r1 - r0, c], values: Rc::new(out), node })
    }

    /// `out[i] = x[idx[i]]` over rows of a `[N, C]` matrix. Indices may
    /// repeat; the backward pass scatter-adds.
    pub fn gather_rows(&self, x: &Tensor<F>, idx: &[usize]) -> Result<Tensor<F>> {
        let (n, c) = rows_cols("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::validation(format!("gather_rows: index {bad} out of {n} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&x.values()[i * c..(i + 1) * c]);
        }
        let node = x.node().map(|xn| {
            let idx = Rc::new(idx.to_vec());
            self.push(
                idx.len() * c,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[i * c + j] += g[k * c + j];
                        }
                    }
                })),
            )
        });
        Ok(Tensor { shape: vec![idx.len(), c], values: Rc::new(out), node })
    }

    /// `out[map[i]] += x[i]` over rows: scatters an `[N, C]` matrix into
    /// `n_out` rows. Unmapped output rows stay zero.
    pub fn scatter_rows(&self, x: &Tensor<F>, map: &[usize], n_out: usize) -> Result<Tensor<F>> {
        let (n, c) = rows_cols("scatter_rows", x)?;
        if map.len() != n {
            return Err(Error::validation(format!(
                "scatter_rows: {} indices for {n} rows",
                map.len()
            )));
        }
        if let Some(&bad) = map.iter().find(|&&i| i >= n_out) {
            return Err(Error::validation(format!(
                "scatter_rows: target {bad} out of {n_out} rows"
            )));
        }
        let mut out = vec![F::zero(); n_out * c];
        for (i, &t) in map.iter().enumerate() {
            for j in 0..c {
                out[t * c + j] += x.values()[i * c + j];
            }
        }
        let node = x.node().map(|xn| {
            let map = Rc::new(map.to_vec());
            self.push(
                n_out * c,
                Some(Box::new(move |g, grads| {
                    let buf = grads.buf_mut(xn);
                    for (i, &t) in map.iter().enumerate() {
                        for j in 0..c {
                            buf[i * c + j] += g[t * c + j];
                        }
                    }
                })),
            )
        });
        Ok(Tensor { shape: vec![n_out, c], values: Rc::new(out), node })
    }

    // ---- [N, C] (+|-|*) [C] broadcasts ----

    pub fn add_row_vec(&self, x: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
        self.row_broadcast("add_row_vec", x, v, RowBroadcast::Add)
    }

    pub fn sub_row_vec(&self, x: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
        self.row_broadcast("sub_row_vec", x, v, RowBroadcast::Sub)
    }

    pub fn mul_row_vec(&self, x: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
        self.row_broadcast("mul_row_vec", x, v, RowBroadcast::Mul)
    }

    fn row_broadcast(
        &self,
        op: &str,
        x: &Tensor<F>,
        v: &Tensor<F>,
        kind: RowBroadcast,
    ) -> Result<Tensor<F>> {
        let (n, c) = rows_cols(op, x)?;
        if v.shape() != [c] {
            return Err(Error::validation(format!(
                "{op}: vector shape {:?} does not match {c} columns",
                v.shape()
            )));
        }
        let mut out = vec![F::zero(); n * c];
        for r in 0..n {
            for j in 0..c {
                let (a, b) = (x.values()[r * c + j], v.values()[j]);
                out[r * c + j] = match kind {
                    RowBroadcast::Add => a + b,
                    RowBroadcast::Sub => a - b,
                    RowBroadcast::Mul => a * b,
                };
            }
        }
        let node = if x.node().is_some() || v.node().is_some() {
            let (xn, vn) = (x.node(), v.node());
            let xv = Rc::clone(&x.values);
            let vv = Rc::clone(&v.values);
            Some(self.push(
                n * c,
                Some(Box::new(move |g, grads| {
                    if let Some(xn) = xn {
                        let buf = grads.buf_mut(xn);
                        for r in 0..n {
                            for j in 0..c {
                                let gi = g[r * c + j];
                                buf[r * c + j] += match kind {
                                    RowBroadcast::Add | RowBroadcast::Sub => gi,
                                    RowBroadcast::Mul => gi * vv[j],
                                };
                            }
                        }
                    }
                    if let Some(vn) = vn {
                        let buf = grads.buf_mut(vn);
                        for r in 0..n {
                            for j in 0..c {
                                let gi = g[r * c + j];
                                buf[j] += match kind {
                                    RowBroadcast::Add => gi,
                                    RowBroadcast::Sub => -gi,
                                    RowBroadcast::Mul => gi * xv[r * c + j],
                                };
                            }
                        }
                    }
                })),
            ))
        } else {
            None
        };
        Ok(Tensor { shape: vec![n, c], values: Rc::new(out), node })
    }

    // ---- vector geometry ----

    /// `x / max(||x||_2, 1e-12)` over the whole tensor. The gradient uses
    /// the clamped norm.
    pub fn l2_normalize(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut sq = F::zero();
        for &v in x.values() {
            sq += v * v;
        }
        let norm = sq.sqrt().max(F::from_f64(1e-12));
        let inv = F::one() / norm;
        let out: Vec<F> = x.values().iter().map(|&v| v * inv).collect();
        let node = x.node().map(|xn| {
            let len = out.len();
            let yv = Rc::new(out.clone());
            self.push(
                len,
                Some(Box::new(move |g, grads| {
                    // d/dx (x/n) = (g - y * <y, g>) / n
                    let mut dot = F::zero();
                    for i in 0..len {
                        dot += yv[i] * g[i];
                    }
                    let buf = grads.buf_mut(xn);
                    for i in 0..len {
                        buf[i] += (g[i] - yv[i] * dot) * inv;
                    }
                })),
            )
        });
        Tensor { shape: x.shape().to_vec(), values: Rc::new(out), node }
    }

    /// Euclidean distance between two same-shaped tensors, as a scalar
    /// tensor. Zero distance has zero gradient (guarded sqrt).
    pub fn euclidean_distance(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let d = self.sub(a, b)?;
        let sq = self.mul(&d, &d)?;
        let s = self.sum(&sq);
        self.sqrt_guarded(&s)
    }
}

#[derive(Clone, Copy)]
enum RowBroadcast {
    Add,
    Sub,
    Mul,
}

#[cfg(test)]
mod tests {
    use crate::autodiff::params::ParamSet;
    use crate::autodiff::tape::Tape;

    fn grad_of<FBuild>(build: FBuild, input: Vec<f64>) -> (f64, Vec<f64>)
    where
        FBuild: Fn(&Tape<f64>, &crate::autodiff::tape::Tensor<f64>) -> crate::autodiff::tape::Tensor<f64>,
    {
        let tape = Tape::new();
        let n = input.len();
        let x = tape.watch(vec![n], input);
        let loss = build(&tape, &x);
        let mut params = ParamSet::new();
        let grads = tape.backward(&loss, &mut params).unwrap();
        (loss.scalar_value(), grads.wrt(&x))
    }

    #[test]
    fn square_loss_gradient() {
        // loss = x^2 at x = 3 -> d/dx = 6
        let (loss, g) = grad_of(|t, x| {
            let sq = t.mul(x, x).unwrap();
            t.sum(&sq)
        }, vec![3.0]);
        assert_eq!(loss, 9.0);
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn relu_gates_gradient() {
        let (loss, g) = grad_of(|t, x| {
            let r = t.relu(x);
            t.sum(&r)
        }, vec![-1.0, 0.0, 2.5]);
        assert_eq!(loss, 2.5);
        assert_eq!(g, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let (loss, g) = grad_of(|t, x| {
            let s = t.sigmoid(x);
            t.sum(&s)
        }, vec![0.0]);
        assert_eq!(loss, 0.5);
        // s(1 - s) = 0.25 at x = 0
        assert!((g[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mean_splits_gradient() {
        let (loss, g) = grad_of(|t, x| t.mean(x).unwrap(), vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(loss, 3.0);
        assert_eq!(g, vec![0.25; 4]);
    }

    #[test]
    fn sqrt_guarded_zero_has_zero_grad() {
        let (loss, g) = grad_of(|t, x| {
            let r = t.sqrt_guarded(x).unwrap();
            t.sum(&r)
        }, vec![0.0, 4.0]);
        assert_eq!(loss, 2.0);
        assert_eq!(g, vec![0.0, 0.25]);
    }

    #[test]
    fn col_max_routes_to_lowest_tied_row() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.watch(vec![3, 2], vec![1.0, 5.0, 7.0, 5.0, 7.0, 2.0]);
        let m = tape.col_max(&x).unwrap();
        assert_eq!(m.values(), &[7.0, 5.0]);
        let loss = tape.sum(&m);
        let mut params = ParamSet::new();
        let grads = tape.backward(&loss, &mut params).unwrap();
        // col 0: max 7 at row 1; col 1: 5 ties rows 0 and 2 -> row 0 wins
        assert_eq!(grads.wrt(&x), vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat0_splits_gradient_by_offset() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.watch(vec![1, 2], vec![1.0, 2.0]);
        let b = tape.watch(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let cat = tape.concat0(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[3, 2]);
        assert_eq!(cat.values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = tape.constant(vec![3, 2], vec![1.0, 10.0, 100.0, 1000.0, 1e4, 1e5]);
        let weighted = tape.mul(&cat, &w).unwrap();
        let loss = tape.sum(&weighted);
        let mut params = ParamSet::new();
        let grads = tape.backward(&loss, &mut params).unwrap();
        assert_eq!(grads.wrt(&a), vec![1.0, 10.0]);
        assert_eq!(grads.wrt(&b), vec![100.0, 1000.0, 1e4, 1e5]);
    }

    #[test]
    fn concat_of_vectors_is_plain_concatenation() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]);
        let b = tape.constant(vec![2], vec![3.0, 4.0]);
        let cat = tape.concat0(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[4]);
        assert_eq!(cat.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn reshape_aliases_the_same_node() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.watch(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let m = tape.reshape(&x, vec![2, 2]).unwrap();
        assert_eq!(m.node(), x.node());
        // Gradient through two aliases of the same node sums.
        let s1 = tape.sum(&m);
        let s2 = tape.sum(&x);
        let loss = tape.add(&s1, &s2).unwrap();
        let mut params = ParamSet::new();
        let grads = tape.backward(&loss, &mut params).unwrap();
        assert_eq!(grads.wrt(&x), vec![2.0; 4]);
    }

    #[test]
    fn transpose_round_trip() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.watch(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = tape.transpose2d(&x).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.values(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tape.transpose2d(&t).unwrap();
        assert_eq!(back.values(), x.values());
    }

    #[test]
    fn gather_rows_with_repeats_accumulates() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.watch(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let gathered = tape.gather_rows(&x, &[1, 1, 0]).unwrap();
        assert_eq!(gathered.values(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum(&gathered);
        let mut params = ParamSet::new();
        let grads = tape.backward(&loss, &mut params).unwrap();
        assert_eq!(grads.wrt(&x), vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn scatter_rows_adds_colliding_rows() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.watch(vec![3, 1], vec![1.0, 10.0, 100.0]);
        let s = tape.scatter_rows(&x, &[2, 0, 2], 3).unwrap();
        assert_eq!(s.values(), &[10.0, 0.0, 101.0]);
        let w = tape.constant(vec![3, 1], vec![1.0, 2.0, 3.0]);
        let loss = tape.sum(&tape.mul(&s, &w).unwrap());
        let mut params = ParamSet::new();
        let grads = tape.backward(&loss, &mut params).unwrap();
        assert_eq!(grads.wrt(&x), vec![3.0, 1.0, 3.0]);
    }

    #[test]
    fn l2_normalize_produces_unit_vector() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.watch(vec![2], vec![3.0, 4.0]);
        let y = tape.l2_normalize(&x);
        assert!((y.values()[0] - 0.6).abs() < 1e-15);
        assert!((y.values()[1] - 0.8).abs() < 1e-15);
        // Gradient is orthogonal to y: moving along x does not change ||y||.
        let w = tape.constant(vec![2], vec![1.0, 0.0]);
        let loss = tape.sum(&tape.mul(&y, &w).unwrap());
        let mut params = ParamSet::new();
        let grads = tape.backward(&loss, &mut params).unwrap();
        let g = grads.wrt(&x);
        let dot = g[0] * 0.6 + g[1] * 0.8;
        assert!(dot.abs() < 1e-15);
    }

    #[test]
    fn euclidean_distance_of_3_4_5_triangle() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.watch(vec![2], vec![3.0, 4.0]);
        let b = tape.constant(vec![2], vec![0.0, 0.0]);
        let d = tape.euclidean_distance(&a, &b).unwrap();
        assert_eq!(d.scalar_value(), 5.0);
        let mut params = ParamSet::new();
        let grads = tape.backward(&d, &mut params).unwrap();
        // d/da ||a|| = a / ||a||
        let g = grads.wrt(&a);
        assert!((g[0] - 0.6).abs() < 1e-15);
        assert!((g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn pow_exp_identity_fast_path_is_bit_exact() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![3], vec![0.001, 1.001, 7.25]);
        let e = tape.constant(vec![1], vec![1.0]);
        let y = tape.pow_exp(&x, &e).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn pow_exp_exponent_gradient() {
        // y = x^e, dy/de = x^e ln x; at x = e (Euler), e_exp = 2: dy/de = e^2
        let tape: Tape<f64> = Tape::new();
        let base = std::f64::consts::E;
        let x = tape.constant(vec![1], vec![base]);
        let e = tape.watch(vec![1], vec![2.0]);
        let y = tape.pow_exp(&x, &e).unwrap();
        let loss = tape.sum(&y);
        let mut params = ParamSet::new();
        let grads = tape.backward(&loss, &mut params).unwrap();
        assert!((grads.wrt(&e)[0] - base * base).abs() < 1e-12);
    }

    #[test]
    fn clamp_min_passes_gradient_at_boundary() {
        let (_, g) = grad_of(|t, x| {
            let c = t.clamp_min(x, 1.0);
            t.sum(&c)
        }, vec![0.5, 1.0, 2.0]);
        assert_eq!(g, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn row_vector_broadcasts() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.watch(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let v = tape.watch(vec![2], vec![10.0, 20.0]);
        let y = tape.mul_row_vec(&x, &v).unwrap();
        assert_eq!(y.values(), &[10.0, 40.0, 30.0, 80.0]);
        let loss = tape.sum(&y);
        let mut params = ParamSet::new();
        let grads = tape.backward(&loss, &mut params).unwrap();
        assert_eq!(grads.wrt(&x), vec![10.0, 20.0, 10.0, 20.0]);
        // dv[j] = sum of column j of x
        assert_eq!(grads.wrt(&v), vec![4.0, 6.0]);
    }
}
