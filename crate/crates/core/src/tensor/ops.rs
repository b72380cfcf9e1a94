//! Differentiable primitives. Every operation validates shapes, records its
//! value on the tape, and (when any input requires gradients) a closure that
//! maps the output gradient back to its inputs.

use super::kernels::{gemm, Corner};
use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Query rows per block in the fused attention kernel.
const ATTENTION_BLOCK: usize = 32;

/// `row ← softmax(alpha · row)`, stabilized by the row maximum.
fn scaled_softmax_in_place(row: &mut [f64], alpha: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (alpha * (*x - max)).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::contract(format!("{op}: expected a matrix, got shape {shape:?}"))),
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.record(out, &[a, b], |g, _| vec![Some(g.to_vec()), Some(g.to_vec())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.record(out, &[a, b], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a).clone(), self.value(b).clone());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.record(out, &[a, b], move |g, need| {
            let ga = need[0].then(|| g.iter().zip(y.data()).map(|(g, q)| g * q).collect());
            let gb = need[1].then(|| g.iter().zip(x.data()).map(|(g, p)| g * p).collect());
            vec![ga, gb]
        }))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let (x, y) = (self.value(a).clone(), self.value(b).clone());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p / q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.record(out, &[a, b], move |g, need| {
            let ga = need[0].then(|| g.iter().zip(y.data()).map(|(g, q)| g / q).collect());
            let gb = need[1].then(|| {
                g.iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(g, (p, q))| -g * p / (q * q))
                    .collect()
            });
            vec![ga, gb]
        }))
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let pick_a: Vec<bool> = x.data().iter().zip(y.data()).map(|(p, q)| p >= q).collect();
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| p.max(*q))
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.record(out, &[a, b], move |g, _| {
            let ga = g.iter().zip(&pick_a).map(|(g, &s)| if s { *g } else { 0.0 });
            let gb = g.iter().zip(&pick_a).map(|(g, &s)| if s { 0.0 } else { *g });
            vec![Some(ga.collect()), Some(gb.collect())]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.record(out, &[a], move |g, _| vec![Some(g.iter().map(|v| v * factor).collect())])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.record(out, &[a], |g, _| vec![Some(g.to_vec())])
    }

    /// Adds a length-`m` vector to every row of an `n×m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = matrix_dims("add_row", self.shape(a))?;
        if self.value(row).len() != m {
            return Err(mismatch("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let data = self
            .value(a)
            .data()
            .chunks(m)
            .flat_map(|c| c.iter().zip(&r).map(|(x, b)| x + b))
            .collect();
        let out = Tensor::from_parts(vec![n, m], data);
        Ok(self.record(out, &[a, row], move |g, need| {
            let grow = need[1].then(|| column_sums(g, m));
            vec![Some(g.to_vec()), grow]
        }))
    }

    fn unary<F, D>(&mut self, a: Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value(a).clone();
        let y = x.map(f);
        let y_saved = y.clone();
        self.record(y, &[a], move |g, _| {
            let grad = g
                .iter()
                .zip(x.data().iter().zip(y_saved.data()))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(grad)]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// Raises each element to a constant power.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            a,
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len();
        let out = Tensor::scalar(x.data().iter().sum());
        self.record(out, &[a], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.record(out, &[a], |g, _| vec![Some(g.to_vec())]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.shape(a))?;
        let out = Tensor::from_parts(vec![c, r], transpose_data(self.value(a).data(), r, c));
        Ok(self.record(out, &[a], move |g, _| vec![Some(transpose_data(g, c, r))]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let op = if b_transposed { "matmul_nt" } else { "matmul" };
        let (m, k) = matrix_dims(op, self.shape(a))?;
        let (br, bc) = matrix_dims(op, self.shape(b))?;
        let (kb, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.value(a).clone(), self.value(b).clone());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), false, y.data(), b_transposed, &mut out, false);
        self.count_macs((m * k * n) as u64);
        let out = Tensor::from_parts(vec![m, n], out);
        Ok(self.record(out, &[a, b], move |g, need| {
            // y is k×n (or n×k when transposed); g is m×n.
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, y.data(), !b_transposed, &mut ga, false);
                ga
            });
            let gb = need[1].then(|| {
                if b_transposed {
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, g, true, x.data(), false, &mut gb, false);
                    gb
                } else {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, x.data(), true, g, false, &mut gb, false);
                    gb
                }
            });
            vec![ga, gb]
        }))
    }

    /// `x · w + b` with `x: n×in`, `w: in×out`, `b: out`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split("softmax", &shape, axis)?;
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(shape, y);
        let y = out.clone();
        Ok(self.record(out, &[a], move |g, _| {
            let y = y.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        axis_split("concat", &base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.record(out, parts, move |g, need| {
            let mut grads: Vec<Option<Vec<f64>>> = need
                .iter()
                .zip(&lens)
                .map(|(&n, &len)| n.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            for o in 0..outer {
                let mut offset = o * total * inner;
                for (gp, &len) in grads.iter_mut().zip(&lens) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[offset..offset + len * inner]);
                    }
                    offset += len * inner;
                }
            }
            grads
        }))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, full, inner) = axis_split("slice", &shape, axis)?;
        if start + len > full {
            return Err(Error::contract(format!(
                "slice: range {start}..{} exceeds axis {axis} of {shape:?}",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let total = outer * full * inner;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.record(out, &[a], move |g, _| {
            let mut gx = vec![0.0; total];
            for o in 0..outer {
                let from = (o * full + start) * inner;
                gx[from..from + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = matrix_dims("gather_rows", self.shape(a))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::contract(format!("gather_rows: row {bad} of {n}")));
        }
        let src = self.value(a);
        let data = rows.iter().flat_map(|&r| src.row(r).iter().copied()).collect();
        let out = Tensor::from_parts(vec![rows.len(), m], data);
        let rows = rows.to_vec();
        Ok(self.record(out, &[a], move |g, _| {
            let mut gx = vec![0.0; n * m];
            for (i, &r) in rows.iter().enumerate() {
                for (d, s) in gx[r * m..(r + 1) * m].iter_mut().zip(&g[i * m..(i + 1) * m]) {
                    *d += s;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let m = *shape.last().ok_or_else(|| Error::contract("normalize_rows of a scalar"))?;
        let x = self.value(a).data();
        let norms: Vec<f64> = x
            .chunks(m)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if norms.iter().any(|&n| n == 0.0) {
            return Err(Error::contract("normalize_rows: zero row"));
        }
        let y: Vec<f64> = x
            .chunks(m)
            .zip(&norms)
            .flat_map(|(r, n)| r.iter().map(move |v| v / n))
            .collect();
        let out = Tensor::from_parts(shape, y.clone());
        Ok(self.record(out, &[a], move |g, _| {
            let mut gx = Vec::with_capacity(y.len());
            for ((yr, gr), n) in y.chunks(m).zip(g.chunks(m)).zip(&norms) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                gx.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * dot) / n));
            }
            vec![Some(gx)]
        }))
    }

    /// Row-wise layer normalization over the last dimension with learned gain
    /// and bias; variance epsilon is [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, m) = matrix_dims("layer_norm", self.shape(a))?;
        if self.value(gain).len() != m || self.value(bias).len() != m {
            return Err(mismatch("layer_norm", self.shape(a), self.shape(gain)));
        }
        let x = self.value(a).data();
        let gamma = self.value(gain).data().to_vec();
        let beta = self.value(bias).data();
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut y = vec![0.0; n * m];
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = s;
            for j in 0..m {
                let h = (row[j] - mu) * s;
                xhat[i * m + j] = h;
                y[i * m + j] = gamma[j] * h + beta[j];
            }
        }
        self.count_macs((n * m * 2) as u64);
        let out = Tensor::from_parts(vec![n, m], y);
        Ok(self.record(out, &[a, gain, bias], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    let gr = &g[i * m..(i + 1) * m];
                    let hr = &xhat[i * m..(i + 1) * m];
                    let dh: Vec<f64> = gr.iter().zip(&gamma).map(|(g, c)| g * c).collect();
                    let mean_dh = dh.iter().sum::<f64>() / m as f64;
                    let mean_dh_h = dh.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / m as f64;
                    for j in 0..m {
                        gx[i * m + j] = inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                gx
            });
            let ggain = need[1].then(|| {
                let mut acc = vec![0.0; m];
                for (gr, hr) in g.chunks(m).zip(xhat.chunks(m)) {
                    acc.iter_mut().zip(gr.iter().zip(hr)).for_each(|(a, (g, h))| *a += g * h);
                }
                acc
            });
            let gbias = need[2].then(|| column_sums(g, m));
            vec![gx, ggain, gbias]
        }))
    }

    /// Scaled dot-product attention `softmax(Q Kᵀ / √d) V`.
    ///
    /// Queries are processed in blocks of rows so the full score matrix is
    /// only materialized when it is needed for the backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (nq, dq) = matrix_dims("attention", self.shape(q))?;
        let (nk, dk) = matrix_dims("attention", self.shape(k))?;
        let (nv, dv) = matrix_dims("attention", self.shape(v))?;
        if dq != dk {
            return Err(mismatch("attention (Q vs K depth)", self.shape(q), self.shape(k)));
        }
        if nk != nv {
            return Err(mismatch("attention (K vs V rows)", self.shape(k), self.shape(v)));
        }
        let alpha = 1.0 / (dq as f64).sqrt();
        let keep = [q, k, v].iter().any(|&x| self.requires_grad(x));
        let (qt, kt, vt) = (self.value(q).clone(), self.value(k).clone(), self.value(v).clone());
        let mut out = vec![0.0; nq * dv];
        let mut probs = if keep { vec![0.0; nq * nk] } else { Vec::new() };
        let mut block = vec![0.0; ATTENTION_BLOCK.min(nq) * nk];
        for start in (0..nq).step_by(ATTENTION_BLOCK) {
            let rows = ATTENTION_BLOCK.min(nq - start);
            let s = &mut block[..rows * nk];
            gemm(rows, dq, nk, &qt.data()[start * dq..(start + rows) * dq], false, kt.data(), true, s, false);
            for row in s.chunks_mut(nk.max(1)) {
                scaled_softmax_in_place(row, alpha);
            }
            gemm(rows, nk, dv, s, false, vt.data(), false, &mut out[start * dv..(start + rows) * dv], false);
            if keep {
                probs[start * nk..(start + rows) * nk].copy_from_slice(s);
            }
        }
        self.count_macs((nq * nk * (dq + dv)) as u64);
        let out = Tensor::from_parts(vec![nq, dv], out);
        Ok(self.record(out, &[q, k, v], move |g, need| {
            let p = &probs;
            let gv = need[2].then(|| {
                let mut gv = vec![0.0; nk * dv];
                gemm(nk, nq, dv, p, true, g, false, &mut gv, false);
                gv
            });
            if !need[0] && !need[1] {
                return vec![None, None, gv];
            }
            // dS = α · P ⊙ (dP − rowsum(dP ⊙ P)) with dP = G Vᵀ.
            let mut ds = vec![0.0; nq * nk];
            gemm(nq, dv, nk, g, false, vt.data(), true, &mut ds, false);
            for (dr, pr) in ds.chunks_mut(nk.max(1)).zip(p.chunks(nk.max(1))) {
                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                dr.iter_mut().zip(pr).for_each(|(d, p)| *d = alpha * p * (*d - dot));
            }
            let gq = need[0].then(|| {
                let mut gq = vec![0.0; nq * dq];
                gemm(nq, nk, dq, &ds, false, kt.data(), false, &mut gq, false);
                gq
            });
            let gk = need[1].then(|| {
                let mut gk = vec![0.0; nk * dq];
                gemm(nk, nq, dq, &ds, true, qt.data(), false, &mut gk, false);
                gk
            });
            vec![gq, gk, gv]
        }))
    }

    /// Bilinear reads of an `H×W×d` map at fractional pixel locations.
    ///
    /// `points` is `P×2` holding `(x, y)` = (column, row). Neighbors outside
    /// the map read as zero. Differentiable in both the map and the points.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let [h, w, d] = *self.shape(map) else {
            return Err(Error::contract(format!(
                "bilinear_sample: map must be H×W×d, got {:?}",
                self.shape(map)
            )));
        };
        let (p, two) = matrix_dims("bilinear_sample", self.shape(points))?;
        if two != 2 {
            return Err(mismatch("bilinear_sample", &[p, 2], self.shape(points)));
        }
        let values = self.value(map).clone();
        let pts = self.value(points).clone();
        let mut out = vec![0.0; p * d];
        for i in 0..p {
            let (x, y) = (pts.data()[2 * i], pts.data()[2 * i + 1]);
            for c in Corner::around(x, y, h, w).into_iter().flatten() {
                let src = &values.data()[c.index * d..(c.index + 1) * d];
                for (o, s) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *o += c.weight * s;
                }
            }
        }
        self.count_macs((p * d * 4) as u64);
        let out = Tensor::from_parts(vec![p, d], out);
        Ok(self.record(out, &[map, points], move |g, need| {
            let mut gmap = need[0].then(|| vec![0.0; h * w * d]);
            let mut gpts = need[1].then(|| vec![0.0; p * 2]);
            for i in 0..p {
                let (x, y) = (pts.data()[2 * i], pts.data()[2 * i + 1]);
                let gi = &g[i * d..(i + 1) * d];
                for c in Corner::around(x, y, h, w).into_iter().flatten() {
                    if let Some(gm) = gmap.as_mut() {
                        for (t, s) in gm[c.index * d..(c.index + 1) * d].iter_mut().zip(gi) {
                            *t += c.weight * s;
                        }
                    }
                    if let Some(gp) = gpts.as_mut() {
                        let src = &values.data()[c.index * d..(c.index + 1) * d];
                        let dot: f64 = src.iter().zip(gi).map(|(a, b)| a * b).sum();
                        gp[2 * i] += c.dx * dot;
                        gp[2 * i + 1] += c.dy * dot;
                    }
                }
            }
            vec![gmap, gpts]
        }))
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn column_sums(g: &[f64], m: usize) -> Vec<f64> {
    let mut acc = vec![0.0; m];
    for r in g.chunks(m) {
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    acc
}

fn transpose_data(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
