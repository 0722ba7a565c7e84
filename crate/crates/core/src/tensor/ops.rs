//! Operations on tensors, each with its reverse-mode rule.
//!
//! Convolution uses the cross-correlation convention (no kernel flip);
//! the finite-difference oracle in the test suite uses the same convention.

use super::{debug_check_finite, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[inline]
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

#[inline]
fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Splits `shape` at `axis` into (outer, axis length, inner) extents.
#[inline]
fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    // ---- elementwise binary ----------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        debug_check_finite("add", &data);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        debug_check_finite("sub", &data);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| {
                vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        debug_check_finite("mul", &data);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, _| {
                let a = parents[0].data();
                let b = parents[1].data();
                let da = g.iter().zip(b.iter()).map(|(g, b)| g * b).collect();
                let db = g.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("div", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a / b).collect();
        debug_check_finite("div", &data);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, _| {
                let a = parents[0].data();
                let b = parents[1].data();
                let da: Vec<f64> = g.iter().zip(b.iter()).map(|(g, b)| g / b).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    // ---- scalar forms ----------------------------------------------------

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    // ---- broadcast adds --------------------------------------------------

    /// Adds a length-D bias along the last dimension.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if bias.ndim() != 1 || bias.shape()[0] != d {
            return Err(Error::shape(format!(
                "add_bias: bias shape {:?} does not match last dim of {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        let b = bias.data();
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, _| {
                let mut db = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        ))
    }

    /// Adds a per-channel bias to a [B, C, H, W] tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.ndim() != 4 {
            return Err(Error::shape(format!(
                "add_channel_bias: expected 4-d input, got {:?}",
                self.shape()
            )));
        }
        let (c, hw) = (self.shape()[1], self.shape()[2] * self.shape()[3]);
        if bias.ndim() != 1 || bias.shape()[0] != c {
            return Err(Error::shape(format!(
                "add_channel_bias: bias shape {:?} does not match channels of {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        let b = bias.data();
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / hw) % c])
            .collect();
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, _| {
                let mut db = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    db[(i / hw) % c] += gi;
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        ))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shape(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let data = matmul_raw(&self.data(), &other.data(), m, k, n);
        debug_check_finite("matmul", &data);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents, _| {
                let da = if parents[0].tracked() {
                    // dA = G * B^T
                    let bt = transpose_raw(&parents[1].data(), k, n);
                    Some(matmul_raw(g, &bt, m, n, k))
                } else {
                    None
                };
                let db = if parents[1].tracked() {
                    // dB = A^T * G
                    let at = transpose_raw(&parents[0].data(), m, k);
                    Some(matmul_raw(&at, g, k, m, n))
                } else {
                    None
                };
                vec![da, db]
            }),
        ))
    }

    /// `x * w (+ bias)` for a 2-d input; weight layout is [in, out].
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::shape(format!(
                "transpose2d: expected 2-d, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let data = transpose_raw(&self.data(), r, c);
        Ok(Tensor::from_op(
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(transpose_raw(g, c, r))]),
        ))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(format!(
                "reshape: {:?} has {} elements, target {:?} has {}",
                self.shape(),
                self.len(),
                shape,
                n
            )));
        }
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::index(format!(
                "narrow: axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        if start + len > self.shape()[axis] || len == 0 {
            return Err(Error::index(format!(
                "narrow: range {start}..{} exceeds axis {axis} of shape {:?}",
                start + len,
                self.shape()
            )));
        }
        let (outer, mid, inner) = axis_dims(self.shape(), axis);
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let full = self.len();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; full];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Arbitrary element rearrangement: `out[i] = x[index[i]]`.
    /// Indices may repeat; the backward pass scatter-adds.
    pub fn gather_flat(&self, shape: Vec<usize>, index: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape(format!(
                "gather_flat: target {shape:?} needs {n} indices, got {}",
                index.len()
            )));
        }
        let src_len = self.len();
        if let Some(&bad) = index.iter().find(|&&i| i >= src_len) {
            return Err(Error::index(format!(
                "gather_flat: index {bad} out of range for {src_len} elements"
            )));
        }
        let src = self.data();
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        drop(src);
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; src_len];
                for (gi, &i) in g.iter().zip(index.iter()) {
                    dx[i] += gi;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat: empty input list".to_string()));
        }
        let first = parts[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::index(format!(
                "concat: axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total = 0usize;
        for p in parts {
            if p.ndim() != first.len() {
                return Err(Error::shape(format!(
                    "concat: rank mismatch {:?} vs {:?}",
                    p.shape(),
                    first
                )));
            }
            for (d, (&a, &b)) in p.shape().iter().zip(first.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(format!(
                        "concat: shapes {:?} and {:?} differ off-axis",
                        p.shape(),
                        first
                    )));
                }
            }
            total += p.shape()[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_dims(&shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        for (p, &len) in parts.iter().zip(&lens) {
            let src = p.data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let s = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&src[s..s + len * inner]);
            }
            offset += len;
        }
        let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor::from_op(
            shape,
            data,
            parents,
            Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(lens.len());
                let mut offset = 0usize;
                for &len in &lens {
                    let mut dp = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        dp[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    out.push(Some(dp));
                    offset += len;
                }
                out
            }),
        ))
    }

    // ---- unary activations -------------------------------------------------

    fn unary<F, D>(&self, name: &'static str, f: F, df: D) -> Tensor
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let data: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        debug_check_finite(name, &data);
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents, out| {
                let x = parents[0].data();
                let y = out.data();
                let dx = g
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { alpha * x },
            move |x, _| if x > 0.0 { 1.0 } else { alpha },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.unary(
            "gelu",
            |x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()),
            |x, _| {
                let t = (C * (x + A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn log(&self) -> Tensor {
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    /// Elementwise Smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
    pub fn smooth_l1(&self) -> Tensor {
        self.unary(
            "smooth_l1",
            |x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 },
            |x, _| x.clamp(-1.0, 1.0),
        )
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.len();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    // ---- softmax family -------------------------------------------------------

    /// Temperature softmax along `axis`, computed with max subtraction.
    pub fn softmax_t(&self, temperature: f64, axis: usize) -> Result<Tensor> {
        if temperature <= 0.0 {
            return Err(Error::domain(format!(
                "softmax_t: temperature must be positive, got {temperature}"
            )));
        }
        if axis >= self.ndim() {
            return Err(Error::shape(format!(
                "softmax_t: axis {axis} out of range for {:?}",
                self.shape()
            )));
        }
        let (outer, c, inner) = axis_dims(self.shape(), axis);
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * c + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..c {
                    mx = mx.max(x[at(j)] / temperature);
                }
                let mut z = 0.0;
                for j in 0..c {
                    let e = (x[at(j)] / temperature - mx).exp();
                    data[at(j)] = e;
                    z += e;
                }
                for j in 0..c {
                    data[at(j)] /= z;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, out| {
                let p = out.data();
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * c + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g[at(j)] * p[at(j)];
                        }
                        for j in 0..c {
                            dx[at(j)] = p[at(j)] * (g[at(j)] - dot) / temperature;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// log(softmax(x / T)) along `axis`; numerically stable.
    pub fn log_softmax_t(&self, temperature: f64, axis: usize) -> Result<Tensor> {
        if temperature <= 0.0 {
            return Err(Error::domain(format!(
                "log_softmax_t: temperature must be positive, got {temperature}"
            )));
        }
        if axis >= self.ndim() {
            return Err(Error::shape(format!(
                "log_softmax_t: axis {axis} out of range for {:?}",
                self.shape()
            )));
        }
        let (outer, c, inner) = axis_dims(self.shape(), axis);
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * c + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..c {
                    mx = mx.max(x[at(j)] / temperature);
                }
                let mut z = 0.0;
                for j in 0..c {
                    z += (x[at(j)] / temperature - mx).exp();
                }
                let lse = mx + z.ln();
                for j in 0..c {
                    data[at(j)] = x[at(j)] / temperature - lse;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, out| {
                let logp = out.data();
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * c + j) * inner + i;
                        let mut gsum = 0.0;
                        for j in 0..c {
                            gsum += g[at(j)];
                        }
                        for j in 0..c {
                            dx[at(j)] = (g[at(j)] - logp[at(j)].exp() * gsum) / temperature;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    // ---- convolution ------------------------------------------------------------

    /// 2-d cross-correlation of [B, C, H, W] with [O, C, kh, kw].
    pub fn conv2d(&self, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.ndim() != 4 || weight.ndim() != 4 {
            return Err(Error::shape(format!(
                "conv2d: expected 4-d input and weight, got {:?} and {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        if self.shape()[1] != weight.shape()[1] {
            return Err(Error::shape(format!(
                "conv2d: input channels {:?} do not match weight {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::domain("conv2d: stride must be >= 1".to_string()));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let x = self.data();
        let wt = weight.data();
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oi in 0..o {
                for ci in 0..c {
                    let xc = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    let wc = &wt[(oi * c + ci) * kh * kw..(oi * c + ci + 1) * kh * kw];
                    let oc = &mut out[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
                    for yo in 0..oh {
                        for ki in 0..kh {
                            let iy = (yo * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                            for kj in 0..kw {
                                let wv = wc[ki * kw + kj];
                                for xo in 0..ow {
                                    let ix = (xo * stride + kj) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    oc[yo * ow + xo] += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(wt);
        debug_check_finite("conv2d", &out);
        Ok(Tensor::from_op(
            vec![b, o, oh, ow],
            out,
            vec![self.clone(), weight.clone()],
            Box::new(move |g, parents, _| {
                let x = parents[0].data();
                let wt = parents[1].data();
                let dx = if parents[0].tracked() {
                    let mut dx = vec![0.0; b * c * h * w];
                    for bi in 0..b {
                        for oi in 0..o {
                            let gc = &g[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
                            for ci in 0..c {
                                let wc = &wt[(oi * c + ci) * kh * kw..(oi * c + ci + 1) * kh * kw];
                                let dxc = &mut dx[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                                for yo in 0..oh {
                                    for ki in 0..kh {
                                        let iy = (yo * stride + ki) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kj in 0..kw {
                                            let wv = wc[ki * kw + kj];
                                            for xo in 0..ow {
                                                let ix = (xo * stride + kj) as isize - padding as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                dxc[iy as usize * w + ix as usize] +=
                                                    wv * gc[yo * ow + xo];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Some(dx)
                } else {
                    None
                };
                let dw = if parents[1].tracked() {
                    let mut dw = vec![0.0; o * c * kh * kw];
                    for bi in 0..b {
                        for oi in 0..o {
                            let gc = &g[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
                            for ci in 0..c {
                                let xc = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                                let dwc =
                                    &mut dw[(oi * c + ci) * kh * kw..(oi * c + ci + 1) * kh * kw];
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        let mut acc = 0.0;
                                        for yo in 0..oh {
                                            let iy =
                                                (yo * stride + ki) as isize - padding as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for xo in 0..ow {
                                                let ix = (xo * stride + kj) as isize
                                                    - padding as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                acc += xc[iy as usize * w + ix as usize]
                                                    * gc[yo * ow + xo];
                                            }
                                        }
                                        dwc[ki * kw + kj] += acc;
                                    }
                                }
                            }
                        }
                    }
                    Some(dw)
                } else {
                    None
                };
                vec![dx, dw]
            }),
        ))
    }

    /// Transposed convolution (adjoint of `conv2d` in its data argument).
    /// Input [B, Ci, H, W], weight [Ci, Co, kh, kw]; output spatial size is
    /// (H - 1) * stride - 2 * padding + kh.
    pub fn conv_transpose2d(&self, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.ndim() != 4 || weight.ndim() != 4 {
            return Err(Error::shape(format!(
                "conv_transpose2d: expected 4-d input and weight, got {:?} and {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        if self.shape()[1] != weight.shape()[0] {
            return Err(Error::shape(format!(
                "conv_transpose2d: input channels {:?} do not match weight {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::domain("conv_transpose2d: stride must be >= 1".to_string()));
        }
        let (b, ci, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (co, kh, kw) = (weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        let oh = ((h - 1) * stride + kh) as isize - 2 * padding as isize;
        let ow = ((w - 1) * stride + kw) as isize - 2 * padding as isize;
        if oh < 1 || ow < 1 {
            return Err(Error::shape(format!(
                "conv_transpose2d: computed output size {oh}x{ow} is not positive"
            )));
        }
        let (oh, ow) = (oh as usize, ow as usize);

        let x = self.data();
        let wt = weight.data();
        let mut out = vec![0.0; b * co * oh * ow];
        for bi in 0..b {
            for cii in 0..ci {
                let xc = &x[(bi * ci + cii) * h * w..(bi * ci + cii + 1) * h * w];
                for coo in 0..co {
                    let wc = &wt[(cii * co + coo) * kh * kw..(cii * co + coo + 1) * kh * kw];
                    let oc = &mut out[(bi * co + coo) * oh * ow..(bi * co + coo + 1) * oh * ow];
                    for iy in 0..h {
                        for ki in 0..kh {
                            let oy = (iy * stride + ki) as isize - padding as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for ix in 0..w {
                                let xv = xc[iy * w + ix];
                                for kj in 0..kw {
                                    let ox = (ix * stride + kj) as isize - padding as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    oc[oy as usize * ow + ox as usize] += xv * wc[ki * kw + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(wt);
        debug_check_finite("conv_transpose2d", &out);
        Ok(Tensor::from_op(
            vec![b, co, oh, ow],
            out,
            vec![self.clone(), weight.clone()],
            Box::new(move |g, parents, _| {
                let x = parents[0].data();
                let wt = parents[1].data();
                let dx = if parents[0].tracked() {
                    let mut dx = vec![0.0; b * ci * h * w];
                    for bi in 0..b {
                        for cii in 0..ci {
                            let dxc = &mut dx[(bi * ci + cii) * h * w..(bi * ci + cii + 1) * h * w];
                            for coo in 0..co {
                                let wc =
                                    &wt[(cii * co + coo) * kh * kw..(cii * co + coo + 1) * kh * kw];
                                let gc = &g[(bi * co + coo) * oh * ow..(bi * co + coo + 1) * oh * ow];
                                for iy in 0..h {
                                    for ki in 0..kh {
                                        let oy = (iy * stride + ki) as isize - padding as isize;
                                        if oy < 0 || oy >= oh as isize {
                                            continue;
                                        }
                                        for ix in 0..w {
                                            for kj in 0..kw {
                                                let ox =
                                                    (ix * stride + kj) as isize - padding as isize;
                                                if ox < 0 || ox >= ow as isize {
                                                    continue;
                                                }
                                                dxc[iy * w + ix] += wc[ki * kw + kj]
                                                    * gc[oy as usize * ow + ox as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Some(dx)
                } else {
                    None
                };
                let dw = if parents[1].tracked() {
                    let mut dw = vec![0.0; ci * co * kh * kw];
                    for bi in 0..b {
                        for cii in 0..ci {
                            let xc = &x[(bi * ci + cii) * h * w..(bi * ci + cii + 1) * h * w];
                            for coo in 0..co {
                                let gc = &g[(bi * co + coo) * oh * ow..(bi * co + coo + 1) * oh * ow];
                                let dwc =
                                    &mut dw[(cii * co + coo) * kh * kw..(cii * co + coo + 1) * kh * kw];
                                for iy in 0..h {
                                    for ki in 0..kh {
                                        let oy = (iy * stride + ki) as isize - padding as isize;
                                        if oy < 0 || oy >= oh as isize {
                                            continue;
                                        }
                                        for ix in 0..w {
                                            let xv = xc[iy * w + ix];
                                            for kj in 0..kw {
                                                let ox =
                                                    (ix * stride + kj) as isize - padding as isize;
                                                if ox < 0 || ox >= ow as isize {
                                                    continue;
                                                }
                                                dwc[ki * kw + kj] +=
                                                    xv * gc[oy as usize * ow + ox as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Some(dw)
                } else {
                    None
                };
                vec![dx, dw]
            }),
        ))
    }

    // ---- normalization -----------------------------------------------------------

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layernorm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::domain(format!("layernorm: eps must be positive, got {eps}")));
        }
        let d = *self.shape().last().unwrap();
        if gamma.ndim() != 1 || gamma.shape()[0] != d || beta.ndim() != 1 || beta.shape()[0] != d {
            return Err(Error::shape(format!(
                "layernorm: gamma {:?} / beta {:?} do not match last dim {d} of {:?}",
                gamma.shape(),
                beta.shape(),
                self.shape()
            )));
        }
        let rows = self.len() / d;
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut data = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[r * d + j] = xh;
                data[r * d + j] = gm[j] * xh + bt[j];
            }
        }
        drop(x);
        drop(gm);
        drop(bt);
        debug_check_finite("layernorm", &data);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents, _| {
                let gm = parents[1].data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let istd = inv_std[r];
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dy = 0.0;
                    let mut mean_dy_xh = 0.0;
                    for j in 0..d {
                        let dy = gr[j] * gm[j];
                        mean_dy += dy;
                        mean_dy_xh += dy * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dy /= d as f64;
                    mean_dy_xh /= d as f64;
                    for j in 0..d {
                        let dy = gr[j] * gm[j];
                        dx[r * d + j] = istd * (dy - mean_dy - xh[j] * mean_dy_xh);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    /// Batch normalization over [B, C, H, W] in training mode: normalizes by
    /// batch statistics and returns (output, per-channel mean, biased var) so
    /// the caller can maintain running buffers.
    pub fn batchnorm2d_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (c, m) = self.batchnorm_dims(gamma, beta, eps)?;
        let (b, h, w) = (self.shape()[0], self.shape()[2], self.shape()[3]);
        let x = self.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let hw = h * w;
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                s += x[base..base + hw].iter().sum::<f64>();
            }
            mean[ci] = s / m as f64;
            let mut v = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                v += x[base..base + hw].iter().map(|u| (u - mean[ci]) * (u - mean[ci])).sum::<f64>();
            }
            var[ci] = v / m as f64;
        }
        let gm = gamma.data();
        let bt = beta.data();
        let mut data = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let istd = 1.0 / (var[ci] + eps).sqrt();
                let base = (bi * c + ci) * hw;
                for k in 0..hw {
                    let xh = (x[base + k] - mean[ci]) * istd;
                    xhat[base + k] = xh;
                    data[base + k] = gm[ci] * xh + bt[ci];
                }
            }
        }
        drop(x);
        drop(gm);
        drop(bt);
        debug_check_finite("batchnorm2d", &data);
        let var_ret = var.clone();
        let mean_ret = mean;
        let out = Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents, _| {
                let gm = parents[1].data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ci in 0..c {
                    let istd = 1.0 / (var[ci] + eps).sqrt();
                    let mut mean_dy = 0.0;
                    let mut mean_dy_xh = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            let dy = g[base + k] * gm[ci];
                            mean_dy += dy;
                            mean_dy_xh += dy * xhat[base + k];
                            dgamma[ci] += g[base + k] * xhat[base + k];
                            dbeta[ci] += g[base + k];
                        }
                    }
                    mean_dy /= m as f64;
                    mean_dy_xh /= m as f64;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            let dy = g[base + k] * gm[ci];
                            dx[base + k] = istd * (dy - mean_dy - xhat[base + k] * mean_dy_xh);
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        );
        Ok((out, mean_ret, var_ret))
    }

    /// Batch normalization in inference mode using fixed running statistics.
    pub fn batchnorm2d_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let (c, _) = self.batchnorm_dims(gamma, beta, eps)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(format!(
                "batchnorm2d_eval: running stats length {} / {} do not match {c} channels",
                running_mean.len(),
                running_var.len()
            )));
        }
        let (b, h, w) = (self.shape()[0], self.shape()[2], self.shape()[3]);
        let hw = h * w;
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut data = vec![0.0; x.len()];
        let mut scale = vec![0.0; c];
        for ci in 0..c {
            scale[ci] = gm[ci] / (running_var[ci] + eps).sqrt();
        }
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for k in 0..hw {
                    data[base + k] = scale[ci] * (x[base + k] - running_mean[ci]) + bt[ci];
                }
            }
        }
        drop(x);
        drop(gm);
        drop(bt);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents, out| {
                let x = parents[0].data();
                let gm = parents[1].data();
                let bt = parents[2].data();
                let y = out.data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            dx[base + k] = g[base + k] * scale[ci];
                            // xhat reconstructed from the affine output.
                            let xh = if gm[ci] != 0.0 {
                                (y[base + k] - bt[ci]) / gm[ci]
                            } else {
                                let _ = &x;
                                0.0
                            };
                            dgamma[ci] += g[base + k] * xh;
                            dbeta[ci] += g[base + k];
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    fn batchnorm_dims(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(usize, usize)> {
        if eps <= 0.0 {
            return Err(Error::domain(format!("batchnorm2d: eps must be positive, got {eps}")));
        }
        if self.ndim() != 4 {
            return Err(Error::shape(format!(
                "batchnorm2d: expected [B, C, H, W], got {:?}",
                self.shape()
            )));
        }
        let c = self.shape()[1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm2d: gamma {:?} / beta {:?} do not match {c} channels",
                gamma.shape(),
                beta.shape()
            )));
        }
        let m = self.shape()[0] * self.shape()[2] * self.shape()[3];
        Ok((c, m))
    }

    // ---- stochastic layers ------------------------------------------------------

    /// Inverted dropout with a seeded mask. Identity when not training.
    pub fn dropout(&self, p: f64, rng: &mut Rng, training: bool) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain(format!("dropout: probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.len())
            .map(|_| if rng.next_f64() >= p { scale } else { 0.0 })
            .collect();
        let data: Vec<f64> = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())]
            }),
        ))
    }

    /// Row lookup into an embedding table of shape [V, D].
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::shape(format!(
                "embedding: table must be 2-d, got {:?}",
                self.shape()
            )));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::index(format!(
                "embedding: id {bad} out of range for table with {v} rows"
            )));
        }
        let table = self.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&table[i * d..(i + 1) * d]);
        }
        drop(table);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dt = vec![0.0; v * d];
                for (row, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[row * d + j];
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }

    // ---- composite losses ---------------------------------------------------------

    /// Mean binary cross-entropy with logits; `targets` is treated as a
    /// constant (no gradient flows to it).
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Tensor> {
        check_same_shape("bce_with_logits", self, targets)?;
        let y = targets.to_vec();
        let n = self.len() as f64;
        let loss = self
            .data()
            .iter()
            .zip(&y)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, parents, _| {
                let x = parents[0].data();
                let dx = x
                    .iter()
                    .zip(&y)
                    .map(|(&x, &t)| g[0] * (sigmoid_scalar(x) - t) / n)
                    .collect();
                vec![Some(dx)]
            }),
        ))
    }
}

#[inline]
fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of a list of scalar tensors as a graph node.
pub fn mean_of(terms: &[Tensor]) -> Result<Tensor> {
    if terms.is_empty() {
        return Err(Error::contract("mean_of: empty term list".to_string()));
    }
    let refs: Vec<&Tensor> = terms.iter().collect();
    Ok(Tensor::concat(&refs, 0)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(i2.matmul(&a).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = t(vec![1, 2], vec![1.0, 2.0]);
        let b = t(vec![2, 1], vec![3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::Rng::new(31);
        let a = Tensor::randn(vec![4, 5], &mut rng);
        let b = Tensor::randn(vec![5, 3], &mut rng);
        let c = a.matmul(&b).unwrap();
        // Independent brute-force triple loop.
        let (ad, bd) = (a.to_vec(), b.to_vec());
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += ad[i * 5 + k] * bd[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 3], vec![0.0; 6]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn softmax_symmetry_and_analytic_cases() {
        let x = t(vec![2], vec![0.0, 0.0]);
        assert_eq!(x.softmax_t(1.0, 0).unwrap().to_vec(), vec![0.5, 0.5]);

        let x = t(vec![2], vec![3.0f64.ln(), 0.0]);
        let p = x.softmax_t(1.0, 0).unwrap();
        assert!((p.data()[0] - 0.75).abs() < 1e-12);
        assert!((p.data()[1] - 0.25).abs() < 1e-12);

        // (2, 0) at T = 2 reduces to the scalar oracle e / (e + 1).
        let x = t(vec![2], vec![2.0, 0.0]);
        let p = x.softmax_t(2.0, 0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.data()[0] - 0.73106).abs() < 1e-5);
        assert!((p.data()[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = t(vec![2], vec![1.0, 2.0]);
        assert!(matches!(x.softmax_t(0.0, 0), Err(Error::Domain(_))));
        assert!(matches!(x.softmax_t(-1.0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = crate::rng::Rng::new(9);
        for _ in 0..20 {
            let x = Tensor::randn(vec![3, 5], &mut rng);
            let p = x.softmax_t(1.7, 1).unwrap();
            for r in 0..3 {
                let s: f64 = p.data()[r * 5..(r + 1) * 5].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            let shifted = x.add_scalar(13.5);
            let q = shifted.softmax_t(1.7, 1).unwrap();
            for (a, b) in p.data().iter().zip(q.data().iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = t(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let w = t(vec![1, 1, 1, 1], vec![1.0]);
        let y = x.conv2d(&w, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let x = t(vec![1, 1, 2, 2], vec![1.0; 4]);
        let w = t(vec![1, 1, 2, 2], vec![1.0; 4]);
        let y = x.conv2d(&w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 4.0);
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        let mut rng = crate::rng::Rng::new(77);
        let x = Tensor::randn(vec![1, 2, 5, 5], &mut rng);
        let w = Tensor::randn(vec![3, 2, 3, 3], &mut rng);
        for &(s, p) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let y = x.conv2d(&w, s, p).unwrap();
            let oh = (5 + 2 * p - 3) / s + 1;
            let xd = x.to_vec();
            let wd = w.to_vec();
            for o in 0..3 {
                for yo in 0..oh {
                    for xo in 0..oh {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (yo * s + ki) as isize - p as isize;
                                    let ix = (xo * s + kj) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                        continue;
                                    }
                                    acc += xd[(c * 5 + iy as usize) * 5 + ix as usize]
                                        * wd[((o * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                        let got = y.data()[(o * oh + yo) * oh + xo];
                        assert!((got - acc).abs() < 1e-12, "mismatch at s={s} p={p}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let x = t(vec![1, 1, 2, 2], vec![0.0; 4]);
        let w = t(vec![1, 1, 4, 4], vec![0.0; 16]);
        assert!(matches!(x.conv2d(&w, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_transpose_shape_formula() {
        let x = t(vec![1, 1, 7, 7], vec![0.5; 49]);
        let w = t(vec![1, 1, 4, 4], vec![0.1; 16]);
        let y = x.conv_transpose2d(&w, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 14, 14]);
    }

    #[test]
    fn conv_transpose_identity() {
        let x = t(vec![1, 1, 1, 1], vec![3.5]);
        let w = t(vec![1, 1, 1, 1], vec![1.0]);
        let y = x.conv_transpose2d(&w, 1, 0).unwrap();
        assert_eq!(y.to_vec(), vec![3.5]);
    }

    #[test]
    fn conv_adjoint_identity() {
        // <conv(x), y> == <x, convT(y)> with shared weights. Geometry chosen
        // so (H + 2p - k) divides the stride and shapes invert exactly.
        let rng = crate::rng::Rng::new(123);
        for seed in 0..5u64 {
            let mut r = rng.child(seed);
            let x = Tensor::randn(vec![1, 2, 6, 6], &mut r);
            let w = Tensor::randn(vec![3, 2, 4, 4], &mut r);
            let cx = x.conv2d(&w, 2, 1).unwrap();
            let y = Tensor::randn(cx.shape().to_vec(), &mut r);
            let lhs: f64 = cx.data().iter().zip(y.data().iter()).map(|(a, b)| a * b).sum();
            let cty = y.conv_transpose2d(&w, 2, 1).unwrap();
            assert_eq!(cty.shape(), x.shape());
            let rhs: f64 = x.data().iter().zip(cty.data().iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "adjoint violated: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_transpose_rejects_nonpositive_output() {
        let x = t(vec![1, 1, 1, 1], vec![1.0]);
        let w = t(vec![1, 1, 2, 2], vec![0.0; 4]);
        assert!(matches!(x.conv_transpose2d(&w, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn layernorm_constant_slice_is_zero() {
        let x = t(vec![2, 4], vec![3.0; 8]);
        let gamma = t(vec![4], vec![1.0; 4]);
        let beta = t(vec![4], vec![0.0; 4]);
        let y = x.layernorm(&gamma, &beta, 1e-5).unwrap();
        for v in y.data().iter() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layernorm_already_normalized() {
        let x = t(vec![2], vec![1.0, -1.0]);
        let gamma = t(vec![2], vec![1.0, 1.0]);
        let beta = t(vec![2], vec![0.0, 0.0]);
        let y = x.layernorm(&gamma, &beta, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!((y.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_moments() {
        let mut rng = crate::rng::Rng::new(4);
        let x = Tensor::randn(vec![3, 16], &mut rng);
        let gamma = Tensor::ones(vec![16]);
        let beta = Tensor::zeros(vec![16]);
        let y = x.layernorm(&gamma, &beta, 1e-10).unwrap();
        for r in 0..3 {
            let row = &y.data()[r * 16..(r + 1) * 16];
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_masks() {
        let mut rng = crate::rng::Rng::new(8);
        let x = t(vec![100], vec![1.0; 100]);
        let y = x.dropout(0.3, &mut rng, false).unwrap();
        assert_eq!(y.to_vec(), vec![1.0; 100]);
        let z = x.dropout(0.3, &mut rng, true).unwrap();
        let kept = z.data().iter().filter(|v| **v != 0.0).count();
        assert!(kept > 50 && kept < 90, "kept {kept}");
        let scale = 1.0 / 0.7;
        for v in z.data().iter() {
            assert!(*v == 0.0 || (*v - scale).abs() < 1e-12);
        }
        assert!(matches!(x.dropout(1.0, &mut rng, true), Err(Error::Domain(_))));
    }

    #[test]
    fn embedding_lookup_and_bounds() {
        let table = t(vec![3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let rows = table.embedding(&[2, 0]).unwrap();
        assert_eq!(rows.to_vec(), vec![20.0, 21.0, 0.0, 1.0]);
        assert!(matches!(table.embedding(&[3]), Err(Error::Index(_))));
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let x = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let left = x.narrow(1, 0, 1).unwrap();
        let right = x.narrow(1, 1, 2).unwrap();
        assert_eq!(left.to_vec(), vec![1.0, 4.0]);
        assert_eq!(right.to_vec(), vec![2.0, 3.0, 5.0, 6.0]);
        let back = Tensor::concat(&[&left, &right], 1).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn bce_with_logits_analytic_points() {
        let ln2 = std::f64::consts::LN_2;
        let x = t(vec![1], vec![0.0]);
        let y = t(vec![1], vec![1.0]);
        assert!((x.bce_with_logits(&y).unwrap().item() - ln2).abs() < 1e-12);
        let x = t(vec![1], vec![20.0]);
        assert!(x.bce_with_logits(&y).unwrap().item() < 1e-8);
        // Negative logit with target 0: loss = ln(1 + e^{-2}).
        let x = t(vec![1], vec![-2.0]);
        let y0 = t(vec![1], vec![0.0]);
        let expect = (1.0f64 + (-2.0f64).exp()).ln();
        assert!((x.bce_with_logits(&y0).unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_branch_values() {
        let d = t(vec![3], vec![0.5, 1.0, -2.0]);
        let y = d.smooth_l1();
        assert!((y.data()[0] - 0.125).abs() < 1e-12);
        assert!((y.data()[1] - 0.5).abs() < 1e-12);
        assert!((y.data()[2] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_c1_at_boundary() {
        // Value and slope from both branches agree at |d| = 1.
        let quad = |d: f64| 0.5 * d * d;
        let lin = |d: f64| d.abs() - 0.5;
        assert!((quad(1.0) - lin(1.0)).abs() < 1e-9);
        let h = 1e-7;
        let slope_quad = (quad(1.0) - quad(1.0 - h)) / h;
        let slope_lin = (lin(1.0 + h) - lin(1.0)) / h;
        assert!((slope_quad - slope_lin).abs() < 1e-6);
    }

    #[test]
    fn gather_flat_permutes_and_scatters() {
        let x = Tensor::param(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.gather_flat(vec![4], vec![3, 2, 1, 0]).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 3.0, 2.0, 1.0]);
        let loss = y.narrow(0, 0, 1).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }
}
