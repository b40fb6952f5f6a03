//! Dense row-major `f64` tensors and the kernels the encoder is built from.
//!
//! Tensors own their data and are never strided views: reshape, transpose and
//! slice all copy. Every kernel is a pure function of its inputs.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Build from a shape that is known to be valid (internal kernels only).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Rank-1 tensor. Panics on empty input.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Self::from_parts(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Elementwise product of equal-shaped tensors.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "hadamard", |x, y| x * y)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "sub", |x, y| x - y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

/// Adds `bias` (length = last dim of `x`) to every last-axis row of `x`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if bias.numel() != n {
        return Err(Error::shape("add_bias", x.shape(), bias.shape()));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

/// d/dv of the exact erf GELU.
pub fn gelu_grad_scalar(v: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + v * pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// (outer, axis_len, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::InvalidAxis { op, axis, rank: x.rank() });
    }
    Ok(())
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x, axis)?;
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x.data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x.data[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Normalizes every last-axis slice to zero mean and unit variance, then
/// applies the affine `gamma`/`beta`. Variance is the biased (population) one.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.last_dim();
    if gamma.numel() != n {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if beta.numel() != n {
        return Err(Error::shape("layer_norm", x.shape(), beta.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data.chunks(n) {
        let (mean, rstd) = row_stats(row, eps);
        for (j, &v) in row.iter().enumerate() {
            out.push((v - mean) * rstd * gamma.data[j] + beta.data[j]);
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Mean and reciprocal standard deviation of a row.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `[.., m, k] x [k, n]` for rank >= 2 left operands, treating leading axes as rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() != 2 || a.last_dim() != b.shape[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let k = b.shape[0];
    let n = b.shape[1];
    let m = a.numel() / k;
    let out = gemm(&a.data, &b.data, m, k, n);
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

/// Plain row-major `m x k` by `k x n` product.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Batched `[B, m, k] x [B, k, n]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
        return Err(Error::shape("bmm", a.shape(), b.shape()));
    }
    let (batch, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
    let mut out = Vec::with_capacity(batch * m * n);
    for i in 0..batch {
        out.extend(gemm(
            &a.data[i * m * k..(i + 1) * m * k],
            &b.data[i * k * n..(i + 1) * k * n],
            m,
            k,
            n,
        ));
    }
    Ok(Tensor::from_parts(vec![batch, m, n], out))
}

/// Swaps the last two axes.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::InvalidAxis { op: "transpose", axis: 1, rank: x.rank() });
    }
    let r = x.rank();
    let (rows, cols) = (x.shape[r - 2], x.shape[r - 1]);
    let batch = x.numel() / (rows * cols);
    let mut out = vec![0.0; x.numel()];
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = x.data[base + i * cols + j];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.swap(r - 2, r - 1);
    Ok(Tensor::from_parts(shape, out))
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != x.numel() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape("reshape", x.shape(), shape));
    }
    Ok(Tensor::from_parts(shape.to_vec(), x.data.clone()))
}

/// Half-open range `[start, end)` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    check_axis("slice", x, axis)?;
    if start >= end || end > x.shape[axis] {
        return Err(Error::InvalidArgument(format!(
            "slice [{start}, {end}) out of bounds for axis {axis} of {:?}",
            x.shape
        )));
    }
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&x.data[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = end - start;
    Ok(Tensor::from_parts(shape, out))
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Empty("concat"))?;
    check_axis("concat", first, axis)?;
    for p in &parts[1..] {
        let compatible = p.rank() == first.rank()
            && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for o in 0..outer {
        for p in parts {
            let chunk = p.numel() / outer;
            out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    Ok(Tensor::from_parts(shape, out))
}

/// Keep-mask scaled by `1/(1-rate)`: entries are either 0 or the scale.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Inverted dropout. Identity when `train` is false or `rate` is zero.
pub fn dropout(x: &Tensor, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), rate, rng);
    hadamard(x, &mask)
}

pub fn sum(x: &Tensor) -> f64 {
    x.data.iter().sum()
}

pub fn mean(x: &Tensor) -> f64 {
    sum(x) / x.numel() as f64
}

/// Index of the maximum along the last axis for every row; ties resolve to
/// the lowest index.
pub fn argmax_last(x: &Tensor) -> Vec<usize> {
    x.data
        .chunks(x.last_dim())
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
