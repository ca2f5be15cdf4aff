//! Dense row-major `f32` tensors.
//!
//! Storage is 32-bit; every reduction (matmul, sums, softmax normalizers)
//! accumulates in 64-bit and rounds once on write.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) && !shape.is_empty() {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    /// Like [`Tensor::new`] but panics on a shape/data mismatch. For literals.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        Self::new(shape, data).expect("shape and data length must agree")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f64, std).expect("std must be finite and nonnegative");
        let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a tensor viewed as a matrix over its last axis.
    pub fn as_matrix(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let (_, c) = self.as_matrix();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = check_matrix("matmul", self)?;
        let (k2, n) = check_matrix("matmul", other)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor::from_vec(
            &[m, n],
            matmul_nn(&self.data, &other.data, m, k, n),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = check_matrix("transpose", self)?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_vec(&[n, m], out))
    }

    /// Softmax along `axis`. Entries equal to `-inf` are treated as masked;
    /// a slice that is masked everywhere yields all zeros.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        Ok(self.softmax_with_flags(axis)?.0)
    }

    /// Softmax plus one flag per reduced slice, set when the slice was fully
    /// masked and therefore written as zeros.
    pub fn softmax_with_flags(&self, axis: usize) -> Result<(Tensor, Vec<bool>)> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0.0f32; self.data.len()];
        let mut flags = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0f32; len];
        let mut res = vec![0.0f32; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = self.data[base + t * inner];
                }
                let masked = softmax_slice(&buf, &mut res);
                flags.push(masked);
                for (t, r) in res.iter().enumerate() {
                    out[base + t * inner] = *r;
                }
            }
        }
        Ok((Tensor::from_vec(&self.shape, out), flags))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Numerically stable softmax of one slice. Returns true when every entry is
/// `-inf`, in which case `out` is zeroed.
pub(crate) fn softmax_slice(x: &[f32], out: &mut [f32]) -> bool {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return true;
    }
    let max = max as f64;
    let mut total = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = ((v as f64) - max).exp();
        total += e;
        *o = e as f32;
    }
    // Normalize from the f64 exponentials rather than the rounded f32 ones.
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (((v as f64) - max).exp() / total) as f32;
    }
    false
}

/// Mean cross-entropy of `logits` rows against `targets`, skipping rows whose
/// target equals `ignore_index`. Value only; see the tape for the
/// differentiable version.
pub fn cross_entropy(logits: &Tensor, targets: &[i32], ignore_index: i32) -> Result<f64> {
    let (n, v) = logits.as_matrix();
    if targets.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore_index {
            continue;
        }
        if t < 0 || t as usize >= v {
            return Err(Error::invalid(format!("target {t} outside [0, {v})")));
        }
        total += -log_softmax_at(logits.row(i), t as usize);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / count as f64)
}

/// `log softmax(row)[target]` computed in 64-bit.
pub(crate) fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let (max, lse) = log_sum_exp(row);
    row[target] as f64 - max - lse
}

/// Returns (max, log Σ exp(x - max)).
pub(crate) fn log_sum_exp(row: &[f32]) -> (f64, f64) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&x| ((x as f64) - max).exp()).sum();
    (max, s.ln())
}

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (x, &bv) in acc.iter_mut().zip(brow) {
                *x += av * bv as f64;
            }
        }
        for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = x as f32;
        }
    }
    out
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot64(arow, &b[j * k..(j + 1) * k]) as f32;
        }
    }
    out
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            for (x, &bv) in acc[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *x += av * bv as f64;
            }
        }
    }
    acc.into_iter().map(|x| x as f32).collect()
}

/// Dot product with four independent 64-bit accumulators.
pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        s[0] += a[i] as f64 * b[i] as f64;
        s[1] += a[i + 1] as f64 * b[i + 1] as f64;
        s[2] += a[i + 2] as f64 * b[i + 2] as f64;
        s[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    let mut total = (s[0] + s[1]) + (s[2] + s[3]);
    for i in chunks * 4..a.len() {
        total += a[i] as f64 * b[i] as f64;
    }
    total
}
