//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive as it is evaluated. Calling
//! [`Tape::backward`] on a scalar replays the records in reverse and returns
//! one gradient per `requires_grad` leaf. Parameters can be borrowed onto the
//! tape without copying.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{dot64, log_sum_exp, matmul_nn, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions each query may attend to.
///
/// Tokens are split into contiguous segments; attention never crosses a
/// segment boundary. Inside a segment a key is visible iff `key_valid` is
/// unset or true at that key.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub segments: Vec<(usize, usize)>,
    pub key_valid: Option<Vec<bool>>,
}

impl AttentionMask {
    /// One segment covering `n` tokens, every key visible.
    pub fn full(n: usize) -> Self {
        AttentionMask {
            segments: vec![(0, n)],
            key_valid: None,
        }
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    fn validate(&self, n: usize) -> Result<()> {
        let mut expect = 0;
        for &(start, len) in &self.segments {
            if start != expect || len == 0 {
                return Err(Error::invalid(format!(
                    "attention segments must tile the sequence contiguously, got {:?}",
                    self.segments
                )));
            }
            expect = start + len;
        }
        if expect != n {
            return Err(Error::invalid(format!(
                "attention mask covers {expect} tokens, input has {n}"
            )));
        }
        if let Some(kv) = &self.key_valid {
            if kv.len() != n {
                return Err(Error::invalid("key_valid length mismatch"));
            }
        }
        Ok(())
    }

    fn visible(&self, j: usize) -> bool {
        self.key_valid.as_ref().is_none_or(|kv| kv[j])
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    Gelu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Option<Var>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        n_heads: usize,
        head_dim: usize,
        cos: Vec<f32>,
        sin: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        head_dim: usize,
        scale: f64,
        segments: Vec<(usize, usize)>,
        probs: Vec<f32>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<i32>,
        ignore_index: i32,
        allowed: Option<Vec<bool>>,
        count: usize,
    },
    SegmentMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    L2NormalizeRows {
        x: Var,
        inv_norm: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Vec<f32>,
    },
    Reshape(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
    is_leaf: bool,
    scalar64: Option<f64>,
}

/// Records primitive operations for one forward/backward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    record: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that evaluates values only; nothing is differentiable.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrow a tensor onto the tape. Its `requires_grad` flag decides
    /// whether backward produces a gradient for it.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        let needs = self.record && t.requires_grad();
        self.push_leaf(Cow::Borrowed(t), needs)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = self.record && t.requires_grad();
        self.push_leaf(Cow::Owned(t), needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            is_leaf: true,
            scalar64: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], scalar64: Option<f64>) -> Var {
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
            is_leaf: false,
            scalar64,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of `v`, using the 64-bit accumulator when the op kept one.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.scalar64.unwrap_or(n.value.data()[0] as f64)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mat(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul", a)?;
        let (k2, n) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), &[a, b], None))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul_bt", a)?;
        let (n, k2) = self.mat("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_bt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_vec(&[m, n], out), Op::MatMulBt(a, b), &[a, b], None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Add(a, b), &[a, b], None))
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.value(x).as_matrix();
        if self.value(bias).numel() != d {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(r, b)| r + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_vec(&shape, out), Op::AddRow(x, bias), &[x, bias], None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Mul(a, b), &[a, b], None))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out: Vec<f32> = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Scale(x, factor), &[x], None)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let v = v as f64;
                (v * sigmoid(v)) as f32
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Silu(x), &[x], None)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| gelu(v as f64).0 as f32)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Gelu(x), &[x], None)
    }

    /// Row-wise `gain · x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).as_matrix();
        if self.value(gain).numel() != d {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let mut out = vec![0.0f32; n * d];
        let mut inv_rms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let ms = dot64(row, row) / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            // A zero row with eps = 0 has no scale; pass the zeros through.
            let inv = if inv.is_finite() { inv } else { 0.0 };
            inv_rms.push(inv);
            for j in 0..d {
                out[i * d + j] = (g[j] as f64 * row[j] as f64 * inv) as f32;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::RmsNorm { x, gain, inv_rms },
            &[x, gain],
            None,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Option<Var>, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).as_matrix();
        if self.value(gain).numel() != d || bias.is_some_and(|b| self.value(b).numel() != d) {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0f32; n * d];
        let mut means = Vec::with_capacity(n);
        let mut inv_stds = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let inv = if inv.is_finite() { inv } else { 0.0 };
            for j in 0..d {
                let mut y = g[j] as f64 * (row[j] as f64 - mean) * inv;
                if let Some(b) = b {
                    y += b[j] as f64;
                }
                out[i * d + j] = y as f32;
            }
            means.push(mean);
            inv_stds.push(inv);
        }
        let shape = self.shape(x).to_vec();
        let mut inputs = vec![x, gain];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                inv_std: inv_stds,
            },
            &inputs,
            None,
        ))
    }

    /// Selects rows of a `[rows, d]` table; also used for embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.mat("gather_rows", table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::UnknownToken {
                    id: id as u32,
                    vocab: rows,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_vec(&[ids.len(), d], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            None,
        ))
    }

    /// Rotates consecutive pairs `(x[2i], x[2i+1])` of every head. `cos` and
    /// `sin` are `[tokens, head_dim / 2]` tables shared by all heads.
    pub fn rope(
        &mut self,
        x: Var,
        n_heads: usize,
        head_dim: usize,
        cos: Vec<f32>,
        sin: Vec<f32>,
    ) -> Result<Var> {
        let (n, w) = self.mat("rope", x)?;
        let half = head_dim / 2;
        if !head_dim.is_multiple_of(2) || w != n_heads * head_dim || cos.len() != n * half || sin.len() != n * half
        {
            return Err(Error::invalid(format!(
                "rope: width {w}, heads {n_heads}, head_dim {head_dim}, table {}",
                cos.len()
            )));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0f32; n * w];
        for t in 0..n {
            let c = &cos[t * half..(t + 1) * half];
            let s = &sin[t * half..(t + 1) * half];
            for h in 0..n_heads {
                let base = t * w + h * head_dim;
                for i in 0..half {
                    let x0 = xs[base + 2 * i] as f64;
                    let x1 = xs[base + 2 * i + 1] as f64;
                    let (ci, si) = (c[i] as f64, s[i] as f64);
                    out[base + 2 * i] = (x0 * ci - x1 * si) as f32;
                    out[base + 2 * i + 1] = (x0 * si + x1 * ci) as f32;
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[n, w], out),
            Op::Rope {
                x,
                n_heads,
                head_dim,
                cos,
                sin,
            },
            &[x],
            None,
        ))
    }

    /// Exact multi-head scaled dot-product attention over `[tokens,
    /// n_heads·head_dim]` projections. `scale` multiplies the logits
    /// (normally `1/sqrt(head_dim)`). Queries with no visible key produce a
    /// zero output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        head_dim: usize,
        scale: f64,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let (n, w) = self.mat("attention", q)?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if w != n_heads * head_dim {
            return Err(Error::invalid(format!(
                "attention width {w} != {n_heads} x {head_dim}"
            )));
        }
        mask.validate(n)?;
        let keep = self.needs(&[q, k, v]);
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0f32; n * w];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        let mut acc = vec![0.0f64; head_dim];
        for &(start, len) in &mask.segments {
            scores.resize(len, 0.0f64);
            for h in 0..n_heads {
                let off = h * head_dim;
                for i in start..start + len {
                    let qi = &qs[i * w + off..i * w + off + head_dim];
                    let mut max = f64::NEG_INFINITY;
                    for (jj, s) in scores.iter_mut().enumerate() {
                        let j = start + jj;
                        *s = if mask.visible(j) {
                            dot64(qi, &ks[j * w + off..j * w + off + head_dim]) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                        max = max.max(*s);
                    }
                    if max == f64::NEG_INFINITY {
                        if keep {
                            probs.extend(std::iter::repeat_n(0.0f32, len));
                        }
                        continue;
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for (jj, s) in scores.iter_mut().enumerate() {
                        *s /= total;
                        if *s == 0.0 {
                            continue;
                        }
                        let j = start + jj;
                        let vj = &vs[j * w + off..j * w + off + head_dim];
                        for (a, &vv) in acc.iter_mut().zip(vj) {
                            *a += *s * vv as f64;
                        }
                    }
                    for (o, a) in out[i * w + off..i * w + off + head_dim].iter_mut().zip(&acc) {
                        *o = *a as f32;
                    }
                    if keep {
                        probs.extend(scores.iter().map(|&p| p as f32));
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[n, w], out),
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                head_dim,
                scale,
                segments: mask.segments.clone(),
                probs,
            },
            &[q, k, v],
            None,
        ))
    }

    /// Softmax over the last axis; `-inf` entries are masked.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, d) = t.as_matrix();
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            crate::tensor::softmax_slice(t.row(i), &mut out[i * d..(i + 1) * d]);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::SoftmaxRows(x), &[x], None)
    }

    /// Mean cross-entropy over rows whose target is not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i32], ignore_index: i32) -> Result<Var> {
        self.cross_entropy_masked(logits, targets, ignore_index, None)
    }

    /// Cross-entropy where only classes with `allowed[row * V + class]` take
    /// part in the normalizer. The target class must be allowed.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[i32],
        ignore_index: i32,
        allowed: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (n, vocab) = self.value(logits).as_matrix();
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if allowed.as_ref().is_some_and(|a| a.len() != n * vocab) {
            return Err(Error::invalid("cross_entropy: allowed mask size mismatch"));
        }
        let lg = self.value(logits);
        let mut total = 0.0f64;
        let mut count = 0usize;
        let mut row_buf = vec![0.0f32; vocab];
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= vocab {
                return Err(Error::invalid(format!("target {t} outside [0, {vocab})")));
            }
            let row = masked_row(lg.row(i), allowed.as_deref(), i, vocab, &mut row_buf);
            if row[t as usize] == f32::NEG_INFINITY {
                return Err(Error::invalid("cross_entropy: target class is masked"));
            }
            let (max, lse) = log_sum_exp(row);
            total += max + lse - row[t as usize] as f64;
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mean = total / count as f64;
        Ok(self.push(
            Tensor::scalar(mean as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                allowed,
                count,
            },
            &[logits],
            Some(mean),
        ))
    }

    /// Mean of the listed rows of `x` for each group, giving `[groups, d]`.
    pub fn segment_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (n, d) = self.mat("segment_mean", x)?;
        let xs = self.value(x).data();
        let mut out = vec![0.0f32; groups.len() * d];
        let mut acc = vec![0.0f64; d];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::invalid("mean pooling over zero valid tokens"));
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &r in rows {
                if r >= n {
                    return Err(Error::invalid(format!("row {r} out of range {n}")));
                }
                for (a, &v) in acc.iter_mut().zip(&xs[r * d..(r + 1) * d]) {
                    *a += v as f64;
                }
            }
            let inv = 1.0 / rows.len() as f64;
            for (o, a) in out[g * d..(g + 1) * d].iter_mut().zip(&acc) {
                *o = (a * inv) as f32;
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[groups.len(), d], out),
            Op::SegmentMean {
                x,
                groups: groups.to_vec(),
            },
            &[x],
            None,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.as_matrix();
        let mut out = vec![0.0f32; n * d];
        let mut inv_norm = Vec::with_capacity(n);
        for i in 0..n {
            let row = t.row(i);
            let norm = dot64(row, row).sqrt();
            if norm == 0.0 {
                return Err(Error::invalid("cannot normalize a zero vector"));
            }
            let inv = 1.0 / norm;
            for j in 0..d {
                out[i * d + j] = (row[j] as f64 * inv) as f32;
            }
            inv_norm.push(inv);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::L2NormalizeRows { x, inv_norm },
            &[x],
            None,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x], Some(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(m as f32), Op::Mean(x), &[x], Some(m))
    }

    pub fn mse(&mut self, pred: Var, target: &[f32]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::Shape {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let m = p
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / p.len() as f64;
        Ok(self.push(
            Tensor::scalar(m as f32),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            &[pred],
            Some(m),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x], None))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them. Leaves that do not influence the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.record {
            return Err(Error::invalid("backward on an inference tape"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.is_leaf {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut out: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.is_leaf && node.needs_grad {
                let data = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out[idx] = Some(Tensor::from_vec(node.value.shape(), data));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, delta: Vec<f32>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_matrix();
                let n = self.value(*b).as_matrix().1;
                if needs(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, val(*b), m, n, k));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.value(*a).as_matrix();
                let n = self.value(*b).as_matrix().0;
                if needs(*a) {
                    self.accumulate(grads, *a, matmul_nn(g, val(*b), m, n, k));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, val(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                if needs(*bias) {
                    let d = self.value(*bias).numel();
                    let mut acc = vec![0.0f64; d];
                    for row in g.chunks(d) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v as f64;
                        }
                    }
                    self.accumulate(grads, *bias, acc.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, d);
                }
                if needs(*b) {
                    let d = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * f).collect());
            }
            Op::Silu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &x)| {
                        let x = x as f64;
                        let s = sigmoid(x);
                        (g as f64 * s * (1.0 + x * (1.0 - s))) as f32
                    })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &x)| (g as f64 * gelu(x as f64).1) as f32)
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xs = val(*x);
                let gs = val(*gain);
                let d = gs.len();
                let mut dx = vec![0.0f32; xs.len()];
                let mut dg = vec![0.0f64; d];
                for (i, &inv) in inv_rms.iter().enumerate() {
                    let row = &xs[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    // y = gain ⊙ x · r, r = (mean(x²)+eps)^-1/2
                    // dx = r·(gain⊙g) − x · r³/d · Σ(gain⊙g⊙x)
                    let mut dot = 0.0f64;
                    for j in 0..d {
                        let gg = grow[j] as f64 * gs[j] as f64;
                        dot += gg * row[j] as f64;
                        dg[j] += grow[j] as f64 * row[j] as f64 * inv;
                    }
                    let coef = inv * inv * inv * dot / d as f64;
                    for j in 0..d {
                        let gg = grow[j] as f64 * gs[j] as f64;
                        dx[i * d + j] = (inv * gg - row[j] as f64 * coef) as f32;
                    }
                }
                if needs(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if needs(*gain) {
                    self.accumulate(grads, *gain, dg.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let xs = val(*x);
                let gs = val(*gain);
                let d = gs.len();
                let mut dx = vec![0.0f32; xs.len()];
                let mut dg = vec![0.0f64; d];
                let mut db = vec![0.0f64; d];
                let mut xhat = vec![0.0f64; d];
                let mut gh = vec![0.0f64; d];
                for i in 0..mean.len() {
                    let row = &xs[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    for j in 0..d {
                        xhat[j] = (row[j] as f64 - mean[i]) * inv_std[i];
                        gh[j] = grow[j] as f64 * gs[j] as f64;
                        dg[j] += grow[j] as f64 * xhat[j];
                        db[j] += grow[j] as f64;
                    }
                    let mean_gh = gh.iter().sum::<f64>() / d as f64;
                    let mean_ghx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = (inv_std[i] * (gh[j] - mean_gh - xhat[j] * mean_ghx)) as f32;
                    }
                }
                if needs(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if needs(*gain) {
                    self.accumulate(grads, *gain, dg.into_iter().map(|v| v as f32).collect());
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        self.accumulate(grads, *b, db.into_iter().map(|v| v as f32).collect());
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let (rows, d) = self.value(*table).as_matrix();
                let mut acc = vec![0.0f64; rows * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &v) in acc[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *a += v as f64;
                    }
                }
                self.accumulate(grads, *table, acc.into_iter().map(|v| v as f32).collect());
            }
            Op::Rope {
                x,
                n_heads,
                head_dim,
                cos,
                sin,
            } => {
                let half = head_dim / 2;
                let w = n_heads * head_dim;
                let n = g.len() / w;
                let mut dx = vec![0.0f32; g.len()];
                for t in 0..n {
                    for h in 0..*n_heads {
                        let base = t * w + h * head_dim;
                        for i in 0..half {
                            let (c, s) = (cos[t * half + i] as f64, sin[t * half + i] as f64);
                            let g0 = g[base + 2 * i] as f64;
                            let g1 = g[base + 2 * i + 1] as f64;
                            dx[base + 2 * i] = (g0 * c + g1 * s) as f32;
                            dx[base + 2 * i + 1] = (-g0 * s + g1 * c) as f32;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                head_dim,
                scale,
                segments,
                probs,
            } => {
                let (qs, ks, vs) = (val(*q), val(*k), val(*v));
                let hd = *head_dim;
                let w = n_heads * hd;
                let mut dq = vec![0.0f64; qs.len()];
                let mut dk = vec![0.0f64; ks.len()];
                let mut dv = vec![0.0f64; vs.len()];
                let mut p_off = 0;
                let mut dp = Vec::new();
                for &(start, len) in segments {
                    dp.resize(len, 0.0f64);
                    for h in 0..*n_heads {
                        let off = h * hd;
                        for i in start..start + len {
                            let p = &probs[p_off..p_off + len];
                            p_off += len;
                            let go = &g[i * w + off..i * w + off + hd];
                            let mut row_dot = 0.0;
                            for (jj, pj) in p.iter().enumerate() {
                                let j = start + jj;
                                dp[jj] = dot64(go, &vs[j * w + off..j * w + off + hd]);
                                row_dot += *pj as f64 * dp[jj];
                                if *pj != 0.0 {
                                    let pj = *pj as f64;
                                    for (a, &gv) in dv[j * w + off..j * w + off + hd].iter_mut().zip(go) {
                                        *a += pj * gv as f64;
                                    }
                                }
                            }
                            for (jj, pj) in p.iter().enumerate() {
                                if *pj == 0.0 {
                                    continue;
                                }
                                let j = start + jj;
                                let ds = *pj as f64 * (dp[jj] - row_dot) * scale;
                                for c in 0..hd {
                                    dq[i * w + off + c] += ds * ks[j * w + off + c] as f64;
                                    dk[j * w + off + c] += ds * qs[i * w + off + c] as f64;
                                }
                            }
                        }
                    }
                }
                let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
                self.accumulate(grads, *q, cast(dq));
                self.accumulate(grads, *k, cast(dk));
                self.accumulate(grads, *v, cast(dv));
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let d = node.value.as_matrix().1;
                let mut dx = vec![0.0f32; y.len()];
                for i in 0..y.len() / d {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let s = dot64(yr, gr);
                    for j in 0..d {
                        dx[i * d + j] = (yr[j] as f64 * (gr[j] as f64 - s)) as f32;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                allowed,
                count,
            } => {
                let lg = self.value(*logits);
                let (n, vocab) = lg.as_matrix();
                let scale = g[0] as f64 / *count as f64;
                let mut dx = vec![0.0f32; n * vocab];
                let mut row_buf = vec![0.0f32; vocab];
                for (i, &t) in targets.iter().enumerate() {
                    if t == *ignore_index {
                        continue;
                    }
                    let row = masked_row(lg.row(i), allowed.as_deref(), i, vocab, &mut row_buf);
                    let (max, lse) = log_sum_exp(row);
                    for j in 0..vocab {
                        let p = ((row[j] as f64) - max - lse).exp();
                        let y = if j == t as usize { 1.0 } else { 0.0 };
                        dx[i * vocab + j] = ((p - y) * scale) as f32;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::SegmentMean { x, groups } => {
                let (n, d) = self.value(*x).as_matrix();
                let mut dx = vec![0.0f32; n * d];
                for (gi, rows) in groups.iter().enumerate() {
                    let inv = 1.0 / rows.len() as f32;
                    for &r in rows {
                        for j in 0..d {
                            dx[r * d + j] += g[gi * d + j] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2NormalizeRows { x, inv_norm } => {
                let y = node.value.data();
                let d = node.value.as_matrix().1;
                let mut dx = vec![0.0f32; y.len()];
                for (i, &inv) in inv_norm.iter().enumerate() {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let s = dot64(yr, gr);
                    for j in 0..d {
                        dx[i * d + j] = ((gr[j] as f64 - yr[j] as f64 * s) * inv) as f32;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f32; n]);
            }
            Op::Mse { pred, target } => {
                let p = val(*pred);
                let n = p.len() as f64;
                let d = p
                    .iter()
                    .zip(target)
                    .map(|(&a, &b)| (2.0 * (a as f64 - b as f64) / n * g[0] as f64) as f32)
                    .collect();
                self.accumulate(grads, *pred, d);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.to_vec());
            }
        }
    }
}

fn masked_row<'r>(
    row: &'r [f32],
    allowed: Option<&[bool]>,
    i: usize,
    vocab: usize,
    buf: &'r mut [f32],
) -> &'r [f32] {
    match allowed {
        None => row,
        Some(a) => {
            let mask = &a[i * vocab..(i + 1) * vocab];
            for ((b, &r), &ok) in buf.iter_mut().zip(row).zip(mask) {
                *b = if ok { r } else { f32::NEG_INFINITY };
            }
            buf
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Returns (gelu(x), gelu'(x)) for the tanh approximation.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Central finite-difference check of a scalar function of one tensor.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        step,
        &[all],
    )
}

/// Finite-difference check over several inputs, probing only the listed
/// coordinates of each (`coords[i]` indexes into `inputs[i]`).
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f32, coords: &[Vec<usize>]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let owned: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad(true)).collect();
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = owned.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|v| grads.get(*v).expect("leaf gradient").clone())
            .collect::<Vec<_>>()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut worst = 0.0f64;
    let mut probe = owned.clone();
    for (ti, idxs) in coords.iter().enumerate() {
        for &c in idxs {
            let orig = owned[ti].data()[c];
            let plus = orig + step;
            let minus = orig - step;
            probe[ti].data_mut()[c] = plus;
            let fp = eval(&probe)?;
            probe[ti].data_mut()[c] = minus;
            let fm = eval(&probe)?;
            probe[ti].data_mut()[c] = orig;
            let numeric = (fp - fm) / (plus as f64 - minus as f64);
            let a = analytic[ti].data()[c] as f64;
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let x = Tensor::scalar(3.0).with_grad(true);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let y = tape.mul(v, v).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[6.0]);
    }

    #[test]
    fn reused_tensor_accumulates() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).with_grad(true);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let y = tape.sum(sq);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).with_grad(true);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let y = tape.scale(v, 2.0);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn one_gradient_per_leaf_even_if_unused() {
        let a = Tensor::scalar(1.0).with_grad(true);
        let b = Tensor::scalar(2.0).with_grad(true);
        let c = Tensor::scalar(5.0);
        let mut tape = Tape::new();
        let va = tape.param(&a);
        let vb = tape.param(&b);
        let vc = tape.param(&c);
        let y = tape.mul(va, vc).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(va).unwrap().data(), &[5.0]);
        assert_eq!(g.get(vb).unwrap().data(), &[0.0]);
        assert!(g.get(vc).is_none());
    }

    #[test]
    fn linear_function_checks_exactly() {
        let mut r = rng(1);
        let x = Tensor::randn(&[6], 1.0, &mut r);
        let w = Tensor::randn(&[6], 1.0, &mut r);
        let err = grad_check(
            |tape, v| {
                let wv = tape.constant(w.clone());
                let p = tape.mul(v, wv)?;
                Ok(tape.sum(p))
            },
            &x,
            0.5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let mut r = rng(2);
        let x = Tensor::randn(&[3, 5], 1.0, &mut r);
        let err = grad_check(
            |tape, v| {
                let s = tape.softmax_rows(v);
                let l = tape.scale(s, 3.0);
                tape.cross_entropy(l, &[1, -100, 4], -100)
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn primitive_ops_pass_grad_check() {
        let mut r = rng(7);
        type Case = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, Vec<Vec<usize>>);
        let cases: Vec<Case> = vec![
            ("matmul", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            }), vec![vec![3, 4], vec![4, 2]]),
            ("matmul_bt", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.matmul_bt(v[0], v[1])?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            }), vec![vec![3, 4], vec![2, 4]]),
            ("add_row+silu", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.add_row(v[0], v[1])?;
                let y = t.silu(y);
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            }), vec![vec![3, 4], vec![4]]),
            ("gelu", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.gelu(v[0]);
                let y2 = t.mul(y, y)?;
                Ok(t.mean(y2))
            }), vec![vec![2, 5]]),
            ("rms_norm", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.rms_norm(v[0], v[1], 1e-5)?;
                let w = t.constant(Tensor::from_vec(&[3, 4], (0..12).map(|i| (i as f32 * 0.37).sin()).collect()));
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            }), vec![vec![3, 4], vec![4]]),
            ("layer_norm", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.layer_norm(v[0], v[1], Some(v[2]), 1e-5)?;
                let w = t.constant(Tensor::from_vec(&[3, 4], (0..12).map(|i| (i as f32 * 0.71).cos()).collect()));
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            }), vec![vec![3, 4], vec![4], vec![4]]),
            ("gather+segment_mean+l2", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.gather_rows(v[0], &[2, 0, 2, 1])?;
                let m = t.segment_mean(y, &[vec![0, 1], vec![2, 3]])?;
                let n = t.l2_normalize_rows(m)?;
                let w = t.constant(Tensor::from_vec(&[2, 3], vec![0.3, -1.0, 0.5, 0.9, 0.1, -0.4]));
                let p = t.mul(n, w)?;
                Ok(t.sum(p))
            }), vec![vec![3, 3]]),
            ("mse+reshape", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.reshape(v[0], &[6])?;
                t.mse(y, &[0.1, 0.2, -0.3, 0.0, 1.0, 0.5])
            }), vec![vec![2, 3]]),
        ];
        for (name, f, shapes) in cases {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
            let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
            let err = grad_check_many(&*f, &inputs, 1e-2, &coords).unwrap();
            assert!(err < 1e-3, "{name}: {err}");
        }
    }

    #[test]
    fn masked_cross_entropy_gradient() {
        let mut r = rng(4);
        let x = Tensor::randn(&[2, 4], 1.0, &mut r);
        let allowed = vec![true, false, true, true, true, true, false, true];
        let err = grad_check(
            |tape, v| tape.cross_entropy_masked(v, &[0, 3], -100, Some(allowed.clone())),
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn attention_with_padding_mask_grad_check() {
        let mut r = rng(11);
        let n = 5;
        let w = 4;
        let mask = AttentionMask {
            segments: vec![(0, 3), (3, 2)],
            key_valid: Some(vec![true, true, false, true, true]),
        };
        let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[n, w], 1.0, &mut r)).collect();
        let proj = Tensor::randn(&[n, w], 1.0, &mut r);
        let coords: Vec<Vec<usize>> = (0..3).map(|_| (0..n * w).collect()).collect();
        let err = grad_check_many(
            |t, v| {
                let o = t.attention(v[0], v[1], v[2], 2, 2, 0.7, &mask)?;
                let p = t.constant(proj.clone());
                let y = t.mul(o, p)?;
                Ok(t.sum(y))
            },
            &inputs,
            1e-2,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn inference_tape_has_no_backward() {
        let x = Tensor::scalar(1.0).with_grad(true);
        let mut tape = Tape::inference();
        let v = tape.param(&x);
        let y = tape.sum(v);
        assert!(tape.backward(y).is_err());
    }
}
