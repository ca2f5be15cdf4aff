//! Rotary position tables, with optional YaRN-style frequency scaling.

use super::config::RopeScaling;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bands rotating fewer than this many times over the original context are
/// fully interpolated.
const RAMP_LOW: f64 = 1.0;
/// Bands rotating more than this many times are left untouched.
const RAMP_HIGH: f64 = 32.0;

/// Per-pair angular frequencies `theta^(-2i/head_dim)` and the logit
/// temperature factor folded into the tables.
pub fn rope_frequencies(head_dim: usize, theta: f64, scaling: Option<RopeScaling>) -> (Vec<f64>, f64) {
    let half = head_dim / 2;
    let base: Vec<f64> = (0..half)
        .map(|i| theta.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let Some(s) = scaling.filter(|s| s.factor > 1.0) else {
        return (base, 1.0);
    };
    let freqs = base
        .iter()
        .map(|&f| {
            let rotations = s.original_max as f64 * f / (2.0 * std::f64::consts::PI);
            let keep = ((rotations - RAMP_LOW) / (RAMP_HIGH - RAMP_LOW)).clamp(0.0, 1.0);
            (1.0 - keep) * f / s.factor + keep * f
        })
        .collect();
    (freqs, 0.1 * s.factor.ln() + 1.0)
}

/// Cos/sin tables of shape `[positions.len(), head_dim / 2]`.
pub fn rope_tables(
    positions: &[u32],
    head_dim: usize,
    theta: f64,
    scaling: Option<RopeScaling>,
) -> (Vec<f32>, Vec<f32>) {
    let (freqs, mscale) = rope_frequencies(head_dim, theta, scaling);
    let mut cos = Vec::with_capacity(positions.len() * freqs.len());
    let mut sin = Vec::with_capacity(positions.len() * freqs.len());
    for &m in positions {
        for &f in &freqs {
            let a = m as f64 * f;
            cos.push((a.cos() * mscale) as f32);
            sin.push((a.sin() * mscale) as f32);
        }
    }
    (cos, sin)
}

/// Rotates a `[seq, n_heads, head_dim]` tensor by its token positions.
pub fn rope_apply(x: &Tensor, positions: &[u32], theta: f64, scaling: Option<RopeScaling>) -> Result<Tensor> {
    let &[seq, n_heads, head_dim] = x.shape() else {
        return Err(Error::invalid(format!("rope_apply wants [seq, heads, head_dim], got {:?}", x.shape())));
    };
    if head_dim % 2 != 0 {
        return Err(Error::config(format!("rotary embeddings need an even head_dim, got {head_dim}")));
    }
    if positions.len() != seq {
        return Err(Error::invalid(format!("{} positions for {seq} tokens", positions.len())));
    }
    let (cos, sin) = rope_tables(positions, head_dim, theta, scaling);
    let flat = x.reshape(&[seq, n_heads * head_dim])?;
    let mut tape = Tape::inference();
    let v = tape.leaf(flat);
    let out = tape.rope(v, n_heads, head_dim, cos, sin)?;
    tape.value(out).reshape(x.shape())
}
