//! Eager forms of the block operations, for use outside a training step.

use crate::autodiff::{AttentionMask, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `gain_i · x_i / sqrt(mean(x²) + eps)` on every row of `x`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let (xv, g) = (tape.leaf(x.clone()), tape.leaf(gain.clone()));
    let y = tape.rms_norm(xv, g, eps)?;
    Ok(tape.value(y).clone())
}

/// `silu(x W1) ⊙ (x W3)` projected back by `W2`, row-wise.
pub fn swiglu_ffn(x: &Tensor, w1: &Tensor, w2: &Tensor, w3: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xv = tape.leaf(x.clone());
    let (a, b, c) = (tape.param(w1), tape.param(w2), tape.param(w3));
    let gate = tape.matmul(xv, a)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(xv, c)?;
    let h = tape.mul(gate, up)?;
    let y = tape.matmul(h, b)?;
    Ok(tape.value(y).clone())
}

/// Exact scaled dot-product attention over `[seq, n_heads, head_dim]` inputs.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let &[seq, n_heads, head_dim] = q.shape() else {
        return Err(Error::invalid(format!("attention wants [seq, heads, head_dim], got {:?}", q.shape())));
    };
    let flat = [seq, n_heads * head_dim];
    let mut tape = Tape::inference();
    let qv = tape.leaf(q.reshape(&flat)?);
    let kv = tape.leaf(k.reshape(&flat)?);
    let vv = tape.leaf(v.reshape(&flat)?);
    let out = tape.attention(qv, kv, vv, n_heads, head_dim, 1.0 / (head_dim as f64).sqrt(), mask)?;
    tape.value(out).reshape(q.shape())
}

/// Mean of the rows flagged valid.
pub fn mean_pool(hidden: &Tensor, valid: &[bool]) -> Result<Vec<f32>> {
    let (n, d) = hidden.as_matrix();
    if valid.len() != n {
        return Err(Error::invalid(format!("{} flags for {n} rows", valid.len())));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    if rows.is_empty() {
        return Err(Error::invalid("mean_pool over no valid tokens"));
    }
    let mut acc = vec![0.0f64; d];
    for &i in &rows {
        for (a, &x) in acc.iter_mut().zip(hidden.row(i)) {
            *a += x as f64;
        }
    }
    Ok(acc.iter().map(|a| (a / rows.len() as f64) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rms_norm_examples() {
        let one = Tensor::full(&[1, 4], 1.0);
        let y = rms_norm(&one, &Tensor::full(&[4], 1.0), 1e-30).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let zero = rms_norm(&Tensor::zeros(&[1, 4]), &Tensor::full(&[4], 1.0), 1e-6).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let y = rms_norm(&Tensor::from_vec(&[1, 2], vec![3.0, 4.0]), &Tensor::full(&[2], 1.0), 1e-30).unwrap();
        assert!((y.data()[0] - 0.8485).abs() < 1e-4 && (y.data()[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn rms_norm_has_unit_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[6, 64], 3.0, &mut rng);
        let y = rms_norm(&x, &Tensor::full(&[64], 1.0), 1e-12).unwrap();
        for i in 0..6 {
            let ms: f64 = y.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 64.0;
            assert!((ms.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn swiglu_examples() {
        let one = Tensor::full(&[1, 1], 1.0);
        let y = swiglu_ffn(&Tensor::full(&[1, 1], 2.0), &one, &one, &one).unwrap();
        let sigma2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((y.data()[0] as f64 - 4.0 * sigma2).abs() < 1e-6);
        assert!((y.data()[0] - 3.5232).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w1, w2, w3) = (
            Tensor::randn(&[8, 16], 1.0, &mut rng),
            Tensor::randn(&[16, 8], 1.0, &mut rng),
            Tensor::randn(&[8, 16], 1.0, &mut rng),
        );
        let z = swiglu_ffn(&Tensor::zeros(&[3, 8]), &w1, &w2, &w3).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::randn(&[1, 2, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 2, 4], 1.0, &mut rng);
        let out = attention(&q, &q, &v, &AttentionMask::full(1)).unwrap();
        assert_eq!(out.data(), v.data());
        // self-only visibility: one segment per token
        let q = Tensor::randn(&[3, 1, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 1, 4], 1.0, &mut rng);
        let mask = AttentionMask {
            segments: vec![(0, 1), (1, 1), (2, 1)],
            key_valid: None,
        };
        assert_eq!(attention(&q, &q, &v, &mask).unwrap().data(), v.data());
    }

    #[test]
    fn attention_matches_f64_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, h, dh) = (5, 2, 4);
        let q = Tensor::randn(&[s, h, dh], 1.0, &mut rng);
        let k = Tensor::randn(&[s, h, dh], 1.0, &mut rng);
        let v = Tensor::randn(&[s, h, dh], 1.0, &mut rng);
        let out = attention(&q, &k, &v, &AttentionMask::full(s)).unwrap();
        let at = |t: &Tensor, i: usize, hh: usize, c: usize| t.data()[(i * h + hh) * dh + c] as f64;
        for hh in 0..h {
            for i in 0..s {
                let logits: Vec<f64> = (0..s)
                    .map(|j| (0..dh).map(|c| at(&q, i, hh, c) * at(&k, j, hh, c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for c in 0..dh {
                    let want: f64 = (0..s).map(|j| logits[j].exp() / z * at(&v, j, hh, c)).sum();
                    assert!((at(&out, i, hh, c) - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn mean_pool_examples() {
        let h = Tensor::from_vec(&[3, 2], vec![1.0, -2.0, -1.0, 2.0, 9.0, 9.0]);
        assert_eq!(mean_pool(&h, &[true, false, false]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(mean_pool(&h, &[true, true, false]).unwrap(), vec![0.0, 0.0]);
        assert!(mean_pool(&h, &[false; 3]).is_err());
        let short = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 5.0]);
        let a = mean_pool(&short, &[true, true]).unwrap();
        let b = mean_pool(&Tensor::from_vec(&[3, 2], vec![1.0, -2.0, 3.0, 5.0, 7.0, 7.0]), &[true, true, false]).unwrap();
        assert_eq!(a, b);
    }
}
