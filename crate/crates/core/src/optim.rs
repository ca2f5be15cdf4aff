//! Learning-rate schedules, gradient clipping and Adam-family updates.

use crate::error::{Error, Result};
use crate::model::config::keyword_enum;
use crate::tensor::Tensor;

keyword_enum!(
    /// Weight decay handling.
    OptimizerKind {
        Adam => "adam",
        AdamW => "adamw",
    }
);

keyword_enum!(
    /// Shape of the learning-rate curve after warmup.
    SchedulerKind {
        Linear => "linear",
        Cosine => "cosine",
    }
);

/// Learning-rate curve parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: SchedulerKind,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay_fraction: f64,
    pub floor_fraction: f64,
}

impl Schedule {
    pub fn validate(&self, total_steps: u64) -> Result<()> {
        if !(self.floor_fraction > 0.0 && self.floor_fraction <= 1.0) {
            return Err(Error::config(format!(
                "floor_fraction {} must lie in (0, 1]",
                self.floor_fraction
            )));
        }
        if !(self.decay_fraction > 0.0 && self.decay_fraction <= 1.0) {
            return Err(Error::config(format!(
                "decay_fraction {} must lie in (0, 1]",
                self.decay_fraction
            )));
        }
        if self.warmup_steps >= total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} must be below the scheduled steps {total_steps}",
                self.warmup_steps
            )));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("peak_lr must be positive"));
        }
        Ok(())
    }
}

/// Learning rate at `step` of a `total_steps` schedule.
///
/// Cosine: linear warmup from 0 to the peak, cosine decay from the peak to
/// `floor_fraction · peak` ending at `decay_fraction · total_steps`, then
/// constant. Linear: warmup, then straight down to zero at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, s: &Schedule) -> f64 {
    let t = step as f64;
    let w = s.warmup_steps as f64;
    if t < w {
        return s.peak_lr * t / w;
    }
    match s.kind {
        SchedulerKind::Cosine => {
            let floor = s.floor_fraction * s.peak_lr;
            let end = s.decay_fraction * total_steps as f64;
            if t >= end {
                return floor;
            }
            let progress = (t - w) / (end - w);
            floor + (s.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
        SchedulerKind::Linear => {
            let total = total_steps as f64;
            if t >= total {
                0.0
            } else {
                s.peak_lr * (total - t) / (total - w)
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scales every gradient by `max_norm / g` when the global norm `g` exceeds
/// `max_norm`. Returns `g` as measured before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!("max_norm {max_norm} must be positive")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = (*x as f64 * scale) as f32;
            }
        }
    }
    Ok(norm)
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn neobert() -> Self {
        AdamConfig {
            kind: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Moment estimates after an update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarUpdate {
    pub theta: f64,
    pub m: f64,
    pub v: f64,
}

/// One Adam update of a single coordinate at step `t` (1-based).
///
/// AdamW applies decay outside the adaptive term,
/// `θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)`; Adam folds `wd·θ` into the gradient.
pub fn adam_update(
    cfg: &AdamConfig,
    theta: f64,
    grad: f64,
    m: f64,
    v: f64,
    t: u64,
    lr: f64,
    decays: bool,
) -> ScalarUpdate {
    let wd = if decays { cfg.weight_decay } else { 0.0 };
    let g = match cfg.kind {
        OptimizerKind::Adam => grad + wd * theta,
        OptimizerKind::AdamW => grad,
    };
    let m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    let v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
    let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
    let mut step = m_hat / (v_hat.sqrt() + cfg.eps);
    if cfg.kind == OptimizerKind::AdamW {
        step += wd * theta;
    }
    ScalarUpdate {
        theta: theta - lr * step,
        m,
        v,
    }
}

/// Adam state over a list of tensors. Moments are stored at parameter
/// precision so that saved state restores exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[&[usize]]) -> Self {
        Adam {
            cfg,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    /// Applies one update. `params` yields each tensor with its decay flag,
    /// in the order the state was created.
    pub fn step<'p>(
        &mut self,
        params: impl IntoIterator<Item = (&'p mut Tensor, bool)>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let mut n = 0;
        for (i, (p, decays)) in params.into_iter().enumerate() {
            let (m, v, g) = match (self.m.get_mut(i), self.v.get_mut(i), grads.get(i)) {
                (Some(m), Some(v), Some(g)) => (m, v, g),
                _ => return Err(Error::invalid("optimizer state and parameter lists differ")),
            };
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let u = adam_update(
                    &self.cfg,
                    *theta as f64,
                    gj as f64,
                    md[j] as f64,
                    vd[j] as f64,
                    self.t,
                    lr,
                    decays,
                );
                *theta = u.theta as f32;
                md[j] = u.m as f32;
                vd[j] = u.v as f32;
            }
            n += 1;
        }
        if n != self.m.len() || grads.len() != n {
            return Err(Error::invalid("optimizer state and parameter lists differ"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neobert_schedule() -> Schedule {
        Schedule {
            kind: SchedulerKind::Cosine,
            peak_lr: 6e-4,
            warmup_steps: 2000,
            decay_fraction: 0.9,
            floor_fraction: 0.1,
        }
    }

    #[test]
    fn schedule_spot_values() {
        let s = neobert_schedule();
        let total = 100_000;
        assert_eq!(lr_schedule(0, total, &s), 0.0);
        assert!((lr_schedule(1000, total, &s) - 3e-4).abs() <= 1e-12 * 3e-4);
        assert!((lr_schedule(2000, total, &s) - 6e-4).abs() <= 1e-12 * 6e-4);
        assert!((lr_schedule(90_000, total, &s) - 6e-5).abs() <= 1e-12 * 6e-5);
        assert_eq!(lr_schedule(95_000, total, &s), lr_schedule(90_000, total, &s));
        assert_eq!(lr_schedule(10 * total, total, &s), lr_schedule(90_000, total, &s));
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = neobert_schedule();
        let mut prev = f64::INFINITY;
        for step in (2000..=90_000).step_by(500) {
            let lr = lr_schedule(step, 100_000, &s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn linear_schedule_reaches_zero() {
        let s = Schedule {
            kind: SchedulerKind::Linear,
            ..neobert_schedule()
        };
        assert!((lr_schedule(2000, 10_000, &s) - 6e-4).abs() < 1e-15);
        assert!((lr_schedule(6000, 10_000, &s) - 3e-4).abs() < 1e-15);
        assert_eq!(lr_schedule(10_000, 10_000, &s), 0.0);
    }

    #[test]
    fn schedule_validation() {
        let s = neobert_schedule();
        assert!(s.validate(2000).is_err());
        assert!(s.validate(2001).is_ok());
        let bad = Schedule {
            floor_fraction: 0.0,
            ..s
        };
        assert!(bad.validate(10_000).is_err());
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![Tensor::from_vec(&[2], vec![1.2, 0.0]), Tensor::from_vec(&[1], vec![1.6])];
        let norm = clip_grad_norm(&mut g, 1.0).unwrap();
        assert!((norm - 2.0).abs() < 1e-6);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-7 && (g[1].data()[0] - 0.8).abs() < 1e-7);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        let mut small = vec![Tensor::from_vec(&[2], vec![0.3, 0.4])];
        let before = small.clone();
        assert!((clip_grad_norm(&mut small, 1.0).unwrap() - 0.5).abs() < 1e-7);
        assert_eq!(small, before);
        assert!(clip_grad_norm(&mut small, 0.0).is_err());
    }

    #[test]
    fn decay_only_step() {
        let cfg = AdamConfig::neobert();
        let u = adam_update(&cfg, 2.0, 0.0, 0.0, 0.0, 1, 1e-2, true);
        assert!((u.theta - 2.0 * (1.0 - 1e-2 * 0.1)).abs() < 1e-15);
        let u = adam_update(&cfg, 2.0, 0.0, 0.0, 0.0, 1, 1e-2, false);
        assert_eq!(u.theta, 2.0);
    }

    #[test]
    fn constant_gradient_gives_unit_steps() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::neobert()
        };
        let (mut theta, mut m, mut v) = (0.0, 0.0, 0.0);
        for t in 1..=200 {
            let u = adam_update(&cfg, theta, -3.0, m, v, t, 1e-3, true);
            assert!(((u.theta - theta) / 1e-3 - 1.0).abs() < 1e-6);
            (theta, m, v) = (u.theta, u.m, u.v);
        }
    }

    #[test]
    fn tensor_step_matches_scalar_rule() {
        let cfg = AdamConfig::neobert();
        let mut p = Tensor::from_vec(&[2], vec![0.5, -0.25]);
        let mut opt = Adam::new(cfg, &[&[2]]);
        let g = vec![Tensor::from_vec(&[2], vec![0.1, -0.2])];
        opt.step([(&mut p, true)], &g, 1e-3).unwrap();
        let u = adam_update(&cfg, 0.5, 0.1, 0.0, 0.0, 1, 1e-3, true);
        assert_eq!(p.data()[0], u.theta as f32);
        assert_eq!(opt.m[0].data()[0], u.m as f32);
        assert!(opt.step([(&mut p, true)], &[], 1e-3).is_err());
    }
}
