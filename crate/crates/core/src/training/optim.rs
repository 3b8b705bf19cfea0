//! Learning-rate schedule, global-norm clipping and AdamW.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak` over `warmup_ratio * total` steps, then
/// cosine decay to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    let t = total as f64;
    let w = warmup_ratio * t;
    let s = step.min(total) as f64;
    if s < w {
        peak * s / w
    } else if t <= w {
        peak
    } else {
        peak * 0.5 * (1.0 + (PI * (s - w) / (t - w)).cos())
    }
}

/// Scales all gradients by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns `g`.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64, step: usize) -> Result<f64> {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v as f64 * v as f64)
        .sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: "non-finite gradient norm".into(),
        });
    }
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v *= s;
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update with decoupled weight decay. `params` and `grads` must be
    /// in the order the optimizer was created with.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adamw",
                lhs: vec![params.len(), grads.len()],
                rhs: vec![self.m.len()],
            });
        }
        self.t += 1;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let decay = (lr * self.cfg.weight_decay) as f32;
        let step_size = (lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.cfg.eps as f32);
        let mut finite = true;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: vec![p.len()],
                    rhs: vec![g.len()],
                });
            }
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
                p[i] -= decay * p[i];
                p[i] -= step_size * m[i] / denom;
                finite &= p[i].is_finite();
            }
        }
        if !finite {
            return Err(Error::Divergence {
                step: self.t,
                detail: "non-finite parameter after update".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: AdamWConfig = AdamWConfig {
        betas: (0.9, 0.95),
        eps: 1e-8,
        weight_decay: 0.0,
    };

    #[test]
    fn schedule_landmarks() {
        let t = 1000;
        assert_eq!(lr_schedule(0, t, 3e-4, 0.1), 0.0);
        assert!((lr_schedule(100, t, 3e-4, 0.1) - 3e-4).abs() < 1e-15);
        assert!((lr_schedule(550, t, 3e-4, 0.1) - 1.5e-4).abs() < 1e-12);
        assert!(lr_schedule(t, t, 3e-4, 0.1).abs() < 1e-15);
    }

    #[test]
    fn clipping_halves_or_leaves() {
        let mut g = vec![vec![12.0, 16.0]];
        let n = clip_grad_norm(&mut g, 10.0, 0).unwrap();
        assert_eq!(n, 20.0);
        assert_eq!(g[0], vec![6.0, 8.0]);
        let mut g = vec![vec![3.0], vec![4.0]];
        clip_grad_norm(&mut g, 10.0, 0).unwrap();
        assert_eq!(g, vec![vec![3.0], vec![4.0]]);
        let mut g = vec![vec![f32::NAN]];
        assert!(matches!(
            clip_grad_norm(&mut g, 10.0, 7),
            Err(Error::Divergence { step: 7, .. })
        ));
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut opt = AdamW::new(CFG, &[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        opt.step(&mut [&mut p], &[vec![0.0; 3]], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn decay_is_decoupled() {
        let lr = 1e-2;
        let mut with = AdamW::new(
            AdamWConfig {
                weight_decay: 0.1,
                ..CFG
            },
            &[1],
        );
        let mut without = AdamW::new(CFG, &[1]);
        let mut a = vec![2.0f32];
        let mut b = vec![2.0f32];
        with.step(&mut [&mut a], &[vec![0.0]], lr).unwrap();
        without.step(&mut [&mut b], &[vec![0.0]], lr).unwrap();
        assert!((b[0] - a[0] - (lr * 0.1 * 2.0) as f32).abs() < 1e-7);
    }

    #[test]
    fn converges_on_quadratic() {
        // loss = (x - 3)^2
        let mut opt = AdamW::new(CFG, &[1]);
        let mut x = vec![0.0f32];
        for step in 0..200 {
            let g = vec![2.0 * (x[0] - 3.0)];
            let lr = 0.1 * (1.0 - step as f64 / 200.0);
            opt.step(&mut [&mut x], &[g], lr).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "{}", x[0]);
    }
}
