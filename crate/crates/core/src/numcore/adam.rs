//! Adam with decoupled weight decay.

use crate::numcore::params::ParamSet;
use crate::numcore::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-5, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// Optimizer state is keyed by entry order, so it must be constructed for
/// the exact ParamSet it will update.
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.values.rows, e.values.cols))
            .collect();
        let v = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.values.rows, e.values.cols))
            .collect();
        Adam { cfg, t: 0, m, v }
    }

    /// One update from the gradients currently stored in `params`.
    /// Weight decay is decoupled: it shrinks weights directly instead of
    /// being folded into the moment estimates.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, e) in params.entries_mut().iter_mut().enumerate() {
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for k in 0..e.values.len() {
                let g = e.grad.data[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let w = &mut e.values.data[k];
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps) + c.lr * c.weight_decay * *w;
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(1.0));
        let _ = p
            .eval_with_gradients(|t, b| {
                let x = b.id("x");
                Ok(t.sum_all(x))
            })
            .unwrap();
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.0, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p);
        // With bias correction the first step is essentially lr * sign(g).
        assert!((p.get("x").data[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(2.0));
        p.zero_grad();
        let cfg = AdamConfig { lr: 0.5, weight_decay: 0.1, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p);
        assert!((p.get("x").data[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(3.0));
        let mut opt = Adam::new(
            AdamConfig { lr: 0.05, weight_decay: 0.0, ..AdamConfig::default() },
            &p,
        );
        for _ in 0..2000 {
            p.zero_grad();
            let _ = p
                .eval_with_gradients(|t, b| {
                    let x = b.id("x");
                    let sq = t.mul(x, x);
                    Ok(t.sum_all(sq))
                })
                .unwrap();
            opt.step(&mut p);
        }
        assert!(p.get("x").data[0].abs() < 1e-3);
    }
}
