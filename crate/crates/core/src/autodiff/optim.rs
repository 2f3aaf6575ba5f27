//! Adam and the multi-step learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &[Tensor<R>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![R::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![R::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter.
    ///
    /// `p -= lr / (1 - b1^t) * m / (sqrt(v) / sqrt(1 - b2^t) + eps)`
    pub fn step(&mut self, params: &mut [Tensor<R>], grads: &[Tensor<R>], lr: f64, cfg: &AdamConfig) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), self.m.len(), "state built for a different parameter list");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let step_size = R::from_f64(lr / bc1);
        let bc2_sqrt = R::from_f64(bc2.sqrt());
        let (b1, b2) = (R::from_f64(cfg.beta1), R::from_f64(cfg.beta2));
        let (one_b1, one_b2) = (R::from_f64(1.0 - cfg.beta1), R::from_f64(1.0 - cfg.beta2));
        let eps = R::from_f64(cfg.eps);

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let denom = vv.sqrt() / bc2_sqrt + eps;
                *pv -= step_size * *mv / denom;
            }
        }
    }
}

/// `base_lr` multiplied by `gamma` once for every milestone `<= epoch`
/// (epochs count from 0).
pub fn multistep_lr(base_lr: f64, epoch: usize, milestones: &[usize], gamma: f64) -> f64 {
    milestones
        .iter()
        .filter(|&&m| m <= epoch)
        .fold(base_lr, |lr, _| lr * gamma)
}
