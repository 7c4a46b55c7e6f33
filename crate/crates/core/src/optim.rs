//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Optimizer state for a fixed, ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[Vec<usize>]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    /// One update of every parameter in place.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite("gradient passed to the optimizer".into()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, pv) in pd.iter_mut().enumerate() {
                let gv = gd[i];
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gv;
                let mhat = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gv * gv;
                let vhat = *vi / bc2;
                *pv -= c.lr * c.weight_decay * *pv;
                *pv -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new(vec![3], vec![0.3, -4.0, 0.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[vec![3]]);
        opt.update(&mut [&mut p], &[&g]).unwrap();
        let want = [1.0 - 1e-2 * 0.3 / (0.3 + 1e-8), -2.0 + 1e-2 * 4.0 / (4.0 + 1e-8), 0.5];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::new(vec![2], vec![3.0, -1.0]).unwrap();
        let cfg = AdamWConfig { lr: 0.05, ..Default::default() };
        let mut opt = AdamW::new(cfg, &[vec![2]]);
        for _ in 0..2000 {
            let g = p.map(|v| 2.0 * (v - 0.5));
            opt.update(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.data().iter().all(|v| (v - 0.5).abs() < 1e-2), "{:?}", p.data());
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &[vec![1]]);
        opt.update(&mut [&mut p], &[&Tensor::zeros(vec![1])]).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
