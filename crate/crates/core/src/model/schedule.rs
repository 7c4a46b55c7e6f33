use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Linear-beta DDPM noise schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let betas: Vec<f64> = (0..steps).map(|t| BETA_START + (BETA_END - BETA_START) * t as f64 / (steps - 1) as f64).collect();
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::OutOfRange { what: "timestep", detail: format!("{t} not in [0, {})", self.steps()) });
        }
        Ok(())
    }

    /// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
    pub fn forward_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let ab = self.alpha_bars[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0.zip_map(eps, |z, e| a * z + b * e)
    }

    /// Variance of `q(z_{t-1} | z_t, z_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
    }

    /// Toy-scale equivalent of a timestep given on a 1000-step scale.
    pub fn rescale(&self, t_of_1000: usize) -> usize {
        let t = (t_of_1000 as f64 / 1000.0 * self.steps() as f64).round() as usize;
        t.min(self.steps() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn endpoints_and_monotonicity() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0 - 1e-4);
        assert!((s.beta(999) - 2e-2).abs() < 1e-15);
        assert!(s.alpha_bar(999) < 0.05);
        for t in 1..1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) >= s.beta(t - 1));
        }
        assert!(NoiseSchedule::linear(1).is_err());
    }

    #[test]
    fn forward_noise_special_cases() {
        let s = NoiseSchedule::linear(10).unwrap();
        let z0 = Tensor::from_fn(vec![5], |i| i as f64);
        let zero = Tensor::zeros(vec![5]);
        let zt = s.forward_noise(&z0, 3, &zero).unwrap();
        let want = z0.map(|v| v * s.alpha_bar(3).sqrt());
        assert!(zt.max_abs_diff(&want).unwrap() < 1e-15);
        assert!(s.forward_noise(&z0, 10, &zero).is_err());
    }

    #[test]
    fn forward_noise_variance_monte_carlo() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let t = 400;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let eps = Tensor::from_fn(vec![n], |_| StandardNormal.sample(&mut rng));
        let zt = s.forward_noise(&Tensor::zeros(vec![n]), t, &eps).unwrap();
        let mean = zt.mean();
        let var = zt.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
    }
}
