use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{SyntheticClip, Trainable, VictimModel};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// Ancestral DDPM sampling over every timestep, conditioned on the latent of
/// `x_cond`. Returns `frames` decoded frames clipped to `[0, 1]`.
pub fn generate(model: &VictimModel, x_cond: &Tensor, y: usize, seed: u64) -> Result<SyntheticClip> {
    if !model.is_trained() {
        return Err(Error::Untrained);
    }
    let cfg = model.config();
    let cond = model.encode(x_cond)?;
    let sched = model.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![cfg.frames];
    shape.extend(cfg.latent_shape());
    let mut z = Tensor::from_fn(shape.clone(), |_| StandardNormal.sample(&mut rng));
    for t in (0..sched.steps()).rev() {
        let eps = {
            let tape = Tape::new();
            let b = model.bind(&tape, Trainable::None);
            let out = model.denoise_with_taps(&b, &tape.constant(z.clone()), &tape.constant(cond.clone()), t, y)?;
            out.eps.value()
        };
        let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
        let sigma = sched.posterior_variance(t).sqrt();
        let noise: Vec<f64> = if t > 0 { (0..z.numel()).map(|_| StandardNormal.sample(&mut rng)).collect() } else { vec![0.0; z.numel()] };
        for ((zv, ev), nv) in z.data_mut().iter_mut().zip(eps.data()).zip(noise) {
            *zv = inv_sqrt_alpha * (*zv - coef * ev) + sigma * nv;
        }
        if !z.all_finite() {
            return Err(Error::NonFinite(format!("sampling diverged at t={t}")));
        }
    }
    let frames = model.decode_tensor(&z)?.map(|v| v.clamp(0.0, 1.0));
    Ok(SyntheticClip { frames, label: y, velocity: None })
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    fn small_model(trained: bool) -> VictimModel {
        let mut m = VictimModel::new(ModelConfig { image_size: 8, hidden: 8, timesteps: 10, ..Default::default() }, 0).unwrap();
        m.trained = trained;
        m
    }

    #[test]
    fn untrained_model_is_rejected() {
        let m = small_model(false);
        assert!(matches!(generate(&m, &Tensor::full(vec![3, 8, 8], 0.5), 0, 1), Err(Error::Untrained)));
    }

    #[test]
    fn shape_range_and_determinism() {
        let m = small_model(true);
        let x = Tensor::full(vec![3, 8, 8], 0.3);
        let a = generate(&m, &x, 1, 5).unwrap();
        assert_eq!(a.frames.shape(), &[4, 3, 8, 8]);
        assert!(a.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, generate(&m, &x, 1, 5).unwrap());
        assert_ne!(a, generate(&m, &x, 1, 6).unwrap());
    }
}
