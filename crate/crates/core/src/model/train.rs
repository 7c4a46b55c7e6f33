//! Two-stage training: autoencoder reconstruction, then the denoising
//! objective with the encoder frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, SyntheticClip, Trainable, VictimModel};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub autoencoder_steps: usize,
    pub denoiser_steps: usize,
    pub batch: usize,
    pub autoencoder_lr: f64,
    pub denoiser_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { autoencoder_steps: 1500, denoiser_steps: 3000, batch: 4, autoencoder_lr: 3e-3, denoiser_lr: 2e-3, seed: 0 }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.autoencoder_steps + self.denoiser_steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Autoencoder,
    Denoiser,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub stage: TrainStage,
    pub loss: f64,
}

/// Resumable training loop. Each step draws from an RNG stream keyed by
/// `(seed, step)`, so stopping and resuming reproduces an uninterrupted run.
pub struct Trainer {
    pub model: VictimModel,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub step: usize,
    pub trace: Vec<TrainRecord>,
    latents: Option<Vec<Tensor>>,
}

fn stage_params(model: &VictimModel, stage: TrainStage) -> Vec<usize> {
    let group = match stage {
        TrainStage::Autoencoder => Trainable::Autoencoder,
        TrainStage::Denoiser => Trainable::Denoiser,
    };
    (0..model.names.len()).filter(|&i| group.includes(&model.names[i])).collect()
}

fn stage_optimizer(model: &VictimModel, stage: TrainStage, lr: f64) -> AdamW {
    let shapes: Vec<Vec<usize>> = stage_params(model, stage).into_iter().map(|i| model.tensors[i].shape().to_vec()).collect();
    AdamW::new(AdamWConfig { lr, ..Default::default() }, &shapes)
}

/// The denoiser stage starts at this step but its setup has not run yet.
fn transition_pending(step: usize, config: &TrainConfig, trace: &[TrainRecord]) -> bool {
    step == config.autoencoder_steps && config.denoiser_steps > 0 && trace.last().is_none_or(|r| r.stage == TrainStage::Autoencoder)
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        if config.batch == 0 {
            return Err(Error::invalid("training batch must be positive"));
        }
        let model = VictimModel::new(model_config, config.seed)?;
        let optimizer = stage_optimizer(&model, TrainStage::Autoencoder, config.autoencoder_lr);
        Ok(Self { model, config, optimizer, step: 0, trace: Vec::new(), latents: None })
    }

    /// Rebuild a trainer from a saved model and optimizer state.
    pub fn resume(model: VictimModel, config: TrainConfig, optimizer: AdamW, step: usize, trace: Vec<TrainRecord>) -> Result<Self> {
        let stage = if transition_pending(step, &config, &trace) || step < config.autoencoder_steps {
            TrainStage::Autoencoder
        } else {
            TrainStage::Denoiser
        };
        let expected = stage_params(&model, stage);
        if optimizer.m.len() != expected.len() || expected.iter().zip(&optimizer.m).any(|(&i, m)| m.shape() != model.tensors[i].shape()) {
            return Err(Error::Format("optimizer state does not match the model at this step".into()));
        }
        Ok(Self { model, config, optimizer, step, trace, latents: None })
    }

    pub fn stage(&self) -> TrainStage {
        if self.step < self.config.autoencoder_steps {
            TrainStage::Autoencoder
        } else {
            TrainStage::Denoiser
        }
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step as u64 + 1);
        rng
    }

    /// Frame latents of every clip under the (frozen) encoder.
    fn ensure_latents(&mut self, data: &[SyntheticClip]) -> Result<()> {
        if self.latents.is_none() {
            let latents = data.iter().map(|c| self.model.encode(&c.frames)).collect::<Result<Vec<_>>>()?;
            self.latents = Some(latents);
        }
        Ok(())
    }

    /// Switch from the autoencoder to the denoiser stage: fix the latent scale
    /// to unit variance and start a fresh optimizer for the denoiser.
    fn enter_denoiser_stage(&mut self, data: &[SyntheticClip]) -> Result<()> {
        self.model.latent_scale = 1.0;
        self.latents = None;
        self.ensure_latents(data)?;
        let all: Vec<f64> = self.latents.as_ref().unwrap().iter().flat_map(|t| t.data().to_vec()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::NonFinite(format!("latent variance {var} after autoencoder training")));
        }
        self.model.latent_scale = 1.0 / var.sqrt();
        self.latents = None;
        self.optimizer = stage_optimizer(&self.model, TrainStage::Denoiser, self.config.denoiser_lr);
        Ok(())
    }

    /// Run one optimization step and return its loss.
    pub fn step_once(&mut self, data: &[SyntheticClip]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("training needs a nonempty dataset"));
        }
        if transition_pending(self.step, &self.config, &self.trace) {
            self.enter_denoiser_stage(data)?;
        }
        let stage = self.stage();
        let mut rng = self.step_rng();
        let tape = Tape::new();
        let loss = match stage {
            TrainStage::Autoencoder => {
                let b = self.model.bind(&tape, Trainable::Autoencoder);
                let frames: Vec<Tensor> = (0..self.config.batch)
                    .map(|_| {
                        let clip = &data[rng.random_range(0..data.len())];
                        clip.frame(rng.random_range(0..clip.num_frames()))
                    })
                    .collect();
                let x = tape.constant(Tensor::stack(&frames)?);
                let z = self.model.encode_with_taps(&b, &x)?.latent;
                let recon = self.model.decode(&b, &z)?;
                let loss = recon.mse(&x)?;
                (loss, b.trainable_vars())
            }
            TrainStage::Denoiser => {
                self.ensure_latents(data)?;
                let latents = self.latents.as_ref().unwrap();
                let b = self.model.bind(&tape, Trainable::Denoiser);
                let mut total = None;
                for _ in 0..self.config.batch {
                    let idx = rng.random_range(0..data.len());
                    let z0 = &latents[idx];
                    let t = rng.random_range(0..self.model.schedule().steps());
                    let eps = Tensor::from_fn(z0.shape().to_vec(), |_| StandardNormal.sample(&mut rng));
                    let zt = self.model.schedule().forward_noise(z0, t, &eps)?;
                    let cond = z0.narrow0(0, 1)?.reshape(self.model.config().latent_shape())?;
                    let out = self.model.denoise_with_taps(&b, &tape.constant(zt), &tape.constant(cond), t, data[idx].label)?;
                    let l = out.eps.mse(&tape.constant(eps))?;
                    total = Some(match total {
                        None => l,
                        Some(acc) => l.add(&acc)?,
                    });
                }
                let loss = total.expect("batch is positive").scale(1.0 / self.config.batch as f64);
                (loss, b.trainable_vars())
            }
        };
        let (loss_var, vars) = loss;
        let value = loss_var.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value} at step {}", self.step)));
        }
        let grads = tape.backward(loss_var)?;
        let ids = stage_params(&self.model, stage);
        let mut grad_list: Vec<Tensor> = ids.iter().map(|&i| Tensor::zeros(self.model.tensors[i].shape().to_vec())).collect();
        for (i, v) in vars {
            let slot = ids.iter().position(|&j| j == i).expect("trainable parameter belongs to the stage");
            grad_list[slot] = grads.wrt(v)?.clone();
        }
        let grad_refs: Vec<&Tensor> = grad_list.iter().collect();
        {
            let mut params: Vec<&mut Tensor> =
                self.model.tensors.iter_mut().enumerate().filter(|(i, _)| ids.contains(i)).map(|(_, t)| t).collect();
            self.optimizer.update(&mut params, &grad_refs)?;
        }
        if stage == TrainStage::Denoiser {
            self.model.trained = true;
        }
        self.trace.push(TrainRecord { step: self.step, stage, loss: value });
        self.step += 1;
        Ok(value)
    }

    /// Train until `step == until` (capped at the configured total).
    pub fn run_until(&mut self, data: &[SyntheticClip], until: usize) -> Result<()> {
        let until = until.min(self.config.total_steps());
        while self.step < until {
            self.step_once(data)?;
        }
        Ok(())
    }

    pub fn finish(mut self, data: &[SyntheticClip]) -> Result<(VictimModel, Vec<TrainRecord>)> {
        self.run_until(data, self.config.total_steps())?;
        Ok((self.model, self.trace))
    }
}

/// Train a fresh model on `data`.
pub fn train_toy(data: &[SyntheticClip], model_config: ModelConfig, config: TrainConfig) -> Result<(VictimModel, Vec<TrainRecord>)> {
    if data.is_empty() {
        return Err(Error::invalid("training needs a nonempty dataset"));
    }
    Trainer::new(model_config, config)?.finish(data)
}

/// Mean denoising loss of `model` over `draws` random `(clip, t, eps)` draws.
pub fn denoising_loss(model: &VictimModel, data: &[SyntheticClip], draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let clip = &data[rng.random_range(0..data.len())];
        let z0 = model.encode(&clip.frames)?;
        let t = rng.random_range(0..model.schedule().steps());
        let eps = Tensor::from_fn(z0.shape().to_vec(), |_| StandardNormal.sample(&mut rng));
        let zt = model.schedule().forward_noise(&z0, t, &eps)?;
        let cond = z0.narrow0(0, 1)?.reshape(model.config().latent_shape())?;
        let tape = Tape::new();
        let b = model.bind(&tape, Trainable::None);
        let out = model.denoise_with_taps(&b, &tape.constant(zt), &tape.constant(cond), t, clip.label)?;
        total += out.eps.mse(&tape.constant(eps))?.item();
    }
    Ok(total / draws as f64)
}
