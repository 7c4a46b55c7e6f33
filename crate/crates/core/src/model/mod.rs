//! Desk-scale image-conditioned video denoiser with per-layer feature taps.
//!
//! The encoder maps a `[3, S, S]` image to a `[4, S/4, S/4]` latent through
//! four conv layers. The denoiser takes `F` noisy frame latents, the latent of
//! the conditioning image and a timestep, runs `B` residual blocks that each
//! mix space (3x3 conv per frame) and then time (single-head attention across
//! frames at every spatial site), and predicts the added noise.

mod checkpoint;
pub mod dataset;
mod pca;
mod sample;
mod schedule;
mod train;

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sinusoidal_embedding, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{make_synthetic_dataset, reference_clip, translate_clamped, SyntheticClip};
pub use pca::{pca_layer_viz, symmetric_eigen, LayerProjection};
pub use sample::generate;
pub use schedule::NoiseSchedule;
pub use train::{denoising_loss, train_toy, TrainConfig, TrainRecord, TrainStage, Trainer};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub frames: usize,
    pub latent_channels: usize,
    pub encoder_channels: [usize; 3],
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub num_classes: usize,
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            frames: 4,
            latent_channels: 4,
            encoder_channels: [8, 16, 16],
            hidden: 8,
            blocks: 8,
            time_dim: 16,
            num_classes: dataset::NUM_SHAPES,
            timesteps: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("model config: {msg}")));
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return bad("image_size must be a multiple of 4 and at least 8");
        }
        if self.frames < 1 || self.latent_channels < 1 || self.hidden < 1 || self.num_classes < 1 {
            return bad("frames, latent_channels, hidden and num_classes must be positive");
        }
        if self.encoder_channels.contains(&0) {
            return bad("encoder channels must be positive");
        }
        if self.blocks < 6 {
            return bad("at least 6 denoiser blocks are required");
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad("time_dim must be even and at least 2");
        }
        if self.timesteps < 2 {
            return bad("timesteps must be at least 2");
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }

    /// `[C, h, w]` of one frame latent.
    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.latent_channels, self.latent_size(), self.latent_size()]
    }

    pub fn encoder_layers(&self) -> usize {
        4
    }
}

/// Which parameters a [`Binding`] records as gradient leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    None,
    Autoencoder,
    Denoiser,
}

impl Trainable {
    fn includes(self, name: &str) -> bool {
        match self {
            Trainable::None => false,
            Trainable::Autoencoder => name.starts_with("enc.") || name.starts_with("dec."),
            Trainable::Denoiser => name.starts_with("den."),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VictimModel {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    schedule: NoiseSchedule,
    pub(crate) latent_scale: f64,
    pub(crate) trained: bool,
}

/// Parameters of a model bound to a tape, created lazily on first use.
pub struct Binding<'m, 't> {
    model: &'m VictimModel,
    tape: &'t Tape,
    trainable: Trainable,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'m, 't> Binding<'m, 't> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn model(&self) -> &'m VictimModel {
        self.model
    }

    fn get(&self, name: &str) -> Var<'t> {
        let i = *self.model.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.vars.borrow()[i] {
            return v;
        }
        let trainable = self.trainable.includes(name);
        let v = self.tape.leaf(self.model.tensors[i].clone(), trainable);
        self.vars.borrow_mut()[i] = Some(v);
        v
    }

    /// Parameter indices and variables that were bound as gradient leaves.
    pub fn trainable_vars(&self) -> Vec<(usize, Var<'t>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|_| self.trainable.includes(&self.model.names[i])).map(|v| (i, v)))
            .collect()
    }
}

pub struct EncoderOutput<'t> {
    /// Scaled latent; `[C, h, w]` for a single image, `[N, C, h, w]` for a batch.
    pub latent: Var<'t>,
    /// Output of every encoder layer, `[N, C_n, H_n, W_n]`.
    pub taps: Vec<Var<'t>>,
}

pub struct DenoiserOutput<'t> {
    /// Predicted noise, shaped like the noisy latents.
    pub eps: Var<'t>,
    /// Output of every block, `[F, C, h, w]`.
    pub taps: Vec<Var<'t>>,
    /// Activations after each block's spatial stage, before temporal mixing.
    pub spatial: Vec<Var<'t>>,
}

struct ParamInit {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl ParamInit {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut self.rng));
        self.names.push(name);
        self.tensors.push(t);
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) {
        self.names.push(name);
        self.tensors.push(Tensor::zeros(shape));
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, gain: f64) {
        let std = gain * (2.0 / (cin * 9) as f64).sqrt();
        self.normal(format!("{prefix}.w"), vec![cout, cin, 3, 3], std);
        self.zeros(format!("{prefix}.b"), vec![cout]);
    }
}

impl VictimModel {
    /// Freshly initialized, untrained model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParamInit { names: Vec::new(), tensors: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let [e1, e2, e3] = config.encoder_channels;
        let (lc, c) = (config.latent_channels, config.hidden);
        p.conv("enc.0", e1, 3, 1.0);
        p.conv("enc.1", e2, e1, 1.0);
        p.conv("enc.2", e3, e2, 1.0);
        p.conv("enc.3", lc, e3, 0.7);
        p.conv("dec.0", e3, lc, 1.0);
        p.conv("dec.1", e2, e3, 1.0);
        p.conv("dec.2", e1, e2, 1.0);
        p.conv("dec.3", 3, e1, 0.7);

        p.conv("den.in", c, 2 * lc, 1.0);
        p.normal("den.t.w".into(), vec![config.time_dim, c], (1.0 / config.time_dim as f64).sqrt());
        p.zeros("den.t.b".into(), vec![c]);
        p.normal("den.cls".into(), vec![config.num_classes, c], 0.5);
        p.normal("den.pos".into(), vec![config.frames, c], 0.5);
        let attn_std = (1.0 / c as f64).sqrt();
        for j in 0..config.blocks {
            p.normal(format!("den.blk{j}.e.w"), vec![c, c], attn_std);
            p.zeros(format!("den.blk{j}.e.b"), vec![c]);
            p.conv(&format!("den.blk{j}.conv"), c, c, 0.3);
            for m in ["q", "k", "v"] {
                p.normal(format!("den.blk{j}.{m}"), vec![c, c], attn_std);
            }
            p.normal(format!("den.blk{j}.o"), vec![c, c], 0.3 * attn_std);
        }
        p.conv("den.out", lc, c, 0.1);

        Self::from_parts(config, p.names, p.tensors, 1.0, false)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        names: Vec<String>,
        tensors: Vec<Tensor>,
        latent_scale: f64,
        trained: bool,
    ) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::linear(config.timesteps)?;
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { config, names, tensors, index, schedule, latent_scale, trained })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind<'m, 't>(&'m self, tape: &'t Tape, trainable: Trainable) -> Binding<'m, 't> {
        Binding { model: self, tape, trainable, vars: RefCell::new(vec![None; self.tensors.len()]) }
    }

    fn conv<'t>(&self, b: &Binding<'_, 't>, x: &Var<'t>, name: &str, stride: usize) -> Result<Var<'t>> {
        let w = b.get(&format!("{name}.w"));
        let bias = b.get(&format!("{name}.b"));
        x.conv2d(&w, Some(&bias), stride, 1)
    }

    /// Encoder forward pass; accepts `[3, S, S]` or `[N, 3, S, S]`.
    pub fn encode_with_taps<'t>(&self, b: &Binding<'_, 't>, x: &Var<'t>) -> Result<EncoderOutput<'t>> {
        let shape = x.shape();
        let s = self.config.image_size;
        let single = shape.len() == 3;
        let valid = (single && shape == [3, s, s]) || (shape.len() == 4 && shape[1..] == [3, s, s]);
        if !valid {
            return Err(Error::InvalidShape { shape, reason: format!("encoder expects [3, {s}, {s}] or [N, 3, {s}, {s}]") });
        }
        let x4 = if single { x.reshape(vec![1, 3, s, s])? } else { *x };
        let h1 = self.conv(b, &x4, "enc.0", 1)?.silu();
        let h2 = self.conv(b, &h1, "enc.1", 2)?.silu();
        let h3 = self.conv(b, &h2, "enc.2", 2)?.silu();
        let h4 = self.conv(b, &h3, "enc.3", 1)?;
        let mut latent = h4.scale(self.latent_scale);
        if single {
            latent = latent.reshape(self.config.latent_shape())?;
        }
        Ok(EncoderOutput { latent, taps: vec![h1, h2, h3, h4] })
    }

    /// Decoder forward pass from scaled latents `[N, C, h, w]` to images `[N, 3, S, S]`.
    pub fn decode<'t>(&self, b: &Binding<'_, 't>, z: &Var<'t>) -> Result<Var<'t>> {
        let shape = z.shape();
        let lat = self.config.latent_shape();
        if shape.len() != 4 || shape[1..] != lat[..] {
            return Err(Error::InvalidShape { shape, reason: format!("decoder expects [N, {}, {}, {}]", lat[0], lat[1], lat[2]) });
        }
        let u = z.scale(1.0 / self.latent_scale);
        let h = self.conv(b, &u, "dec.0", 1)?.silu().upsample_nearest(2)?;
        let h = self.conv(b, &h, "dec.1", 1)?.silu().upsample_nearest(2)?;
        let h = self.conv(b, &h, "dec.2", 1)?.silu();
        Ok(self.conv(b, &h, "dec.3", 1)?.sigmoid())
    }

    /// Noise prediction for `z_t` (`[F, C, h, w]`, `F <= frames`) conditioned on
    /// the latent `z_cond` (`[C, h, w]`), timestep `t` and class `y`.
    pub fn denoise_with_taps<'t>(
        &self,
        b: &Binding<'_, 't>,
        z_t: &Var<'t>,
        z_cond: &Var<'t>,
        t: usize,
        y: usize,
    ) -> Result<DenoiserOutput<'t>> {
        let cfg = &self.config;
        let lat = cfg.latent_shape();
        let zs = z_t.shape();
        if zs.len() != 4 || zs[1..] != lat[..] || zs[0] > cfg.frames {
            return Err(Error::InvalidShape {
                shape: zs,
                reason: format!("denoiser expects [F <= {}, {}, {}, {}]", cfg.frames, lat[0], lat[1], lat[2]),
            });
        }
        if z_cond.shape() != lat {
            return Err(Error::shape("denoise condition", &lat, &z_cond.shape()));
        }
        self.schedule.check_t(t)?;
        if y >= cfg.num_classes {
            return Err(Error::OutOfRange { what: "class label", detail: format!("{y} not in [0, {})", cfg.num_classes) });
        }
        let tape = b.tape();
        let (f, c, hw) = (zs[0], cfg.hidden, cfg.latent_size());
        let mut cond_shape = vec![1];
        cond_shape.extend_from_slice(&lat);
        let cond = z_cond.reshape(cond_shape)?.broadcast_to(&zs)?;
        let input = tape.concat(&[*z_t, cond], 1)?;

        let t_emb = tape.constant(sinusoidal_embedding(t as f64, cfg.time_dim).reshape(vec![1, cfg.time_dim])?);
        let e = t_emb.matmul(&b.get("den.t.w"))?.add(&b.get("den.t.b"))?.silu().add(&b.get("den.cls").narrow(0, y, 1)?)?;

        let mut h = self.conv(b, &input, "den.in", 1)?;
        let pos = b.get("den.pos").narrow(0, 0, f)?;
        let scale = 1.0 / (c as f64).sqrt();
        let mut taps = Vec::with_capacity(cfg.blocks);
        let mut spatial = Vec::with_capacity(cfg.blocks);
        for j in 0..cfg.blocks {
            let p = |m: &str| b.get(&format!("den.blk{j}.{m}"));
            let shift = e.matmul(&p("e.w"))?.add(&p("e.b"))?.reshape(vec![1, c, 1, 1])?;
            let u = h.add(&shift)?.silu();
            h = h.add(&self.conv(b, &u, &format!("den.blk{j}.conv"), 1)?)?;
            spatial.push(h);

            // tokens: one sequence of F frames per spatial site
            let tokens = h.permute(&[2, 3, 0, 1])?.reshape(vec![hw * hw, f, c])?;
            let with_pos = tokens.add(&pos)?;
            let q = with_pos.matmul(&p("q"))?;
            let k = with_pos.matmul(&p("k"))?;
            let v = with_pos.matmul(&p("v"))?;
            let attn = q.matmul(&k.permute(&[0, 2, 1])?)?.scale(scale).softmax();
            let mixed = attn.matmul(&v)?.matmul(&p("o"))?;
            let back = mixed.reshape(vec![hw, hw, f, c])?.permute(&[2, 3, 0, 1])?;
            h = h.add(&back)?;
            taps.push(h);
        }
        let eps = self.conv(b, &h.silu(), "den.out", 1)?;
        Ok(DenoiserOutput { eps, taps, spatial })
    }

    /// Scaled latent of a concrete image or batch, off the tape.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.bind(&tape, Trainable::None);
        Ok(self.encode_with_taps(&b, &tape.constant(x.clone()))?.latent.value())
    }

    /// Decoded images of concrete scaled latents, off the tape.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.bind(&tape, Trainable::None);
        Ok(self.decode(&b, &tape.constant(z.clone()))?.value())
    }
}
