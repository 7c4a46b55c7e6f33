//! Attack objectives built from the victim model's feature taps.
//!
//! All distances between feature maps are squared Euclidean distances divided
//! by the element count of the map. The objective that the perturbation
//! optimizer minimizes is
//!
//! ```text
//! w_irc * IRC + w_ira * (IRA_denoiser + IRA_encoder) + w_aux * (CLIP - LPIPS) - w_dm * DM
//! ```
//!
//! where CLIP and LPIPS are proxies computed from the frozen toy encoder.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Binding, ModelConfig, Trainable, VictimModel};

/// Number of reference-clip frames fed to the denoiser during an attack.
pub const ATTACK_FRAMES: usize = 4;

const UNIT_NORM_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub irc: f64,
    pub ira: f64,
    pub aux: f64,
    pub dm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { irc: 1.0, ira: 1.0, aux: 1.0, dm: 1.0 }
    }
}

impl LossWeights {
    /// Plain denoising-loss attack.
    pub fn dm_only() -> Self {
        Self { irc: 0.0, ira: 0.0, aux: 0.0, dm: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("irc", self.irc), ("ira", self.ira), ("aux", self.aux), ("dm", self.dm)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::OutOfRange { what: "loss weight", detail: format!("{name} = {w} must be finite and nonnegative") });
            }
        }
        Ok(())
    }
}

/// Which taps each loss reads. Indices are zero-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSelection {
    /// Early denoiser block that deep blocks are pulled toward.
    pub early: usize,
    /// Deep denoiser blocks for the collapse loss.
    pub deep: Vec<usize>,
    /// Denoiser blocks compared by the anchor loss; may be empty.
    pub ira_denoiser: Vec<usize>,
    /// Encoder layers compared by the anchor loss; may be empty.
    pub ira_encoder: Vec<usize>,
}

impl LayerSelection {
    /// Third block as the early layer, the last three blocks as deep layers,
    /// every block and encoder layer for the anchor loss.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        let b = cfg.blocks;
        Self {
            early: 2,
            deep: (b.saturating_sub(3)..b).collect(),
            ira_denoiser: (0..b).collect(),
            ira_encoder: (0..cfg.encoder_layers()).collect(),
        }
    }

    /// Default selection with the collapse loss on the last `k` blocks only.
    pub fn last_k(cfg: &ModelConfig, k: usize) -> Result<Self> {
        let b = cfg.blocks;
        let sel = Self { deep: (b.saturating_sub(k)..b).collect(), ..Self::for_model(cfg) };
        sel.validate(cfg)?;
        Ok(sel)
    }

    /// Default selection with the collapse loss on every block after the early one.
    pub fn full(cfg: &ModelConfig) -> Self {
        let base = Self::for_model(cfg);
        Self { deep: (base.early + 1..cfg.blocks).collect(), ..base }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let bad = |detail: String| Err(Error::OutOfRange { what: "layer selection", detail });
        if self.deep.is_empty() {
            return bad("deep layer set is empty".into());
        }
        if self.deep.contains(&self.early) {
            return bad(format!("early layer {} is also a deep layer", self.early));
        }
        let blocks = cfg.blocks;
        if let Some(j) = self.deep.iter().chain(&self.ira_denoiser).chain([&self.early]).find(|&&j| j >= blocks) {
            return bad(format!("block {j} with {blocks} blocks"));
        }
        let enc = cfg.encoder_layers();
        if let Some(n) = self.ira_encoder.iter().find(|&&n| n >= enc) {
            return bad(format!("encoder layer {n} with {enc} layers"));
        }
        Ok(())
    }
}

/// Targeted attacks pull features toward a decoy image; untargeted attacks
/// push them away from the clean image.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum AttackMode {
    #[default]
    Untargeted,
    Targeted(Tensor),
}

impl AttackMode {
    pub fn is_targeted(&self) -> bool {
        matches!(self, AttackMode::Targeted(_))
    }

    /// The image the anchor loss compares against.
    pub fn anchor<'a>(&'a self, clean: &'a Tensor) -> &'a Tensor {
        match self {
            AttackMode::Untargeted => clean,
            AttackMode::Targeted(t) => t,
        }
    }

    pub fn validate(&self, clean: &Tensor) -> Result<()> {
        match self {
            AttackMode::Targeted(t) if t.shape() != clean.shape() => Err(Error::shape("target image", clean.shape(), t.shape())),
            _ => Ok(()),
        }
    }
}

/// Squared distance divided by the element count.
pub fn normalized_sq_distance<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    a.mse(b)
}

fn zero<'t>(tape: &'t Tape) -> Var<'t> {
    tape.constant(Tensor::scalar(0.0))
}

fn sum_terms<'t>(tape: &'t Tape, terms: impl IntoIterator<Item = Result<Var<'t>>>) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for t in terms {
        let t = t?;
        acc = Some(match acc {
            None => t,
            Some(a) => a.add(&t)?,
        });
    }
    Ok(acc.unwrap_or_else(|| zero(tape)))
}

/// Resample an early `[F, C, h, w]` map to the spatial size of a deep map by
/// average pooling (shrinking) or nearest upsampling (growing).
fn align_spatial<'t>(early: &Var<'t>, target: &[usize]) -> Result<Var<'t>> {
    let s = early.shape();
    if s == target {
        return Ok(*early);
    }
    let mismatch = || Error::shape("collapse loss layer alignment", target, &s);
    if s.len() != 4 || target.len() != 4 || s[..2] != target[..2] {
        return Err(mismatch());
    }
    let (h, w, th, tw) = (s[2], s[3], target[2], target[3]);
    if h >= th && h % th == 0 && w % tw == 0 && h / th == w / tw {
        early.avg_pool2d(h / th)
    } else if th > h && th % h == 0 && tw % w == 0 && th / h == tw / w {
        early.upsample_nearest(th / h)
    } else {
        Err(mismatch())
    }
}

/// Collapse loss: the sum over deep blocks of their normalized distance to the early block.
pub fn loss_irc<'t>(taps: &[Var<'t>], sel: &LayerSelection) -> Result<Var<'t>> {
    let n = taps.len();
    if sel.deep.is_empty() || sel.deep.contains(&sel.early) {
        return Err(Error::invalid("collapse loss needs a nonempty deep set without the early layer"));
    }
    if let Some(j) = sel.deep.iter().chain([&sel.early]).find(|&&j| j >= n) {
        return Err(Error::OutOfRange { what: "collapse loss layer", detail: format!("{j} with {n} taps") });
    }
    let early = taps[sel.early];
    sum_terms(
        early.tape(),
        sel.deep.iter().map(|&j| {
            let e = align_spatial(&early, &taps[j].shape())?;
            normalized_sq_distance(&taps[j], &e)
        }),
    )
}

fn anchor_distance<'t>(a: &[Var<'t>], b: &[Var<'t>], layers: &[usize], targeted: bool) -> Result<Var<'t>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("tap lists of length {} and {}", a.len(), b.len())));
    }
    if let Some(m) = layers.iter().find(|&&m| m >= a.len()) {
        return Err(Error::OutOfRange { what: "anchor loss layer", detail: format!("{m} with {} taps", a.len()) });
    }
    let total = sum_terms(a[0].tape(), layers.iter().map(|&m| normalized_sq_distance(&a[m], &b[m])))?;
    Ok(if targeted { total } else { total.neg() })
}

/// Anchor loss over denoiser blocks. Both tap lists must come from the same
/// noisy latents, timestep and class.
pub fn loss_ira_denoiser<'t>(taps_xi: &[Var<'t>], taps_psi: &[Var<'t>], layers: &[usize], targeted: bool) -> Result<Var<'t>> {
    anchor_distance(taps_xi, taps_psi, layers, targeted)
}

/// Anchor loss over encoder layers.
pub fn loss_ira_encoder<'t>(taps_xi: &[Var<'t>], taps_psi: &[Var<'t>], layers: &[usize], targeted: bool) -> Result<Var<'t>> {
    anchor_distance(taps_xi, taps_psi, layers, targeted)
}

pub fn loss_ira<'t>(denoiser: &Var<'t>, encoder: &Var<'t>) -> Result<Var<'t>> {
    denoiser.add(encoder)
}

/// Mean squared error between a noise prediction and the true noise.
pub fn denoising_error<'t>(eps_hat: &Var<'t>, eps: &Var<'t>) -> Result<Var<'t>> {
    eps_hat.mse(eps)
}

/// Denoising loss at one `(t, eps)` draw with `x_xi` as the conditioning image
/// and `z0` (`[F, C, h, w]`) as the clean clip latents.
pub fn loss_dm<'t>(
    model: &VictimModel,
    b: &Binding<'_, 't>,
    x_xi: &Var<'t>,
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    y: usize,
) -> Result<Var<'t>> {
    let tape = b.tape();
    let cond = model.encode_with_taps(b, x_xi)?.latent;
    let zt = model.schedule().forward_noise(z0, t, eps)?;
    let out = model.denoise_with_taps(b, &tape.constant(zt), &cond, t, y)?;
    denoising_error(&out.eps, &tape.constant(eps.clone()))
}

/// Source of the features behind the perceptual proxies and the cosine metric.
pub trait FeatureExtractor {
    /// Feature maps `[N, C, H, W]` of an image `[3, H, W]`, shallow to deep.
    fn feature_maps<'t>(&self, tape: &'t Tape, x: &Var<'t>) -> Result<Vec<Var<'t>>>;

    /// Pooled embedding `[D]`; by default the channel means of the deepest map.
    fn embedding<'t>(&self, tape: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
        let maps = self.feature_maps(tape, x)?;
        let last = maps.last().ok_or_else(|| Error::invalid("extractor returned no feature maps"))?;
        pool_channels(last)
    }
}

/// The frozen toy encoder: its taps are the feature maps.
impl FeatureExtractor for VictimModel {
    fn feature_maps<'t>(&self, tape: &'t Tape, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let b = self.bind(tape, Trainable::None);
        Ok(self.encode_with_taps(&b, x)?.taps)
    }
}

/// Spatial mean of a `[1, C, H, W]` map, flattened to `[C]`.
pub fn pool_channels<'t>(map: &Var<'t>) -> Result<Var<'t>> {
    let s = map.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::InvalidShape { shape: s, reason: "pooling expects a single [1, C, H, W] map".into() });
    }
    map.mean_axis(3)?.mean_axis(2)?.reshape(vec![s[1]])
}

/// Divide every feature vector by its Euclidean norm across channels.
fn unit_normalize<'t>(map: &Var<'t>) -> Result<Var<'t>> {
    let norm = map.square().sum_axis(1)?.add_scalar(UNIT_NORM_EPS).sqrt();
    map.div(&norm)
}

/// CLIP-loss proxy on precomputed embeddings.
pub fn clip_proxy_from_embeddings<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    Ok(a.sub(b)?.sum_sq())
}

/// LPIPS proxy on precomputed maps: per layer, the spatial mean of the squared
/// distance between channel-normalized feature vectors, summed over layers.
pub fn lpips_proxy_from_maps<'t>(a: &[Var<'t>], b: &[Var<'t>]) -> Result<Var<'t>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("feature lists of length {} and {}", a.len(), b.len())));
    }
    sum_terms(
        a[0].tape(),
        a.iter().zip(b).map(|(fa, fb)| {
            let d = unit_normalize(fa)?.sub(&unit_normalize(fb)?)?;
            Ok(d.square().sum_axis(1)?.mean())
        }),
    )
}

pub fn loss_clip_proxy<'t>(ext: &dyn FeatureExtractor, tape: &'t Tape, x_xi: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    clip_proxy_from_embeddings(&ext.embedding(tape, x_xi)?, &ext.embedding(tape, x)?)
}

pub fn loss_lpips_proxy<'t>(ext: &dyn FeatureExtractor, tape: &'t Tape, x_xi: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    lpips_proxy_from_maps(&ext.feature_maps(tape, x_xi)?, &ext.feature_maps(tape, x)?)
}

/// `CLIP - LPIPS`, as the auxiliary term is written: minimizing it keeps the
/// embedding close while pushing the perceptual distance up.
pub fn loss_auxiliary<'t>(ext: &dyn FeatureExtractor, tape: &'t Tape, x_xi: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    loss_clip_proxy(ext, tape, x_xi, x)?.sub(&loss_lpips_proxy(ext, tape, x_xi, x)?)
}

/// Individual terms of the objective.
#[derive(Clone, Copy)]
pub struct Components<'t> {
    pub irc: Var<'t>,
    pub ira_denoiser: Var<'t>,
    pub ira_encoder: Var<'t>,
    pub clip: Var<'t>,
    pub lpips: Var<'t>,
    pub dm: Var<'t>,
}

/// Plain values of [`Components`] plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentValues {
    pub irc: f64,
    pub ira_denoiser: f64,
    pub ira_encoder: f64,
    pub clip: f64,
    pub lpips: f64,
    pub dm: f64,
    pub total: f64,
}

impl ComponentValues {
    pub fn aux(&self) -> f64 {
        self.clip - self.lpips
    }

    pub fn ira(&self) -> f64 {
        self.ira_denoiser + self.ira_encoder
    }

    /// The weighted total recomputed from the components.
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.irc * self.irc + w.ira * self.ira() + w.aux * self.aux() - w.dm * self.dm
    }
}

impl<'t> Components<'t> {
    pub fn values(&self, total: &Var<'t>) -> ComponentValues {
        ComponentValues {
            irc: self.irc.item(),
            ira_denoiser: self.ira_denoiser.item(),
            ira_encoder: self.ira_encoder.item(),
            clip: self.clip.item(),
            lpips: self.lpips.item(),
            dm: self.dm.item(),
            total: total.item(),
        }
    }
}

/// Weighted objective from its components.
pub fn loss_total<'t>(w: &LossWeights, c: &Components<'t>) -> Result<Var<'t>> {
    w.validate()?;
    let ira = loss_ira(&c.ira_denoiser, &c.ira_encoder)?;
    let aux = c.clip.sub(&c.lpips)?;
    c.irc.scale(w.irc).add(&ira.scale(w.ira))?.add(&aux.scale(w.aux))?.sub(&c.dm.scale(w.dm))
}

/// One stochastic draw for the expectation over timesteps and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor,
}

impl NoiseDraw {
    /// `t ~ U[0, T)`, `eps ~ N(0, I)` shaped like `latents`.
    pub fn sample(model: &VictimModel, latents: &[usize], rng: &mut impl Rng) -> Self {
        let t = rng.random_range(0..model.schedule().steps());
        let eps = Tensor::from_fn(latents.to_vec(), |_| StandardNormal.sample(rng));
        Self { t, eps }
    }
}

/// Perturbation-independent inputs of the objective, computed once per image.
#[derive(Clone, Debug)]
pub struct ObjectiveContext {
    pub clean: Tensor,
    pub label: usize,
    pub targeted: bool,
    /// Latents of the reference clip's first frames, `[F, C, h, w]`.
    pub clip_latents: Tensor,
    anchor_latent: Tensor,
    anchor_taps: Vec<Tensor>,
    clean_maps: Vec<Tensor>,
    clean_embedding: Tensor,
}

impl ObjectiveContext {
    /// `reference` is a `[F, 3, H, W]` clip of the subject; at most
    /// [`ATTACK_FRAMES`] of its frames are used.
    pub fn new(model: &VictimModel, clean: &Tensor, reference: &Tensor, mode: &AttackMode, label: usize) -> Result<Self> {
        mode.validate(clean)?;
        let s = model.config().image_size;
        if clean.shape() != [3, s, s] {
            return Err(Error::shape("clean image", &[3, s, s], clean.shape()));
        }
        let rs = reference.shape();
        if rs.len() != 4 || rs[1..] != [3, s, s] {
            return Err(Error::InvalidShape { shape: rs.to_vec(), reason: format!("reference clip must be [F, 3, {s}, {s}]") });
        }
        let frames = rs[0].min(ATTACK_FRAMES).min(model.config().frames);
        let clip_latents = model.encode(&reference.narrow0(0, frames)?)?;
        let anchor = mode.anchor(clean);
        let tape = Tape::new();
        let b = model.bind(&tape, Trainable::None);
        let enc = model.encode_with_taps(&b, &tape.constant(anchor.clone()))?;
        let anchor_latent = enc.latent.value();
        let anchor_taps = enc.taps.iter().map(Var::value).collect();
        let clean_maps = model.feature_maps(&tape, &tape.constant(clean.clone()))?;
        let clean_embedding = pool_channels(clean_maps.last().expect("encoder has layers"))?.value();
        Ok(Self {
            clean: clean.clone(),
            label,
            targeted: mode.is_targeted(),
            clip_latents,
            anchor_latent,
            anchor_taps,
            clean_maps: clean_maps.iter().map(Var::value).collect(),
            clean_embedding,
        })
    }

    pub fn latent_shape(&self) -> &[usize] {
        self.clip_latents.shape()
    }
}

/// Full objective for the adversarial image `x_xi`, averaged over `draws`.
/// Encoder-side terms do not depend on the draw and are computed once.
pub fn objective<'t>(
    model: &VictimModel,
    b: &Binding<'_, 't>,
    x_xi: &Var<'t>,
    ctx: &ObjectiveContext,
    draws: &[NoiseDraw],
    sel: &LayerSelection,
    weights: &LossWeights,
) -> Result<(Var<'t>, Components<'t>)> {
    weights.validate()?;
    sel.validate(model.config())?;
    if draws.is_empty() {
        return Err(Error::invalid("objective needs at least one noise draw"));
    }
    let tape = b.tape();
    let enc = model.encode_with_taps(b, x_xi)?;
    let anchor_taps: Vec<Var<'t>> = ctx.anchor_taps.iter().map(|t| tape.constant(t.clone())).collect();
    let ira_encoder = loss_ira_encoder(&enc.taps, &anchor_taps, &sel.ira_encoder, ctx.targeted)?;
    let clean_maps: Vec<Var<'t>> = ctx.clean_maps.iter().map(|t| tape.constant(t.clone())).collect();
    let clip = clip_proxy_from_embeddings(
        &pool_channels(enc.taps.last().expect("encoder has layers"))?,
        &tape.constant(ctx.clean_embedding.clone()),
    )?;
    let lpips = lpips_proxy_from_maps(&enc.taps, &clean_maps)?;

    let inv = 1.0 / draws.len() as f64;
    let (mut irc, mut ira_den, mut dm) = (zero(tape), zero(tape), zero(tape));
    for d in draws {
        let zt = tape.constant(model.schedule().forward_noise(&ctx.clip_latents, d.t, &d.eps)?);
        let out = model.denoise_with_taps(b, &zt, &enc.latent, d.t, ctx.label)?;
        dm = dm.add(&denoising_error(&out.eps, &tape.constant(d.eps.clone()))?.scale(inv))?;
        irc = irc.add(&loss_irc(&out.taps, sel)?.scale(inv))?;
        if !sel.ira_denoiser.is_empty() {
            let anchor = tape.constant(ctx.anchor_latent.clone());
            let psi = model.denoise_with_taps(b, &zt, &anchor, d.t, ctx.label)?;
            let term = loss_ira_denoiser(&out.taps, &psi.taps, &sel.ira_denoiser, ctx.targeted)?;
            ira_den = ira_den.add(&term.scale(inv))?;
        }
    }
    let parts = Components { irc, ira_denoiser: ira_den, ira_encoder, clip, lpips, dm };
    Ok((loss_total(weights, &parts)?, parts))
}
