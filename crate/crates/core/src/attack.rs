//! Perturbation optimization over chroma, low-frequency DCT and pixel deltas.
//!
//! Rendering order per iteration: clip the chroma deltas, add them to a*/b*
//! and convert back to RGB, add the pixel delta, inject the masked frequency
//! delta, clip to the budget box around the clean image, clip to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::colorspace::{lab_delta_scale, lab_to_rgb, rgb_to_lab};
use crate::error::{Error, Result};
use crate::eval::{protection_metrics, psnr, MetricSettings, ProtectionMetrics};
use crate::frequency::{apply_masked_delta, make_lowfreq_mask};
use crate::losses::{objective, AttackMode, ComponentValues, LayerSelection, LossWeights, NoiseDraw, ObjectiveContext};
use crate::model::{Trainable, VictimModel};
use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Space {
    Rgb,
    Lab,
    Freq,
    LabFreq,
    RgbLab,
    RgbFreq,
    RgbLabFreq,
}

impl Space {
    pub const ALL: [Space; 7] = [Space::Rgb, Space::Lab, Space::Freq, Space::LabFreq, Space::RgbLab, Space::RgbFreq, Space::RgbLabFreq];

    pub fn has_rgb(self) -> bool {
        matches!(self, Space::Rgb | Space::RgbLab | Space::RgbFreq | Space::RgbLabFreq)
    }

    pub fn has_lab(self) -> bool {
        matches!(self, Space::Lab | Space::LabFreq | Space::RgbLab | Space::RgbLabFreq)
    }

    pub fn has_freq(self) -> bool {
        matches!(self, Space::Freq | Space::LabFreq | Space::RgbFreq | Space::RgbLabFreq)
    }

    pub fn name(self) -> &'static str {
        match self {
            Space::Rgb => "rgb",
            Space::Lab => "lab",
            Space::Freq => "freq",
            Space::LabFreq => "lab+freq",
            Space::RgbLab => "rgb+lab",
            Space::RgbFreq => "rgb+freq",
            Space::RgbLabFreq => "rgb+lab+freq",
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts: Vec<&str> = s.split('+').map(str::trim).collect();
        parts.sort_unstable();
        parts.dedup();
        let has = |p: &str| parts.contains(&p);
        if parts.iter().any(|p| !["rgb", "lab", "freq"].contains(p)) {
            return Err(Error::invalid(format!("unknown perturbation space {s:?}")));
        }
        Space::ALL
            .into_iter()
            .find(|sp| sp.has_rgb() == has("rgb") && sp.has_lab() == has("lab") && sp.has_freq() == has("freq"))
            .ok_or_else(|| Error::invalid(format!("unknown perturbation space {s:?}")))
    }
}

impl TryFrom<String> for Space {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Space> for String {
    fn from(s: Space) -> String {
        s.name().to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// Final L-infinity bound around the clean image.
    pub budget_rgb: f64,
    /// Chroma budget as a fraction of the 255-unit a*/b* span.
    pub budget_lab: f64,
    pub mask_fraction: f64,
    pub iters: usize,
    pub lr: f64,
    /// Sign-step size of the pixel-space baseline.
    pub pgd_step: f64,
    pub space: Space,
    pub mode: AttackMode,
    pub weights: LossWeights,
    /// `None` selects [`LayerSelection::for_model`].
    pub layers: Option<LayerSelection>,
    pub seed: u64,
    /// Mask the whole perturbed spectrum instead of the perturbation only.
    pub literal_mask: bool,
    /// `(t, eps)` draws averaged per iteration.
    pub draws_per_step: usize,
    /// Window of the moving average used for best-state selection.
    pub smoothing_window: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            budget_rgb: 16.0 / 255.0,
            budget_lab: 16.0 / 255.0,
            mask_fraction: 0.25,
            iters: 200,
            lr: 1e-2,
            pgd_step: 1.0 / 255.0,
            space: Space::LabFreq,
            mode: AttackMode::Untargeted,
            weights: LossWeights::default(),
            layers: None,
            seed: 0,
            literal_mask: false,
            draws_per_step: 1,
            smoothing_window: 20,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &'static str, detail: String| Err(Error::OutOfRange { what, detail });
        if !(self.budget_rgb.is_finite() && self.budget_rgb >= 0.0) {
            return bad("RGB budget", format!("{}", self.budget_rgb));
        }
        if !(self.budget_lab.is_finite() && self.budget_lab >= 0.0) {
            return bad("Lab budget", format!("{}", self.budget_lab));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return bad("mask fraction", format!("{} is not in (0, 1]", self.mask_fraction));
        }
        if self.iters == 0 {
            return bad("iterations", "must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("learning rate", format!("{}", self.lr));
        }
        if !(self.pgd_step.is_finite() && self.pgd_step >= 0.0) {
            return bad("PGD step", format!("{}", self.pgd_step));
        }
        if self.draws_per_step == 0 || self.smoothing_window == 0 {
            return bad("draws and smoothing window", "must be at least 1".into());
        }
        self.weights.validate()
    }

    pub fn layer_selection(&self, model: &VictimModel) -> Result<LayerSelection> {
        let sel = self.layers.clone().unwrap_or_else(|| LayerSelection::for_model(model.config()));
        sel.validate(model.config())?;
        Ok(sel)
    }

    /// Native a*/b* bound.
    pub fn lab_bound(&self) -> f64 {
        self.budget_lab * lab_delta_scale()
    }
}

/// Optimized deltas and their optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationState {
    /// a* delta in native units, `[H, W]`.
    pub delta_a: Tensor,
    /// b* delta in native units, `[H, W]`.
    pub delta_b: Tensor,
    /// DCT-coefficient delta, `[3, H, W]`.
    pub delta_freq: Tensor,
    /// Pixel delta, `[3, H, W]`.
    pub delta_rgb: Tensor,
    pub optimizer: AdamW,
    pub iteration: usize,
}

impl PerturbationState {
    pub fn zeros(h: usize, w: usize, lr: f64) -> Self {
        let shapes = [vec![h, w], vec![h, w], vec![3, h, w], vec![3, h, w]];
        Self {
            delta_a: Tensor::zeros(shapes[0].clone()),
            delta_b: Tensor::zeros(shapes[1].clone()),
            delta_freq: Tensor::zeros(shapes[2].clone()),
            delta_rgb: Tensor::zeros(shapes[3].clone()),
            optimizer: AdamW::new(AdamWConfig { lr, ..Default::default() }, &shapes),
            iteration: 0,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> DeltaVars<'t> {
        DeltaVars {
            a: tape.leaf(self.delta_a.clone(), requires_grad),
            b: tape.leaf(self.delta_b.clone(), requires_grad),
            freq: tape.leaf(self.delta_freq.clone(), requires_grad),
            rgb: tape.leaf(self.delta_rgb.clone(), requires_grad),
        }
    }

    /// Enforce the chroma and pixel bounds on the stored deltas.
    pub fn project(&mut self, cfg: &AttackConfig) {
        let lab = cfg.lab_bound();
        let rgb = cfg.budget_rgb;
        for v in self.delta_a.data_mut().iter_mut().chain(self.delta_b.data_mut()) {
            *v = v.clamp(-lab, lab);
        }
        for v in self.delta_rgb.data_mut() {
            *v = v.clamp(-rgb, rgb);
        }
    }
}

/// The deltas of a [`PerturbationState`] on a tape.
#[derive(Clone, Copy)]
pub struct DeltaVars<'t> {
    pub a: Var<'t>,
    pub b: Var<'t>,
    pub freq: Var<'t>,
    pub rgb: Var<'t>,
}

/// Everything up to, but not including, the final box and range clips.
fn render_unclipped<'t>(x: &Var<'t>, d: &DeltaVars<'t>, cfg: &AttackConfig, mask: &Tensor, freq: bool) -> Result<Var<'t>> {
    let tape = x.tape();
    let shape = x.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut cur = *x;
    if cfg.space.has_lab() {
        let bound = cfg.lab_bound();
        let plane = |v: &Var<'t>| v.clip(-bound, bound).reshape(vec![1, h, w]);
        let delta = tape.concat(&[tape.constant(Tensor::zeros(vec![1, h, w])), plane(&d.a)?, plane(&d.b)?], 0)?;
        cur = lab_to_rgb(&rgb_to_lab(&cur)?.add(&delta)?)?;
    }
    if cfg.space.has_rgb() {
        cur = cur.add(&d.rgb.clip(-cfg.budget_rgb, cfg.budget_rgb))?;
    }
    if freq && cfg.space.has_freq() {
        cur = apply_masked_delta(&cur, &d.freq, mask, cfg.literal_mask)?;
    }
    Ok(cur)
}

/// Adversarial image for clean `x` (`[3, H, W]`) on the tape.
pub fn render_on_tape<'t>(x: &Var<'t>, d: &DeltaVars<'t>, cfg: &AttackConfig, mask: &Tensor) -> Result<Var<'t>> {
    let clean = x.value();
    let lo = clean.map(|v| v - cfg.budget_rgb);
    let hi = clean.map(|v| v + cfg.budget_rgb);
    render_unclipped(x, d, cfg, mask, true)?.clip_between(&lo, &hi).map(|v| v.clip(0.0, 1.0))
}

fn check_image(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [3, h, w] if *h >= 2 && *w >= 2 => Ok((*h, *w)),
        s => Err(Error::InvalidShape { shape: s.to_vec(), reason: "expected an RGB image [3, H, W]".into() }),
    }
}

/// Adversarial image off the tape.
pub fn render_adversarial(x: &Tensor, s: &PerturbationState, cfg: &AttackConfig) -> Result<Tensor> {
    let (h, w) = check_image(x)?;
    let mask = make_lowfreq_mask(h, w, cfg.mask_fraction)?;
    let tape = Tape::new();
    let d = s.bind(&tape, false);
    Ok(render_on_tape(&tape.constant(x.clone()), &d, cfg, &mask)?.value())
}

/// One optimizer iteration as recorded in the trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: ComponentValues,
    /// Moving average of `total` over the trailing window.
    pub smoothed_total: f64,
    /// `max |x_xi - x|` of the image this iteration evaluated.
    pub linf: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    /// Protected image of the retained state.
    pub image: Tensor,
    pub state: PerturbationState,
    pub trace: Vec<TraceRecord>,
    /// Iteration whose state was retained.
    pub best_iteration: usize,
    /// Set when the run stopped early on a non-finite loss.
    pub aborted: Option<String>,
}

fn iteration_draws(model: &VictimModel, ctx: &ObjectiveContext, cfg: &AttackConfig, k: usize) -> Vec<NoiseDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64 + 1);
    (0..cfg.draws_per_step).map(|_| NoiseDraw::sample(model, ctx.latent_shape(), &mut rng)).collect()
}

/// Keeps the state whose trailing-window mean loss is lowest. Candidates are
/// considered once the window is full, and the final iteration always is.
struct BestTracker {
    window: usize,
    recent: Vec<f64>,
    best: Option<(f64, usize, PerturbationState, Tensor)>,
}

impl BestTracker {
    fn new(window: usize) -> Self {
        Self { window, recent: Vec::new(), best: None }
    }

    fn push(&mut self, total: f64) -> f64 {
        self.recent.push(total);
        let n = self.recent.len().min(self.window);
        self.recent[self.recent.len() - n..].iter().sum::<f64>() / n as f64
    }

    fn offer(&mut self, k: usize, last: bool, smoothed: f64, state: &PerturbationState, image: &Tensor) {
        let eligible = self.recent.len() >= self.window || (last && self.best.is_none());
        if eligible && self.best.as_ref().is_none_or(|b| smoothed < b.0) {
            self.best = Some((smoothed, k, state.clone(), image.clone()));
        }
    }

    fn finish(self, trace: Vec<TraceRecord>, aborted: Option<String>, fallback: (PerturbationState, Tensor)) -> AttackOutcome {
        let (best_iteration, state, image) = match self.best {
            Some((_, k, s, img)) => (k, s, img),
            None => (0, fallback.0, fallback.1),
        };
        AttackOutcome { image, state, trace, best_iteration, aborted }
    }
}

fn prepare(
    x: &Tensor,
    y: usize,
    model: &VictimModel,
    cfg: &AttackConfig,
    reference: &Tensor,
) -> Result<(ObjectiveContext, LayerSelection)> {
    if !model.is_trained() {
        return Err(Error::Untrained);
    }
    cfg.validate()?;
    check_image(x)?;
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::OutOfRange { what: "clean image", detail: "pixel values must lie in [0, 1]".into() });
    }
    let ctx = ObjectiveContext::new(model, x, reference, &cfg.mode, y)?;
    Ok((ctx, cfg.layer_selection(model)?))
}

/// Adaptive-moment descent on the chroma, frequency and pixel deltas enabled
/// by `cfg.space`. `reference` is a `[F, 3, H, W]` clip of the subject.
pub fn dsp_optimize(x: &Tensor, reference: &Tensor, y: usize, model: &VictimModel, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let (ctx, sel) = prepare(x, y, model, cfg, reference)?;
    let (h, w) = check_image(x)?;
    let mask = make_lowfreq_mask(h, w, cfg.mask_fraction)?;
    let mut state = PerturbationState::zeros(h, w, cfg.lr);
    let mut tracker = BestTracker::new(cfg.smoothing_window);
    let mut trace = Vec::with_capacity(cfg.iters);
    for k in 0..cfg.iters {
        let draws = iteration_draws(model, &ctx, cfg, k);
        let tape = Tape::new();
        let b = model.bind(&tape, Trainable::None);
        let d = state.bind(&tape, true);
        let xv = tape.constant(x.clone());
        let xi = render_on_tape(&xv, &d, cfg, &mask)?;
        let (total, parts) = objective(model, &b, &xi, &ctx, &draws, &sel, &cfg.weights)?;
        let values = parts.values(&total);
        let image = xi.value();
        if !values.total.is_finite() {
            let msg = format!("non-finite loss at iteration {k}");
            return Ok(tracker.finish(trace, Some(msg), (state, image)));
        }
        let smoothed = tracker.push(values.total);
        trace.push(TraceRecord {
            iteration: k,
            loss: values,
            smoothed_total: smoothed,
            linf: image.max_abs_diff(x)?,
            psnr: psnr(x, &image)?,
        });
        tracker.offer(k, k + 1 == cfg.iters, smoothed, &state, &image);
        if k + 1 == cfg.iters {
            return Ok(tracker.finish(trace, None, (state, image)));
        }
        let grads = tape.backward(total)?;
        let g: Vec<Tensor> = [d.a, d.b, d.freq, d.rgb].iter().map(|v| grads.wrt(*v).cloned()).collect::<Result<_>>()?;
        if g.iter().any(|t| !t.all_finite()) {
            let msg = format!("non-finite gradient at iteration {k}");
            return Ok(tracker.finish(trace, Some(msg), (state, image)));
        }
        let PerturbationState { delta_a, delta_b, delta_freq, delta_rgb, optimizer, .. } = &mut state;
        optimizer.update(&mut [delta_a, delta_b, delta_freq, delta_rgb], &[&g[0], &g[1], &g[2], &g[3]])?;
        state.project(cfg);
        state.iteration = k + 1;
    }
    unreachable!("the loop returns on its last iteration")
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Proj(current + step * sgn(grad))` onto the budget box around `clean` and
/// onto `[0, 1]`. `grad` is the gradient of the quantity being increased.
pub fn pgd_ascent_step(current: &Tensor, clean: &Tensor, grad: &Tensor, step: f64, budget: f64) -> Result<Tensor> {
    if current.shape() != clean.shape() || grad.shape() != clean.shape() {
        return Err(Error::shape("pgd step", clean.shape(), grad.shape()));
    }
    Ok(Tensor::from_fn(clean.shape().to_vec(), |i| {
        let moved = current.data()[i] + step * sign(grad.data()[i]);
        let c = clean.data()[i];
        moved.clamp(c - budget, c + budget).clamp(0.0, 1.0)
    }))
}

/// Pixel-space sign-gradient baseline. It maximizes the attack gain
/// `-objective`, so it pushes in the same direction as [`dsp_optimize`].
pub fn pgd_rgb(x: &Tensor, reference: &Tensor, y: usize, model: &VictimModel, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let (ctx, sel) = prepare(x, y, model, cfg, reference)?;
    let (h, w) = check_image(x)?;
    let mut state = PerturbationState::zeros(h, w, cfg.lr);
    let mut current = x.clone();
    let mut tracker = BestTracker::new(cfg.smoothing_window);
    let mut trace = Vec::with_capacity(cfg.iters);
    for k in 0..cfg.iters {
        state.delta_rgb = current.zip_map(x, |a, b| a - b)?;
        state.iteration = k;
        let draws = iteration_draws(model, &ctx, cfg, k);
        let tape = Tape::new();
        let b = model.bind(&tape, Trainable::None);
        let xv = tape.var(current.clone());
        let (total, parts) = objective(model, &b, &xv, &ctx, &draws, &sel, &cfg.weights)?;
        let values = parts.values(&total);
        if !values.total.is_finite() {
            let msg = format!("non-finite loss at iteration {k}");
            return Ok(tracker.finish(trace, Some(msg), (state, current)));
        }
        let smoothed = tracker.push(values.total);
        trace.push(TraceRecord {
            iteration: k,
            loss: values,
            smoothed_total: smoothed,
            linf: current.max_abs_diff(x)?,
            psnr: psnr(x, &current)?,
        });
        tracker.offer(k, k + 1 == cfg.iters, smoothed, &state, &current);
        if k + 1 == cfg.iters {
            break;
        }
        let grad = tape.backward(total)?.wrt(xv)?.map(|g| -g);
        current = pgd_ascent_step(&current, x, &grad, cfg.pgd_step, cfg.budget_rgb)?;
    }
    Ok(tracker.finish(trace, None, (state, current)))
}

/// Run the optimizer that owns `cfg.space`: the sign-gradient baseline for
/// pure pixel space, adaptive moments otherwise.
pub fn protect(x: &Tensor, reference: &Tensor, y: usize, model: &VictimModel, cfg: &AttackConfig) -> Result<AttackOutcome> {
    if cfg.space == Space::Rgb {
        pgd_rgb(x, reference, y, model, cfg)
    } else {
        dsp_optimize(x, reference, y, model, cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceRow {
    pub space: Space,
    pub best_iteration: usize,
    #[serde(flatten)]
    pub metrics: ProtectionMetrics,
}

/// One run per space with the denoising loss as the only objective and the
/// same seed in every run.
pub fn ablate_spaces(
    x: &Tensor,
    reference: &Tensor,
    y: usize,
    model: &VictimModel,
    base: &AttackConfig,
    spaces: &[Space],
    metrics: &MetricSettings,
) -> Result<Vec<SpaceRow>> {
    spaces
        .iter()
        .map(|&space| {
            let cfg = AttackConfig { space, weights: LossWeights::dm_only(), ..base.clone() };
            let out = protect(x, reference, y, model, &cfg)?;
            Ok(SpaceRow {
                space,
                best_iteration: out.best_iteration,
                metrics: protection_metrics(model, x, &out.image, reference, y, metrics)?,
            })
        })
        .collect()
}
