//! Image transforms, similarity metrics and generation-based degradation scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::frequency::dct_matrix;
use crate::losses::{denoising_error, loss_lpips_proxy, FeatureExtractor, NoiseDraw, ATTACK_FRAMES};
use crate::model::{generate, SyntheticClip, Trainable, VictimModel};

/// Reported PSNR of identical images.
pub const PSNR_CAP: f64 = 99.0;

/// JPEG Annex K luminance quantization table, row-major.
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51, 87, 80, 62, 18, 22,
    37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::InvalidShape { shape: s.to_vec(), reason: "expected an image [C, H, W]".into() }),
    }
}

/// Quantizer steps for `quality` in `[1, 100]` with the usual IJG scaling.
pub fn quant_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::OutOfRange { what: "JPEG quality", detail: format!("{quality} is not in [1, 100]") });
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &t) in out.iter_mut().zip(&LUMA_QUANT) {
        *o = ((t as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

/// Block DCT quantization on every channel with the luminance table; no
/// chroma subsampling, no entropy coding. Partial edge blocks are padded by
/// edge replication.
pub fn jpeg_like(x: &Tensor, quality: u8) -> Result<Tensor> {
    let q = quant_table(quality)?;
    let (c, h, w) = image_dims(x)?;
    let d = dct_matrix(8);
    let d = d.data();
    let mut out = x.clone();
    let mut block = [0.0; 64];
    let mut tmp = [0.0; 64];
    for ch in 0..c {
        let plane = ch * h * w;
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for i in 0..8 {
                    for j in 0..8 {
                        let (y, xx) = ((by + i).min(h - 1), (bx + j).min(w - 1));
                        block[i * 8 + j] = x.data()[plane + y * w + xx] * 255.0 - 128.0;
                    }
                }
                // coefficients: D * B * D^T
                for u in 0..8 {
                    for j in 0..8 {
                        tmp[u * 8 + j] = (0..8).map(|i| d[u * 8 + i] * block[i * 8 + j]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let coef: f64 = (0..8).map(|j| tmp[u * 8 + j] * d[v * 8 + j]).sum();
                        let step = q[u * 8 + v];
                        block[u * 8 + v] = (coef / step).round() * step;
                    }
                }
                // inverse: D^T * C * D
                for i in 0..8 {
                    for v in 0..8 {
                        tmp[i * 8 + v] = (0..8).map(|u| d[u * 8 + i] * block[u * 8 + v]).sum();
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let (y, xx) = (by + i, bx + j);
                        if y < h && xx < w {
                            let v: f64 = (0..8).map(|v| tmp[i * 8 + v] * d[v * 8 + j]).sum();
                            out.data_mut()[plane + y * w + xx] = ((v + 128.0) / 255.0).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size < 3 || size % 2 == 0 {
        return Err(Error::OutOfRange { what: "blur kernel", detail: format!("size {size} must be odd and at least 3") });
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::OutOfRange { what: "blur sigma", detail: format!("{sigma}") });
    }
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / s).collect())
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * n - 2 - i };
    }
    i as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(x: &Tensor, size: usize, sigma: f64) -> Result<Tensor> {
    let k = gaussian_kernel(size, sigma)?;
    let (c, h, w) = image_dims(x)?;
    if h < 2 || w < 2 || size / 2 >= h.min(w) {
        return Err(Error::invalid(format!("kernel {size} is too large for a {h}x{w} image")));
    }
    let r = (size / 2) as isize;
    let src = x.data();
    let mut rows = vec![0.0; c * h * w];
    for p in 0..c * h {
        for j in 0..w {
            rows[p * w + j] = k.iter().enumerate().map(|(t, kv)| kv * src[p * w + reflect(j as isize + t as isize - r, w)]).sum();
        }
    }
    Ok(Tensor::from_fn(vec![c, h, w], |idx| {
        let (ch, i, j) = (idx / (h * w), (idx / w) % h, idx % w);
        k.iter().enumerate().map(|(t, kv)| kv * rows[(ch * h + reflect(i as isize + t as isize - r, h)) * w + j]).sum()
    }))
}

/// `scale * eps` with `eps` i.i.d. standard normal, before any clipping.
pub fn noise_field(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let e: f64 = StandardNormal.sample(&mut rng);
        scale * e
    })
}

pub fn gaussian_noise(x: &Tensor, scale: f64, seed: u64) -> Result<Tensor> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::OutOfRange { what: "noise scale", detail: format!("{scale}") });
    }
    x.zip_map(&noise_field(x.shape(), scale, seed), |a, n| (a + n).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    JpegLike { quality: u8 },
    GaussianBlur { kernel: usize, sigma: f64 },
    GaussianNoise { scale: f64, seed: u64 },
}

impl TransformSpec {
    /// The three robustness transforms at their standard settings.
    pub fn standard_suite(seed: u64) -> Vec<TransformSpec> {
        vec![
            TransformSpec::JpegLike { quality: 40 },
            TransformSpec::GaussianBlur { kernel: 7, sigma: 1.5 },
            TransformSpec::GaussianNoise { scale: 0.05, seed },
        ]
    }

    pub fn name(&self) -> String {
        match self {
            TransformSpec::JpegLike { quality } => format!("jpeg_q{quality}"),
            TransformSpec::GaussianBlur { kernel, sigma } => format!("blur_k{kernel}_s{sigma}"),
            TransformSpec::GaussianNoise { scale, .. } => format!("noise_{scale}"),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match *self {
            TransformSpec::JpegLike { quality } => jpeg_like(x, quality),
            TransformSpec::GaussianBlur { kernel, sigma } => gaussian_blur(x, kernel, sigma),
            TransformSpec::GaussianNoise { scale, seed } => gaussian_noise(x, scale, seed),
        }
    }
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let mse = a.zip_map(b, |x, y| (x - y) * (x - y))?.mean();
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..n).map(|t| k[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..n).map(|t| k[t] * rows[(i + t) * wo + j]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5) over the
/// valid region, averaged over channels and positions. Images are in `[0, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let (c, h, w) = image_dims(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(pb).map(|(x, y)| f(*x, *y)).collect() };
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
        let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
        let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let (va, vb, cov) = (e_aa[i] - ma * ma, e_bb[i] - mb * mb, e_ab[i] - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::invalid(format!("cosine of vectors of length {} and {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn embed(ext: &dyn FeatureExtractor, x: &Tensor) -> Result<Vec<f64>> {
    let tape = Tape::new();
    Ok(ext.embedding(&tape, &tape.constant(x.clone()))?.value().into_data())
}

/// Last feature map, flattened: spatial tokens rather than a pooled summary,
/// so frame-to-frame structure changes register.
pub fn frame_features(ext: &dyn FeatureExtractor, x: &Tensor) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let maps = ext.feature_maps(&tape, &tape.constant(x.clone()))?;
    let last = maps.last().ok_or_else(|| Error::invalid("extractor returned no feature maps"))?;
    Ok(last.value().into_data())
}

/// Cosine similarity of pooled features.
pub fn feature_cosine(a: &Tensor, b: &Tensor, ext: &dyn FeatureExtractor) -> Result<f64> {
    cosine(&embed(ext, a)?, &embed(ext, b)?)
}

/// Quality of one generated clip relative to the subject image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipQuality {
    /// PSNR of the first frame against the subject image.
    pub recon_psnr: f64,
    /// Mean cosine of adjacent frames' spatial features.
    pub consistency: f64,
    /// Mean cosine of each frame's spatial features with the subject image's.
    pub fidelity: f64,
}

pub fn clip_quality(clip: &SyntheticClip, subject: &Tensor, ext: &dyn FeatureExtractor) -> Result<ClipQuality> {
    let n = clip.num_frames();
    let feats = (0..n).map(|k| frame_features(ext, &clip.frame(k))).collect::<Result<Vec<_>>>()?;
    let subject_feat = frame_features(ext, subject)?;
    let consistency = if n > 1 { feats.windows(2).map(|p| cosine(&p[0], &p[1])).sum::<Result<f64>>()? / (n - 1) as f64 } else { 1.0 };
    let fidelity = feats.iter().map(|f| cosine(f, &subject_feat)).sum::<Result<f64>>()? / n as f64;
    Ok(ClipQuality { recon_psnr: psnr(&clip.frame(0), subject)?, consistency, fidelity })
}

/// Protected-minus-clean differences for one generation seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub seed: u64,
    pub recon_delta: f64,
    pub consistency_delta: f64,
    pub fidelity_delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub rows: Vec<DegradationRow>,
    pub mean_recon_delta: f64,
    pub mean_consistency_delta: f64,
    pub mean_fidelity_delta: f64,
}

impl DegradationReport {
    fn from_rows(rows: Vec<DegradationRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&DegradationRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            mean_recon_delta: mean(|r| r.recon_delta),
            mean_consistency_delta: mean(|r| r.consistency_delta),
            mean_fidelity_delta: mean(|r| r.fidelity_delta),
            rows,
        }
    }
}

/// Generate from the clean and the protected image with each seed and report
/// paired quality differences. Both arms are scored against the clean image.
pub fn degradation_score(model: &VictimModel, x: &Tensor, x_xi: &Tensor, y: usize, seeds: &[u64]) -> Result<DegradationReport> {
    let rows = seeds
        .iter()
        .map(|&seed| {
            let clean = clip_quality(&generate(model, x, y, seed)?, x, model)?;
            let prot = clip_quality(&generate(model, x_xi, y, seed)?, x, model)?;
            Ok(DegradationRow {
                seed,
                recon_delta: prot.recon_psnr - clean.recon_psnr,
                consistency_delta: prot.consistency - clean.consistency,
                fidelity_delta: prot.fidelity - clean.fidelity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DegradationReport::from_rows(rows))
}

/// Mean denoising loss with `x` and with `x_xi` as the condition, over the
/// same `draws` draws of `(t, eps)`.
pub fn paired_dm(
    model: &VictimModel,
    x: &Tensor,
    x_xi: &Tensor,
    reference: &Tensor,
    y: usize,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let frames = reference.shape()[0].min(ATTACK_FRAMES).min(model.config().frames);
    let z0 = model.encode(&reference.narrow0(0, frames)?)?;
    let (cx, cxi) = (model.encode(x)?, model.encode(x_xi)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (0.0, 0.0);
    for _ in 0..draws {
        let d = NoiseDraw::sample(model, z0.shape(), &mut rng);
        let zt = model.schedule().forward_noise(&z0, d.t, &d.eps)?;
        for (cond, acc) in [(&cx, &mut a), (&cxi, &mut b)] {
            let tape = Tape::new();
            let bind = model.bind(&tape, Trainable::None);
            let out = model.denoise_with_taps(&bind, &tape.constant(zt.clone()), &tape.constant(cond.clone()), d.t, y)?;
            *acc += denoising_error(&out.eps, &tape.constant(d.eps.clone()))?.item();
        }
    }
    Ok((a / draws as f64, b / draws as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSettings {
    /// Paired `(t, eps)` draws for the denoising-loss comparison.
    pub dm_draws: usize,
    /// Generation seeds for the degradation score; may be empty.
    pub generation_seeds: Vec<u64>,
    pub seed: u64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { dm_draws: 64, generation_seeds: (0..4).collect(), seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtectionMetrics {
    pub linf: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Perceptual-distance proxy between clean and protected image.
    pub lpips: f64,
    pub dm_clean: f64,
    pub dm_protected: f64,
    pub recon_delta: f64,
    pub consistency_delta: f64,
    pub fidelity_delta: f64,
}

pub fn lpips_distance(ext: &dyn FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(loss_lpips_proxy(ext, &tape, &tape.constant(b.clone()), &tape.constant(a.clone()))?.value().item())
}

pub fn protection_metrics(
    model: &VictimModel,
    x: &Tensor,
    x_xi: &Tensor,
    reference: &Tensor,
    y: usize,
    s: &MetricSettings,
) -> Result<ProtectionMetrics> {
    let (dm_clean, dm_protected) = paired_dm(model, x, x_xi, reference, y, s.dm_draws.max(1), s.seed)?;
    let deg = degradation_score(model, x, x_xi, y, &s.generation_seeds)?;
    Ok(ProtectionMetrics {
        linf: x_xi.max_abs_diff(x)?,
        psnr: psnr(x, x_xi)?,
        ssim: ssim(x, x_xi)?,
        lpips: lpips_distance(model, x, x_xi)?,
        dm_clean,
        dm_protected,
        recon_delta: deg.mean_recon_delta,
        consistency_delta: deg.mean_consistency_delta,
        fidelity_delta: deg.mean_fidelity_delta,
    })
}

/// One row of a robustness table: the protected image after a transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    /// `"none"` for the untransformed baseline.
    pub transform: String,
    pub psnr: f64,
    pub ssim: f64,
    pub recon_delta: f64,
    pub consistency_delta: f64,
    pub fidelity_delta: f64,
    /// This row's consistency delta as a fraction of the baseline's.
    pub retained_consistency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<RobustnessRow>,
    /// Per-seed rows of the untransformed comparison.
    pub baseline: DegradationReport,
}

/// Baseline row followed by one row per transform, in input order. Every row
/// uses the same generation seeds, so rows are paired.
pub fn robustness_report(
    model: &VictimModel,
    x: &Tensor,
    x_xi: &Tensor,
    transforms: &[TransformSpec],
    y: usize,
    seeds: &[u64],
) -> Result<EvaluationReport> {
    let mut rows = Vec::with_capacity(transforms.len() + 1);
    let mut base_consistency = 0.0;
    let mut baseline = DegradationReport::default();
    let items = std::iter::once(None).chain(transforms.iter().map(Some));
    for spec in items {
        let img = match spec {
            None => x_xi.clone(),
            Some(s) => s.apply(x_xi)?,
        };
        let deg = degradation_score(model, x, &img, y, seeds)?;
        if spec.is_none() {
            base_consistency = deg.mean_consistency_delta;
            baseline = deg.clone();
        }
        let retained = if base_consistency != 0.0 { deg.mean_consistency_delta / base_consistency } else { 0.0 };
        rows.push(RobustnessRow {
            transform: spec.map_or_else(|| "none".to_string(), TransformSpec::name),
            psnr: psnr(x, &img)?,
            ssim: ssim(x, &img)?,
            recon_delta: deg.mean_recon_delta,
            consistency_delta: deg.mean_consistency_delta,
            fidelity_delta: deg.mean_fidelity_delta,
            retained_consistency: retained,
        });
    }
    Ok(EvaluationReport { seeds: seeds.to_vec(), rows, baseline })
}
