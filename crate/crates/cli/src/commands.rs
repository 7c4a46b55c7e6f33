//! The five commands. Each writes into a guarded output directory and ends
//! with a manifest that is enough to replay it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{ensure, Context, Result};
use dualcloak_core::attack::{protect, render_adversarial, AttackConfig, AttackOutcome, PerturbationState, Space};
use dualcloak_core::eval::{protection_metrics, robustness_report, DegradationRow, ProtectionMetrics, RobustnessRow, TransformSpec};
use dualcloak_core::losses::{AttackMode, LayerSelection, LossWeights};
use dualcloak_core::model::{
    load_checkpoint, make_synthetic_dataset, pca_layer_viz, reference_clip, save_checkpoint, TrainConfig, TrainRecord, Trainable, Trainer,
};
use dualcloak_core::{Tape, Tensor, VictimModel};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::RunConfig;
use crate::io::{read_optimizer, read_png, read_tensor, write_csv, write_optimizer, write_png, write_tensor, Table};
use crate::manifest::{sha256_file, ItemRecord, Manifest, OutputDir};
use crate::table::rows_to_table;

/// Failure before any work started: bad configuration, missing model,
/// unusable output directory.
#[derive(Debug)]
pub struct InvalidInvocation(pub anyhow::Error);

impl std::fmt::Display for InvalidInvocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for InvalidInvocation {}

fn invalid<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| InvalidInvocation(e).into())
}

/// Map `f` over `items` on up to `jobs` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect()
}

pub fn load_model(cfg: &RunConfig) -> Result<(VictimModel, String)> {
    let path = &cfg.checkpoint;
    let model = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ensure!(model.is_trained(), "checkpoint {} holds an untrained model", path.display());
    Ok((model, sha256_file(path)?))
}

fn item_stem(i: usize, path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    format!("{i:03}_{stem}")
}

fn check_image(x: &Tensor, model: &VictimModel, path: &Path) -> Result<()> {
    let s = model.config().image_size;
    ensure!(x.shape() == [3, s, s], "{}: image is {}x{}, the model expects {s}x{s}", path.display(), x.shape()[2], x.shape()[1]);
    Ok(())
}

fn attack_mode(cfg: &RunConfig, model: &VictimModel) -> Result<AttackMode> {
    match &cfg.attack.targeted {
        None => Ok(AttackMode::Untargeted),
        Some(p) => {
            let t = read_png(p)?;
            check_image(&t, model, p)?;
            Ok(AttackMode::Targeted(t))
        }
    }
}

fn write_table(out: &OutputDir, name: &str, table: &Table) -> Result<PathBuf> {
    let p = out.claim(name)?;
    write_csv(&p, table)?;
    Ok(PathBuf::from(name))
}

fn finish(out: &OutputDir, manifest: &Manifest) -> Result<Manifest> {
    let p = out.claim("run.toml")?;
    std::fs::write(p, manifest.config.to_toml())?;
    out.write_manifest(manifest)?;
    Ok(manifest.clone())
}

fn read_loss_curve(path: &Path) -> Result<Vec<TrainRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Train from scratch, or continue the run in `resume` up to the configured
/// step budget.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<Manifest> {
    let m = &cfg.model;
    let train = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let mut trainer = match resume {
        None => invalid(Trainer::new(m.clone(), train.clone()).map_err(Into::into))?,
        Some(dir) => invalid((|| -> Result<Trainer> {
            let model = load_checkpoint(&dir.join("model.ckpt"))?;
            ensure!(model.config() == m, "{}: checkpoint architecture differs from the config", dir.display());
            let opt = read_optimizer(&dir.join("optimizer.state"))?;
            let trace = read_loss_curve(&dir.join("loss_curve.csv"))?;
            Ok(Trainer::resume(model, train.clone(), opt, trace.len(), trace)?)
        })())?,
    };
    let out = invalid(OutputDir::open(&cfg.out, cfg.overwrite))?;
    let ckpt = invalid(out.claim("model.ckpt"))?;
    let curve = invalid(out.claim("loss_curve.csv"))?;
    let opt_path = invalid(out.claim("optimizer.state"))?;
    let data = make_synthetic_dataset(cfg.dataset.size, cfg.dataset.seed, m.frames, m.image_size, m.image_size)?;
    info!("training on {} clips, steps {}..{}", data.len(), trainer.step, train.total_steps());
    trainer.run_until(&data, train.total_steps())?;
    save_checkpoint(&trainer.model, &ckpt)?;
    write_optimizer(&opt_path, &trainer.optimizer)?;
    let rows: Vec<_> = trainer.trace.iter().map(|r| (vec![], *r)).collect();
    write_csv(&curve, &rows_to_table(&[], &rows)?)?;
    let mut manifest = Manifest::new("train", cfg);
    manifest.inputs = resume.map(|p| vec![p.to_path_buf()]).unwrap_or_default();
    manifest.model_sha256 = Some(sha256_file(&ckpt)?);
    manifest.items.push(ItemRecord {
        input: None,
        outputs: vec!["model.ckpt".into(), "optimizer.state".into(), "loss_curve.csv".into()],
        error: None,
    });
    if let (Some(first), Some(last)) = (trainer.trace.first(), trainer.trace.last()) {
        manifest.metrics.insert("first_loss".into(), first.loss);
        manifest.metrics.insert("last_loss".into(), last.loss);
    }
    finish(&out, &manifest)
}

/// Perturbation files written by `protect`, in this order.
pub const DELTA_FILES: [&str; 4] = ["delta_a.tensor", "delta_b.tensor", "delta_freq.tensor", "delta_rgb.tensor"];

/// Rebuild the pre-quantization protected image from saved deltas.
pub fn rerender(x: &Tensor, dir: &Path, cfg: &AttackConfig) -> Result<Tensor> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut s = PerturbationState::zeros(h, w, cfg.lr);
    let [a, b, f, r] = DELTA_FILES.map(|n| read_tensor(&dir.join(n)));
    s.delta_a = a?;
    s.delta_b = b?;
    s.delta_freq = f?;
    s.delta_rgb = r?;
    Ok(render_adversarial(x, &s, cfg)?)
}

#[derive(Serialize)]
struct ProtectSummary {
    best_iteration: usize,
    linf: f64,
    final_smoothed_total: f64,
}

fn protect_one(
    cfg: &RunConfig,
    model: &VictimModel,
    mode: &AttackMode,
    out: &OutputDir,
    i: usize,
    path: &Path,
) -> Result<(Vec<PathBuf>, ProtectSummary)> {
    let x = read_png(path)?;
    check_image(&x, model, path)?;
    let reference = reference_clip(&x, model.config().frames, cfg.attack.reference_velocity)?;
    let acfg = cfg.attack.to_attack_config(mode.clone(), cfg.seed);
    let outcome = protect(&x, &reference, cfg.label, model, &acfg)?;
    if let Some(reason) = &outcome.aborted {
        warn!("{}: stopped early: {reason}", path.display());
    }
    let dir = PathBuf::from(item_stem(i, path));
    let mut files = Vec::new();
    let mut put = |name: &str| -> Result<PathBuf> {
        let rel = dir.join(name);
        files.push(rel.clone());
        out.claim(&rel)
    };
    write_png(&put("protected.png")?, &outcome.image)?;
    write_tensor(&put("protected.tensor")?, &outcome.image)?;
    let s = &outcome.state;
    for (name, t) in DELTA_FILES.iter().zip([&s.delta_a, &s.delta_b, &s.delta_freq, &s.delta_rgb]) {
        write_tensor(&put(name)?, t)?;
    }
    let rows: Vec<_> = outcome.trace.iter().map(|r| (vec![], r)).collect();
    write_csv(&put("trace.csv")?, &rows_to_table(&[], &rows)?)?;
    let summary = ProtectSummary {
        best_iteration: outcome.best_iteration,
        linf: outcome.image.max_abs_diff(&x)?,
        final_smoothed_total: outcome.trace.last().map_or(f64::NAN, |r| r.smoothed_total),
    };
    Ok((files, summary))
}

pub fn cmd_protect(cfg: &RunConfig, images: &[PathBuf]) -> Result<Manifest> {
    invalid(if images.is_empty() { Err(anyhow::anyhow!("protect needs at least one image")) } else { Ok(()) })?;
    let (model, sha) = invalid(load_model(cfg))?;
    let mode = invalid(attack_mode(cfg, &model))?;
    let out = invalid(OutputDir::open(&cfg.out, cfg.overwrite))?;
    let results = par_map(images, cfg.jobs, |i, p| protect_one(cfg, &model, &mode, &out, i, p));
    let mut manifest = Manifest::new("protect", cfg);
    manifest.inputs = images.to_vec();
    manifest.model_sha256 = Some(sha);
    let mut rows = Vec::new();
    for (p, r) in images.iter().zip(results) {
        match r {
            Ok((outputs, summary)) => {
                rows.push((vec![p.display().to_string()], summary));
                manifest.items.push(ItemRecord { input: Some(p.clone()), outputs, error: None });
            }
            Err(e) => {
                warn!("{}: {e:#}", p.display());
                manifest.items.push(ItemRecord { input: Some(p.clone()), outputs: vec![], error: Some(format!("{e:#}")) });
            }
        }
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        manifest.metrics.insert("mean_linf".into(), rows.iter().map(|r| r.1.linf).sum::<f64>() / n);
        write_table(&out, "summary.csv", &rows_to_table(&["image"], &rows)?)?;
    }
    finish(&out, &manifest)
}

pub fn cmd_evaluate(cfg: &RunConfig, clean: &[PathBuf], protected: &[PathBuf]) -> Result<Manifest> {
    invalid(if clean.is_empty() || clean.len() != protected.len() {
        Err(anyhow::anyhow!("evaluate needs matching nonempty clean and protected lists ({} vs {})", clean.len(), protected.len()))
    } else {
        Ok(())
    })?;
    let (model, sha) = invalid(load_model(cfg))?;
    let out = invalid(OutputDir::open(&cfg.out, cfg.overwrite))?;
    let seeds = cfg.eval.seeds(cfg.seed);
    let pairs: Vec<_> = clean.iter().zip(protected).collect();
    let reports = par_map(&pairs, cfg.jobs, |_, (c, p)| -> Result<_> {
        let (x, xp) = (read_png(c)?, read_png(p)?);
        check_image(&x, &model, c)?;
        check_image(&xp, &model, p)?;
        Ok(robustness_report(&model, &x, &xp, &cfg.eval.transforms, cfg.label, &seeds)?)
    });
    let mut manifest = Manifest::new("evaluate", cfg);
    manifest.inputs = clean.to_vec();
    manifest.paired_inputs = protected.to_vec();
    manifest.model_sha256 = Some(sha);
    let mut rob: Vec<(Vec<String>, RobustnessRow)> = Vec::new();
    let mut deg: Vec<(Vec<String>, DegradationRow)> = Vec::new();
    for ((c, _), r) in pairs.iter().zip(reports) {
        match r {
            Ok(rep) => {
                rob.extend(rep.rows.into_iter().map(|row| (vec![c.display().to_string()], row)));
                deg.extend(rep.baseline.rows.into_iter().map(|row| (vec![c.display().to_string()], row)));
                manifest.items.push(ItemRecord { input: Some((*c).clone()), outputs: vec![], error: None });
            }
            Err(e) => {
                warn!("{}: {e:#}", c.display());
                manifest.items.push(ItemRecord { input: Some((*c).clone()), outputs: vec![], error: Some(format!("{e:#}")) });
            }
        }
    }
    if !rob.is_empty() {
        let files = vec![
            write_table(&out, "robustness.csv", &rows_to_table(&["image"], &rob)?)?,
            write_table(&out, "degradation.csv", &rows_to_table(&["image"], &deg)?)?,
        ];
        for item in manifest.items.iter_mut().filter(|i| i.error.is_none()) {
            item.outputs = files.clone();
        }
        let mut by_transform: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (_, row) in &rob {
            let e = by_transform.entry(row.transform.clone()).or_default();
            e.0 += row.consistency_delta;
            e.1 += 1;
        }
        for (name, (sum, n)) in by_transform {
            manifest.metrics.insert(format!("{name}.consistency_delta"), sum / n as f64);
        }
    }
    finish(&out, &manifest)
}

/// One ablation arm: an attack configuration with a row label.
#[derive(Clone, Debug)]
pub struct Arm {
    pub label: String,
    pub description: String,
    pub config: AttackConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmRow {
    pub description: String,
    pub space: String,
    pub budget_lab: f64,
    pub targeted: bool,
    pub w_irc: f64,
    pub w_ira: f64,
    pub w_aux: f64,
    pub w_dm: f64,
    pub deep_layers: String,
    pub best_iteration: f64,
    #[serde(flatten)]
    pub metrics: ProtectionMetrics,
}

/// Fixed target for targeted ablation rows when none is configured.
pub fn default_target(size: usize) -> Tensor {
    Tensor::full(vec![3, size, size], 0.5)
}

fn layer_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// The nine loss-component rows A1 to A9.
pub fn loss_arms(base: &AttackConfig, model: &VictimModel, target: &Tensor) -> Vec<Arm> {
    let all = LayerSelection::for_model(model.config());
    let enc_only = LayerSelection { ira_denoiser: vec![], ..all.clone() };
    let den_only = LayerSelection { ira_encoder: vec![], ..all.clone() };
    let t = AttackMode::Targeted(target.clone());
    let u = AttackMode::Untargeted;
    let w = |irc: f64, ira: f64, aux: f64| LossWeights { irc, ira, aux, dm: 1.0 };
    let rows: [(&str, &str, LossWeights, &LayerSelection, &AttackMode); 9] = [
        ("A1", "denoising", w(0.0, 0.0, 0.0), &all, &u),
        ("A2", "A1 + IRC", w(1.0, 0.0, 0.0), &all, &u),
        ("A3", "A1 + IRA encoder (U)", w(0.0, 1.0, 0.0), &enc_only, &u),
        ("A4", "A1 + IRA encoder (T)", w(0.0, 1.0, 0.0), &enc_only, &t),
        ("A5", "A1 + IRA denoiser (U)", w(0.0, 1.0, 0.0), &den_only, &u),
        ("A6", "A1 + IRA denoiser (T)", w(0.0, 1.0, 0.0), &den_only, &t),
        ("A7", "A4 + A6", w(0.0, 1.0, 0.0), &all, &t),
        ("A8", "A2 + A4 + A6", w(1.0, 1.0, 0.0), &all, &t),
        ("A9", "A8 + auxiliary", w(1.0, 1.0, 1.0), &all, &t),
    ];
    rows.into_iter()
        .map(|(label, desc, weights, layers, mode)| Arm {
            label: label.into(),
            description: desc.into(),
            config: AttackConfig { weights, layers: Some(layers.clone()), mode: mode.clone(), ..base.clone() },
        })
        .collect()
}

/// Full, then last 3, 1, 2 and 4 blocks for the collapse loss.
pub fn irc_arms(base: &AttackConfig, model: &VictimModel) -> Result<Vec<Arm>> {
    let cfg = model.config();
    let full = LayerSelection::full(cfg);
    let mut arms = vec![Arm {
        label: "Full".into(),
        description: format!("blocks after {}", full.early),
        config: AttackConfig { layers: Some(full), ..base.clone() },
    }];
    for k in [3, 1, 2, 4] {
        arms.push(Arm {
            label: format!("Last-{k}"),
            description: format!("last {k} blocks"),
            config: AttackConfig { layers: Some(LayerSelection::last_k(cfg, k)?), ..base.clone() },
        });
    }
    Ok(arms)
}

pub fn space_arms(base: &AttackConfig) -> Vec<Arm> {
    Space::ALL
        .iter()
        .map(|&space| Arm {
            label: space.name().into(),
            description: "denoising loss only".into(),
            config: AttackConfig { space, weights: LossWeights::dm_only(), ..base.clone() },
        })
        .collect()
}

pub fn lab_budget_arms(base: &AttackConfig) -> Vec<Arm> {
    [8.0, 16.0, 32.0]
        .iter()
        .map(|&b| Arm {
            label: format!("{b}/255"),
            description: "full objective".into(),
            config: AttackConfig { budget_lab: b / 255.0, ..base.clone() },
        })
        .collect()
}

/// Subject image, reference clip and condition.
#[derive(Clone, Debug)]
pub struct Subject {
    pub name: String,
    pub image: Tensor,
    pub reference: Tensor,
    pub label: usize,
}

pub fn ablation_subjects(cfg: &RunConfig, model: &VictimModel, images: &[PathBuf]) -> Result<Vec<Subject>> {
    let frames = model.config().frames;
    if images.is_empty() {
        let s = model.config().image_size;
        let data = make_synthetic_dataset(cfg.ablate.images.max(1), cfg.ablate.image_seed, frames, s, s)?;
        return data
            .iter()
            .enumerate()
            .map(|(i, clip)| {
                let x = clip.frame(0);
                Ok(Subject {
                    name: format!("synthetic_{i:03}"),
                    reference: reference_clip(&x, frames, clip.velocity.unwrap_or((1, 0)))?,
                    image: x,
                    label: clip.label,
                })
            })
            .collect();
    }
    images
        .iter()
        .map(|p| {
            let x = read_png(p)?;
            check_image(&x, model, p)?;
            Ok(Subject {
                name: p.display().to_string(),
                reference: reference_clip(&x, frames, cfg.attack.reference_velocity)?,
                image: x,
                label: cfg.label,
            })
        })
        .collect()
}

fn mean_metrics(ms: &[ProtectionMetrics]) -> ProtectionMetrics {
    let n = ms.len().max(1) as f64;
    let m = |f: fn(&ProtectionMetrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
    ProtectionMetrics {
        linf: m(|p| p.linf),
        psnr: m(|p| p.psnr),
        ssim: m(|p| p.ssim),
        lpips: m(|p| p.lpips),
        dm_clean: m(|p| p.dm_clean),
        dm_protected: m(|p| p.dm_protected),
        recon_delta: m(|p| p.recon_delta),
        consistency_delta: m(|p| p.consistency_delta),
        fidelity_delta: m(|p| p.fidelity_delta),
    }
}

struct ArmRun {
    outcome: AttackOutcome,
    metrics: ProtectionMetrics,
}

fn run_arm(model: &VictimModel, s: &Subject, arm: &Arm, settings: &dualcloak_core::eval::MetricSettings) -> Result<ArmRun> {
    let outcome = protect(&s.image, &s.reference, s.label, model, &arm.config)?;
    let metrics = protection_metrics(model, &s.image, &outcome.image, &s.reference, s.label, settings)?;
    Ok(ArmRun { outcome, metrics })
}

fn arm_row(model: &VictimModel, arm: &Arm, runs: &[&ArmRun]) -> Result<ArmRow> {
    let c = &arm.config;
    let layers = c.layer_selection(model)?;
    Ok(ArmRow {
        description: arm.description.clone(),
        space: c.space.name().into(),
        budget_lab: c.budget_lab,
        targeted: c.mode.is_targeted(),
        w_irc: c.weights.irc,
        w_ira: c.weights.ira,
        w_aux: c.weights.aux,
        w_dm: c.weights.dm,
        deep_layers: layer_list(&layers.deep),
        best_iteration: runs.iter().map(|r| r.outcome.best_iteration as f64).sum::<f64>() / runs.len().max(1) as f64,
        metrics: mean_metrics(&runs.iter().map(|r| r.metrics).collect::<Vec<_>>()),
    })
}

#[derive(Serialize)]
struct BlurRow {
    consistency_delta: f64,
    blurred_consistency_delta: f64,
    retained_fraction: f64,
}

pub fn cmd_ablate(cfg: &RunConfig, images: &[PathBuf]) -> Result<Manifest> {
    let (model, sha) = invalid(load_model(cfg))?;
    let subjects = invalid(ablation_subjects(cfg, &model, images))?;
    let target = match &cfg.attack.targeted {
        Some(p) => invalid(read_png(p))?,
        None => default_target(model.config().image_size),
    };
    let out = invalid(OutputDir::open(&cfg.out, cfg.overwrite))?;
    let base = cfg.attack.to_attack_config(AttackMode::Untargeted, cfg.seed);
    invalid(base.validate().map_err(Into::into))?;
    let settings = cfg.eval.metric_settings(cfg.seed);
    let mut rgb_full = base.clone();
    rgb_full.space = Space::Rgb;
    let blur_arms = [
        Arm { label: "dsp".into(), description: "full objective".into(), config: base.clone() },
        Arm { label: "rgb".into(), description: "full objective".into(), config: rgb_full },
    ];
    let tables: Vec<(&str, Vec<Arm>)> = vec![
        ("spaces.csv", space_arms(&base)),
        ("lab_budget.csv", lab_budget_arms(&base)),
        ("losses.csv", loss_arms(&base, &model, &target)),
        ("irc_layers.csv", invalid(irc_arms(&base, &model))?),
        ("blur_robustness.csv", blur_arms.to_vec()),
    ];
    let n_subjects = subjects.len();
    let jobs: Vec<(usize, usize, usize)> = tables
        .iter()
        .enumerate()
        .flat_map(|(t, (_, arms))| (0..arms.len()).flat_map(move |a| (0..n_subjects).map(move |s| (t, a, s))))
        .collect();
    info!("ablation: {} attack runs", jobs.len());
    let runs = par_map(&jobs, cfg.jobs, |_, &(t, a, s)| run_arm(&model, &subjects[s], &tables[t].1[a], &settings));
    let mut by_key: BTreeMap<(usize, usize, usize), ArmRun> = BTreeMap::new();
    for (key, r) in jobs.iter().zip(runs) {
        by_key.insert(*key, r.with_context(|| format!("arm {} on {}", tables[key.0].1[key.1].label, subjects[key.2].name))?);
    }
    let mut manifest = Manifest::new("ablate", cfg);
    manifest.inputs = images.to_vec();
    manifest.model_sha256 = Some(sha);
    let mut files = Vec::new();
    for (t, (name, arms)) in tables.iter().enumerate() {
        let table = if *name == "blur_robustness.csv" {
            let blur = TransformSpec::GaussianBlur { kernel: 7, sigma: 1.5 };
            let mut rows = Vec::new();
            for (a, arm) in arms.iter().enumerate() {
                let (mut base_c, mut blur_c) = (0.0, 0.0);
                for (s, subj) in subjects.iter().enumerate() {
                    let rep = robustness_report(
                        &model,
                        &subj.image,
                        &by_key[&(t, a, s)].outcome.image,
                        std::slice::from_ref(&blur),
                        subj.label,
                        &settings.generation_seeds,
                    )?;
                    base_c += rep.rows[0].consistency_delta;
                    blur_c += rep.rows[1].consistency_delta;
                }
                let n = subjects.len() as f64;
                let (base_c, blur_c) = (base_c / n, blur_c / n);
                let retained = if base_c != 0.0 { blur_c / base_c } else { 0.0 };
                manifest.metrics.insert(format!("{}.blur_retained_fraction", arm.label), retained);
                rows.push((
                    vec![arm.label.clone()],
                    BlurRow { consistency_delta: base_c, blurred_consistency_delta: blur_c, retained_fraction: retained },
                ));
            }
            rows_to_table(&["arm"], &rows)?
        } else {
            let rows = arms
                .iter()
                .enumerate()
                .map(|(a, arm)| {
                    let rs: Vec<&ArmRun> = (0..subjects.len()).map(|s| &by_key[&(t, a, s)]).collect();
                    Ok((vec![arm.label.clone()], arm_row(&model, arm, &rs)?))
                })
                .collect::<Result<Vec<_>>>()?;
            rows_to_table(&["setting"], &rows)?
        };
        files.push(write_table(&out, name, &table)?);
    }
    manifest.items =
        subjects.iter().map(|s| ItemRecord { input: Some(PathBuf::from(&s.name)), outputs: files.clone(), error: None }).collect();
    finish(&out, &manifest)
}

/// Components mapped to RGB as `(v + 1) / 2`; missing components are black.
pub fn render_components(images: &Tensor, n: usize) -> Result<Tensor> {
    let s = images.shape();
    let (k, h, w) = (s[1], s[2], s[3]);
    Ok(Tensor::from_fn(vec![3, h, w], |idx| {
        let (c, p) = (idx / (h * w), idx % (h * w));
        if c < k {
            (images.data()[(n * k + c) * h * w + p] + 1.0) / 2.0
        } else {
            0.0
        }
    }))
}

/// Frames side by side, each upscaled by `scale`.
pub fn frame_strip(frames: &[Tensor], scale: usize) -> Tensor {
    let (h, w) = (frames[0].shape()[1], frames[0].shape()[2]);
    let (hs, ws) = (h * scale, w * scale * frames.len());
    Tensor::from_fn(vec![3, hs, ws], |idx| {
        let (c, i, j) = (idx / (hs * ws), (idx / ws) % hs, idx % ws);
        let (f, jj) = (j / (w * scale), j % (w * scale));
        frames[f].get(&[c, i / scale, jj / scale])
    })
}

pub fn cmd_visualize_layers(cfg: &RunConfig, image: &Path) -> Result<Manifest> {
    let (model, sha) = invalid(load_model(cfg))?;
    let x = invalid(read_png(image))?;
    invalid(check_image(&x, &model, image))?;
    let out = invalid(OutputDir::open(&cfg.out, cfg.overwrite))?;
    let frames = model.config().frames;
    let reference = reference_clip(&x, frames, cfg.attack.reference_velocity)?;
    let z0 = model.encode(&reference)?;
    let t = model.schedule().rescale(cfg.visualize.timestep);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = Tensor::from_fn(z0.shape().to_vec(), |_| StandardNormal.sample(&mut rng));
    let zt = model.schedule().forward_noise(&z0, t, &eps)?;
    let tape = Tape::new();
    let b = model.bind(&tape, Trainable::None);
    let cond = tape.constant(model.encode(&x)?);
    let den = model.denoise_with_taps(&b, &tape.constant(zt), &cond, t, cfg.label)?;
    let taps: Vec<Tensor> = den.taps.iter().map(|v| v.value()).collect();
    let proj = pca_layer_viz(&taps, cfg.visualize.components)?;
    let mut files = Vec::new();
    let mut var_rows = Vec::new();
    for (j, p) in proj.iter().enumerate() {
        let n = p.images.shape()[0];
        let strip = frame_strip(&(0..n).map(|f| render_components(&p.images, f)).collect::<Result<Vec<_>>>()?, 4);
        let rel = format!("block_{j:02}.png");
        write_png(&out.claim(&rel)?, &strip)?;
        files.push(PathBuf::from(rel));
        for (c, r) in p.explained_variance_ratio.iter().enumerate() {
            var_rows.push((vec![j.to_string(), c.to_string()], VarRow { explained_variance_ratio: *r, degenerate: p.degenerate }));
        }
    }
    files.push(write_table(&out, "explained_variance.csv", &rows_to_table(&["block", "component"], &var_rows)?)?);
    let mut manifest = Manifest::new("visualize-layers", cfg);
    manifest.inputs = vec![image.to_path_buf()];
    manifest.model_sha256 = Some(sha);
    manifest.metrics.insert("timestep".into(), t as f64);
    manifest.items.push(ItemRecord { input: Some(image.to_path_buf()), outputs: files, error: None });
    finish(&out, &manifest)
}

#[derive(Serialize)]
struct VarRow {
    explained_variance_ratio: f64,
    degenerate: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<u64> = (0..37).collect();
        let serial = par_map(&items, 1, |i, v| v * 3 + i as u64);
        assert_eq!(par_map(&items, 4, |i, v| v * 3 + i as u64), serial);
    }

    #[test]
    fn component_rendering_flips_with_sign() {
        let img = Tensor::from_fn(vec![2, 3, 4, 4], |k| ((k % 7) as f64 - 3.0) / 3.0);
        let flipped = Tensor::from_fn(vec![2, 3, 4, 4], |k| {
            let c = (k / 16) % 3;
            if c == 1 {
                -img.data()[k]
            } else {
                img.data()[k]
            }
        });
        let a = render_components(&img, 1).unwrap();
        let b = render_components(&flipped, 1).unwrap();
        for i in 0..16 {
            assert_eq!(a.data()[i], b.data()[i]);
            assert!((b.data()[16 + i] + a.data()[16 + i] - 1.0).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn ablation_grids_have_the_published_rows() {
        let model = VictimModel::new(dualcloak_core::ModelConfig::default(), 0).unwrap();
        let base = AttackConfig::default();
        let labels: Vec<String> = loss_arms(&base, &model, &default_target(32)).into_iter().map(|a| a.label).collect();
        assert_eq!(labels, ["A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8", "A9"]);
        let labels: Vec<String> = irc_arms(&base, &model).unwrap().into_iter().map(|a| a.label).collect();
        assert_eq!(labels, ["Full", "Last-3", "Last-1", "Last-2", "Last-4"]);
        let budgets: Vec<f64> = lab_budget_arms(&base).iter().map(|a| a.config.budget_lab).collect();
        assert_eq!(budgets, [8.0 / 255.0, 16.0 / 255.0, 32.0 / 255.0]);
        assert_eq!(space_arms(&base).len(), 7);
        assert!(space_arms(&base).iter().all(|a| a.config.weights == LossWeights::dm_only()));
    }
}
