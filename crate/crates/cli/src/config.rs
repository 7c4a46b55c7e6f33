//! Run configuration: a TOML file whose every key has a default.
//!
//! Command-line flags override file keys, which override built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use dualcloak_core::attack::{AttackConfig, Space};
use dualcloak_core::eval::{MetricSettings, TransformSpec};
use dualcloak_core::losses::{AttackMode, LossWeights};
use dualcloak_core::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub overwrite: bool,
    /// Worker threads for per-image commands.
    pub jobs: usize,
    /// Model checkpoint read by every command except `train`.
    pub checkpoint: PathBuf,
    /// Generation condition used for user images.
    pub label: usize,
    pub model: ModelConfig,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub visualize: VisualizeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            overwrite: false,
            jobs: 1,
            checkpoint: PathBuf::from("model.ckpt"),
            label: 0,
            model: ModelConfig::default(),
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            visualize: VisualizeSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { size: 256, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub space: Space,
    pub budget_rgb: f64,
    pub budget_lab: f64,
    pub mask_fraction: f64,
    pub iters: usize,
    pub lr: f64,
    pub pgd_step: f64,
    pub literal_mask: bool,
    /// Target image for the targeted variant; untargeted when absent.
    pub targeted: Option<PathBuf>,
    pub draws_per_step: usize,
    pub smoothing_window: usize,
    pub weights: LossWeights,
    /// Per-frame shift `(dx, dy)` of the reference clip built from each image.
    pub reference_velocity: (i32, i32),
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            space: a.space,
            budget_rgb: a.budget_rgb,
            budget_lab: a.budget_lab,
            mask_fraction: a.mask_fraction,
            iters: a.iters,
            lr: a.lr,
            pgd_step: a.pgd_step,
            literal_mask: a.literal_mask,
            targeted: None,
            draws_per_step: a.draws_per_step,
            smoothing_window: a.smoothing_window,
            weights: a.weights,
            reference_velocity: (1, 0),
        }
    }
}

impl AttackSection {
    pub fn to_attack_config(&self, mode: AttackMode, seed: u64) -> AttackConfig {
        AttackConfig {
            budget_rgb: self.budget_rgb,
            budget_lab: self.budget_lab,
            mask_fraction: self.mask_fraction,
            iters: self.iters,
            lr: self.lr,
            pgd_step: self.pgd_step,
            space: self.space,
            mode,
            weights: self.weights,
            layers: None,
            seed,
            literal_mask: self.literal_mask,
            draws_per_step: self.draws_per_step,
            smoothing_window: self.smoothing_window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Number of generation seeds, counted up from the run seed.
    pub generation_seeds: usize,
    pub dm_draws: usize,
    pub transforms: Vec<TransformSpec>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { generation_seeds: 4, dm_draws: 64, transforms: TransformSpec::standard_suite(0) }
    }
}

impl EvalSection {
    pub fn seeds(&self, base: u64) -> Vec<u64> {
        (0..self.generation_seeds as u64).map(|k| base.wrapping_add(k)).collect()
    }

    pub fn metric_settings(&self, base: u64) -> MetricSettings {
        MetricSettings { dm_draws: self.dm_draws, generation_seeds: self.seeds(base), seed: base }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Held-out synthetic images ablated when no image paths are given.
    pub images: usize,
    /// Seed of the held-out image set.
    pub image_seed: u64,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { images: 2, image_seed: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeSection {
    pub components: usize,
    /// Timestep on a 1000-step scale, rescaled to the model's schedule.
    pub timestep: usize,
}

impl Default for VisualizeSection {
    fn default() -> Self {
        Self { components: 3, timestep: 500 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.jobs >= 1, "jobs must be at least 1");
        ensure!(self.dataset.size >= 1, "dataset.size must be at least 1");
        self.model.validate()?;
        self.attack.to_attack_config(AttackMode::Untargeted, self.seed).validate()?;
        ensure!(self.eval.dm_draws >= 1, "eval.dm_draws must be at least 1");
        ensure!(self.visualize.components >= 1, "visualize.components must be at least 1");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_published_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.attack.iters, 200);
        assert_eq!(c.attack.budget_rgb, 16.0 / 255.0);
        assert_eq!(c.attack.budget_lab, 16.0 / 255.0);
        assert_eq!(c.attack.mask_fraction, 0.25);
        assert_eq!(c.attack.lr, 1e-2);
        assert_eq!(c.attack.pgd_step, 1.0 / 255.0);
        assert_eq!(c.attack.space, Space::LabFreq);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[attack]\niterations = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nhiden = 3").is_err());
        assert!(RunConfig::from_toml("[eval]\ntransforms = [{ kind = \"jpeg_like\", quality = 40, extra = 1 }]").is_err());
    }

    #[test]
    fn keys_parse_and_round_trip() {
        let c = RunConfig::from_toml(
            "seed = 7\n[attack]\nspace = \"freq+lab\"\niters = 5\n[attack.weights]\naux = 0.0\n[eval]\ntransforms = [{ kind = \"gaussian_blur\", kernel = 5, sigma = 1.0 }]\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.attack.space, Space::LabFreq);
        assert_eq!(c.attack.weights.aux, 0.0);
        assert_eq!(c.attack.weights.irc, 1.0);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[attack]\nmask_fraction = 0.0").is_err());
        assert!(RunConfig::from_toml("jobs = 0").is_err());
    }
}
