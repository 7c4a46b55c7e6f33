//! Argument parsing and config resolution.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use dualcloak_core::attack::Space;

use crate::commands::{cmd_ablate, cmd_evaluate, cmd_protect, cmd_train, cmd_visualize_layers, InvalidInvocation};
use crate::config::RunConfig;
use crate::manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "dualcloak", version, about = "Cloak images against a toy image-to-video diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

/// Flags shared by every command. They override keys from `--config`, which
/// override keys from `--manifest`, which override built-in defaults.
#[derive(Debug, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replay the configuration and inputs recorded in a previous run's manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Perturbation space, e.g. `lab+freq` or `rgb`.
    #[arg(long, global = true)]
    pub space: Option<Space>,
    #[arg(long, global = true)]
    pub budget_rgb: Option<f64>,
    #[arg(long, global = true)]
    pub budget_lab: Option<f64>,
    #[arg(long, global = true)]
    pub mask_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Target image; switches the anchor losses to the targeted variant.
    #[arg(long, global = true)]
    pub targeted: Option<PathBuf>,
    /// Mask the whole perturbed spectrum rather than the perturbation.
    #[arg(long, global = true)]
    pub literal_mask: bool,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub overwrite: bool,
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy victim model on synthetic clips.
    Train {
        /// Continue the run stored in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Protect images with the configured perturbation.
    Protect { images: Vec<PathBuf> },
    /// Score clean/protected pairs under the robustness transforms.
    Evaluate {
        #[arg(long, num_args = 1..)]
        clean: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        protected: Vec<PathBuf>,
    },
    /// Run the space, Lab-budget, loss-component and layer ablations.
    Ablate { images: Vec<PathBuf> },
    /// PCA images of every denoiser block.
    VisualizeLayers { image: Option<PathBuf> },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Protect { .. } => "protect",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::VisualizeLayers { .. } => "visualize-layers",
        }
    }
}

/// Merge manifest, config file and flags.
pub fn resolve(common: &Common, command: &str) -> Result<(RunConfig, Option<Manifest>)> {
    let manifest = match &common.manifest {
        Some(p) => {
            let m = Manifest::load(p)?;
            if m.command != command {
                bail!("manifest {} records a `{}` run, not `{command}`", p.display(), m.command);
            }
            Some(m)
        }
        None => None,
    };
    let mut cfg = match (&common.config, &manifest) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(m)) => m.config.clone(),
        (None, None) => RunConfig::default(),
    };
    if manifest.is_some() {
        // a replay never clobbers the recorded run unless asked to
        cfg.overwrite = false;
    }
    let a = &mut cfg.attack;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(a.space, common.space);
    set!(a.budget_rgb, common.budget_rgb);
    set!(a.budget_lab, common.budget_lab);
    set!(a.mask_fraction, common.mask_fraction);
    set!(a.iters, common.iters);
    set!(a.lr, common.lr);
    if common.targeted.is_some() {
        a.targeted = common.targeted.clone();
    }
    a.literal_mask |= common.literal_mask;
    set!(cfg.seed, common.seed);
    set!(cfg.checkpoint, common.checkpoint);
    set!(cfg.out, common.out);
    set!(cfg.jobs, common.jobs);
    cfg.overwrite |= common.overwrite;
    cfg.validate()?;
    Ok((cfg, manifest))
}

fn pick(given: &[PathBuf], recorded: Option<&Vec<PathBuf>>) -> Vec<PathBuf> {
    match (given.is_empty(), recorded) {
        (true, Some(r)) => r.clone(),
        _ => given.to_vec(),
    }
}

/// Run the parsed command. Returns the run's manifest.
pub fn run(cli: &Cli) -> Result<Manifest> {
    let (cfg, replay) = resolve(&cli.common, cli.command.name()).map_err(InvalidInvocation)?;
    let inputs = replay.as_ref().map(|m| &m.inputs);
    let paired = replay.as_ref().map(|m| &m.paired_inputs);
    match &cli.command {
        Command::Train { resume } => cmd_train(&cfg, resume.as_deref().or(inputs.and_then(|v| v.first()).map(|p| p.as_path()))),
        Command::Protect { images } => cmd_protect(&cfg, &pick(images, inputs)),
        Command::Evaluate { clean, protected } => cmd_evaluate(&cfg, &pick(clean, inputs), &pick(protected, paired)),
        Command::Ablate { images } => cmd_ablate(&cfg, &pick(images, inputs)),
        Command::VisualizeLayers { image } => {
            let image = image.clone().or_else(|| inputs.and_then(|v| v.first().cloned()));
            match image {
                Some(p) => cmd_visualize_layers(&cfg, &p),
                None => Err(InvalidInvocation(anyhow::anyhow!("visualize-layers needs an image")).into()),
            }
        }
    }
}

/// 0 on success, 1 when some items failed, 2 for invalid invocations.
pub fn exit_code(result: &Result<Manifest>) -> i32 {
    match result {
        Ok(m) if m.failures() == 0 => 0,
        Ok(_) => 1,
        Err(e) if e.downcast_ref::<InvalidInvocation>().is_some() => 2,
        Err(_) => 1,
    }
}
