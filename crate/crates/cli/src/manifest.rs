//! Run manifests and guarded output directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    /// Input path as given on the command line, if any.
    pub input: Option<PathBuf>,
    /// Output files relative to the run directory.
    pub outputs: Vec<PathBuf>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Positional inputs in order, so a run can be replayed.
    pub inputs: Vec<PathBuf>,
    /// Secondary inputs such as the protected images of `evaluate`.
    pub paired_inputs: Vec<PathBuf>,
    pub model_sha256: Option<String>,
    pub items: Vec<ItemRecord>,
    pub metrics: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            inputs: Vec::new(),
            paired_inputs: Vec::new(),
            model_sha256: None,
            items: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn failures(&self) -> usize {
        self.items.iter().filter(|i| i.error.is_some()).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        m.config.validate()?;
        Ok(m)
    }
}

/// Output directory that refuses to replace existing files unless asked to.
#[derive(Clone, Debug)]
pub struct OutputDir {
    root: PathBuf,
    overwrite: bool,
}

impl OutputDir {
    /// Fails if the directory already holds a manifest and `overwrite` is off.
    pub fn open(root: &Path, overwrite: bool) -> Result<Self> {
        if !overwrite && root.join(MANIFEST_FILE).exists() {
            bail!("{} already contains a run; pass --overwrite to replace it", root.display());
        }
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), overwrite })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path for `rel`, creating parent directories.
    pub fn claim(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.root.join(rel.as_ref());
        if p.exists() && !self.overwrite {
            bail!("refusing to overwrite {} (pass --overwrite)", p.display());
        }
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<PathBuf> {
        let p = self.root.join(MANIFEST_FILE);
        fs::write(&p, serde_json::to_string_pretty(m)? + "\n")?;
        Ok(p)
    }
}
