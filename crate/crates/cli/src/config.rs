//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! episodes = 20
//! workers = 4
//! metrics = ["miou", "vc", "bf"]
//! windows = [3, 5, 7, 9, 11]
//!
//! [input.synthetic]      # or [input.episodes] / [input.manifest]
//! frames = 12
//! drift = 0.05
//! noise = 0.3
//!
//! [tti]
//! iterations = 50
//! prior_update = 10
//! learning_rate = 0.025
//! mode = "tti"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tti_core::episodes::SyntheticSpec;
use tti_core::optimizer::TtiConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSpec {
    /// Episodes generated on the fly; `episodes` of them, each with its own
    /// seed derived from the run seed.
    Synthetic(SyntheticSpec),
    /// Episode directories listed in an index written by `tti synth`.
    Episodes { index: PathBuf },
    /// Episodes sampled from a dataset manifest.
    Manifest {
        path: PathBuf,
        #[serde(default)]
        fold: usize,
        #[serde(default = "one")]
        shots: usize,
        frames: usize,
        /// Classes to sample from; defaults to the fold's test classes.
        #[serde(default)]
        classes: Option<Vec<u32>>,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputSpec,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Episode count for synthetic and manifest inputs.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    #[serde(default = "default_windows")]
    pub windows: Vec<usize>,
    #[serde(default)]
    pub tti: TtiConfig,
}

fn default_episodes() -> usize {
    10
}

fn default_metrics() -> Vec<String> {
    vec!["miou".into(), "vc".into(), "bf".into()]
}

fn default_windows() -> Vec<usize> {
    vec![3, 5, 7, 9, 11]
}

pub const METRICS: [&str; 3] = ["miou", "vc", "bf"];

impl RunConfig {
    /// Reads a config file; relative input paths resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        match &mut cfg.input {
            InputSpec::Episodes { index } => *index = base.join(&*index),
            InputSpec::Manifest { path, .. } => *path = base.join(&*path),
            InputSpec::Synthetic(_) => {}
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.tti.validate()?;
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        if let Some(w) = self.windows.iter().find(|&&w| w < 2) {
            bail!("window {w} is below the minimum of 2");
        }
        if let Some(m) = self.metrics.iter().find(|m| !METRICS.contains(&m.as_str())) {
            bail!("unknown metric {m:?} (expected one of {METRICS:?})");
        }
        if let InputSpec::Synthetic(spec) = &self.input {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Parses a comma-separated metric list.
pub fn parse_metrics(s: &str) -> Result<Vec<String>> {
    let out: Vec<String> = s.split(',').map(|m| m.trim().to_string()).filter(|m| !m.is_empty()).collect();
    if let Some(m) = out.iter().find(|m| !METRICS.contains(&m.as_str())) {
        bail!("unknown metric {m:?} (expected one of {METRICS:?})");
    }
    Ok(out)
}

/// Parses a comma-separated window list; every window must be at least 2.
pub fn parse_windows(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let w: usize = part.parse().with_context(|| format!("bad window {part:?}"))?;
        if w < 2 {
            bail!("window {w} is below the minimum of 2");
        }
        out.push(w);
    }
    Ok(out)
}
