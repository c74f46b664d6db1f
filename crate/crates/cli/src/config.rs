//! Run configuration: an optional JSON file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vrdiff::dataio::SynthConfig;
use vrdiff::diffusion::{NoiseSchedule, DEFAULT_STEPS};
use vrdiff::egnn::DenoiserConfig;
use vrdiff::virtual_receptor::VrConfig;

use crate::error::{CliError, CliResult};

/// Every setting a command may read. Unset fields fall back to
/// command-specific defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    /// An embedding file shared by all complexes, or a directory holding
    /// `<complex id>.vremb` per complex.
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Denoiser checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Diffusion steps T.
    pub diffusion_steps: Option<usize>,
    pub virtual_atoms: Option<usize>,
    pub pocket_atoms: Option<usize>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub learning_rate: Option<f64>,
    pub from_scratch: Option<bool>,
    pub checkpoint_every: Option<usize>,
    /// Stop after this many optimizer steps; `resume` continues later.
    pub stop_after: Option<usize>,
    pub samples: Option<usize>,
    pub ligand_atoms: Option<usize>,
    /// Complex id whose pocket conditions sampling.
    pub complex: Option<String>,
    pub repetitions: Option<usize>,
    pub warmup: Option<usize>,
    pub vr: Option<VrConfig>,
    pub denoiser: Option<DenoiserConfig>,
    pub synth: Option<SynthConfig>,
}

macro_rules! overlay_fields {
    ($base:ident, $top:ident; $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: RunConfig) -> Self {
        overlay_fields!(self, top; dataset, embeddings, checkpoint, resume, out, seed, diffusion_steps,
            virtual_atoms, pocket_atoms, epochs, batch, learning_rate, from_scratch, checkpoint_every,
            stop_after,
            samples, ligand_atoms, complex, repetitions, warmup, vr, denoiser, synth);
        self
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.seed.ok_or_else(|| CliError::Config("--seed is required for this command".into()))
    }

    pub fn dataset(&self) -> CliResult<&Path> {
        let p = self.dataset.as_deref().ok_or_else(|| CliError::Config("--dataset is required".into()))?;
        require_file("dataset", p)?;
        Ok(p)
    }

    pub fn out(&self) -> CliResult<&Path> {
        let p = self.out.as_deref().ok_or_else(|| CliError::Config("--out is required".into()))?;
        require_writable_parent(p)?;
        Ok(p)
    }

    /// Checks the embedding path, if one is given.
    pub fn embeddings(&self) -> CliResult<Option<&Path>> {
        match self.embeddings.as_deref() {
            Some(p) if !p.exists() => Err(CliError::Config(format!("embeddings path {} does not exist", p.display()))),
            other => Ok(other),
        }
    }

    pub fn batch(&self, default: usize) -> CliResult<usize> {
        positive("batch", self.batch.unwrap_or(default))
    }

    pub fn epochs(&self, default: usize) -> CliResult<usize> {
        positive("epochs", self.epochs.unwrap_or(default))
    }

    pub fn learning_rate(&self, default: f64) -> CliResult<f64> {
        let lr = self.learning_rate.unwrap_or(default);
        if !(lr.is_finite() && lr > 0.0) {
            return Err(CliError::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(lr)
    }

    pub fn steps_t(&self) -> usize {
        self.diffusion_steps.unwrap_or(DEFAULT_STEPS)
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        NoiseSchedule::polynomial(self.steps_t()).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Virtual receptor settings with flag overrides applied.
    pub fn vr_config(&self) -> CliResult<VrConfig> {
        let mut cfg = self.vr.clone().unwrap_or_default();
        if let Some(v) = self.virtual_atoms {
            cfg.virtual_atoms = v;
        }
        if let Some(p) = self.pocket_atoms {
            cfg.pocket_atoms = p;
        }
        cfg.max_time = self.steps_t();
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Denoiser settings matched to a virtual receptor.
    pub fn denoiser_config(&self, vr: &VrConfig) -> CliResult<DenoiserConfig> {
        let mut cfg = self.denoiser.clone().unwrap_or_default();
        cfg.receptor_features = vr.feature_width;
        cfg.max_time = vr.max_time;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

fn positive(name: &str, v: usize) -> CliResult<usize> {
    if v == 0 {
        return Err(CliError::Config(format!("{name} must be positive")));
    }
    Ok(v)
}

pub fn require_file(what: &str, p: &Path) -> CliResult<()> {
    if !p.is_file() {
        return Err(CliError::Config(format!("{what} {} does not exist or is not a file", p.display())));
    }
    Ok(())
}

pub fn require_writable_parent(p: &Path) -> CliResult<()> {
    let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::Config(format!("output directory {} does not exist", parent.display())));
    }
    if p.is_dir() {
        return Err(CliError::Config(format!("output path {} is a directory", p.display())));
    }
    Ok(())
}

/// `<out>.curve.json` next to a checkpoint.
pub fn curve_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".curve.json");
    PathBuf::from(s)
}

/// Tool version and the effective configuration, embedded in every output.
pub fn provenance(command: &str, cfg: &RunConfig, resolved: Value) -> Value {
    json!({
        "tool": "vrdiff",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg,
        "resolved": resolved,
    })
}
