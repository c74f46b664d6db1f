//! Denoiser forward-pass timing against receptor node count.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vrdiff::diffcore::derived_rng;
use vrdiff::diffusion::DiffusionState;
use vrdiff::egnn::{Denoiser, DenoiserConfig};
use vrdiff::geometry::AtomCloud;
use vrdiff::virtual_receptor::{VirtualReceptor, VrConfig};

use crate::config::{provenance, RunConfig};
use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const MIN_REPETITIONS: usize = 20;
pub const SCALING_NODES: [usize; 4] = [20, 40, 80, 160];
const DEFAULT_LIGAND_ATOMS: usize = 20;
const DEFAULT_WARMUP: usize = 3;

/// Timing model used when the config file does not give one: the default
/// depth at a width that keeps a full sweep under a minute on one core.
pub fn bench_denoiser_config() -> DenoiserConfig {
    DenoiserConfig { width: 64, hidden: 64, receptor_features: 64, ..DenoiserConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub receptor_nodes: usize,
    pub total_nodes: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub provenance: Value,
    pub ligand_atoms: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Denoiser pass on the full pocket.
    pub full: Timing,
    /// Denoiser pass on the virtual receptor.
    pub virtual_receptor: Timing,
    /// Encoding the pocket into virtual atoms, timed separately.
    pub encode_median_s: f64,
    /// full / virtual, denoiser pass only.
    pub speedup: f64,
    /// full / (virtual + encoding).
    pub speedup_with_encoding: f64,
    pub scaling: Vec<Timing>,
    /// Least-squares slope of log time against log total node count.
    pub loglog_slope: f64,
    pub superlinear: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_reps(warmup: usize, reps: usize, mut f: impl FnMut() -> CliResult<()>) -> CliResult<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            f()?;
            Ok(start.elapsed().as_secs_f64())
        })
        .collect()
}

fn timing(receptor_nodes: usize, ligand: usize, times: Vec<f64>) -> Timing {
    let min_s = times.iter().copied().fold(f64::INFINITY, f64::min);
    let max_s = times.iter().copied().fold(0.0, f64::max);
    Timing { receptor_nodes, total_nodes: receptor_nodes + ligand, median_s: median(times), min_s, max_s }
}

/// Ordinary least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn random_cloud(n: usize, width: usize, seed: u64, stream: u64) -> AtomCloud {
    let s = DiffusionState::standard_normal(n, width, &mut derived_rng(seed, stream));
    AtomCloud::new(s.positions.mapv(|v| 6.0 * v), s.features).expect("shapes agree")
}

pub fn run_bench(cfg: &RunConfig) -> CliResult<BenchReport> {
    let reps = cfg.repetitions.unwrap_or(MIN_REPETITIONS);
    if reps < MIN_REPETITIONS {
        return Err(CliError::Config(format!("benchmark needs at least {MIN_REPETITIONS} repetitions, got {reps}")));
    }
    let warmup = cfg.warmup.unwrap_or(DEFAULT_WARMUP);
    let ligand_atoms = cfg.ligand_atoms.unwrap_or(DEFAULT_LIGAND_ATOMS);
    if ligand_atoms == 0 {
        return Err(CliError::Config("ligand atom count must be positive".into()));
    }
    let seed = cfg.seed.unwrap_or(0);
    let mut den_cfg = cfg.denoiser.clone().unwrap_or_else(bench_denoiser_config);
    den_cfg.max_time = cfg.steps_t();
    den_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let width = den_cfg.receptor_features;
    let base_vr = cfg.vr.clone().unwrap_or_default();
    let vr_cfg = VrConfig {
        virtual_atoms: cfg.virtual_atoms.unwrap_or(base_vr.virtual_atoms),
        pocket_atoms: cfg.pocket_atoms.unwrap_or(base_vr.pocket_atoms),
        receptor_features: width,
        feature_width: width,
        max_time: den_cfg.max_time,
        ..base_vr
    };
    vr_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let denoiser = Denoiser::new(den_cfg.clone(), &mut derived_rng(seed, 1))?;
    let vr = VirtualReceptor::new(vr_cfg.clone(), &mut derived_rng(seed, 2))?;
    let z = DiffusionState::standard_normal(ligand_atoms, den_cfg.ligand_channels, &mut derived_rng(seed, 3));
    let t = den_cfg.max_time / 2;
    let pocket = random_cloud(vr_cfg.pocket_atoms, width, seed, 4);
    let virt = vr.encode(&pocket, t)?;

    let forward_on = |receptor: &AtomCloud| -> CliResult<Vec<f64>> {
        time_reps(warmup, reps, || {
            std::hint::black_box(denoiser.forward(&z, receptor, t)?);
            Ok(())
        })
    };
    log::info!("timing {} receptor nodes vs {} virtual atoms", pocket.len(), virt.len());
    let full = timing(pocket.len(), ligand_atoms, forward_on(&pocket)?);
    let virtual_receptor = timing(virt.len(), ligand_atoms, forward_on(&virt)?);
    let encode = median(time_reps(warmup, reps, || {
        std::hint::black_box(vr.encode(&pocket, t)?);
        Ok(())
    })?);

    let mut scaling = Vec::new();
    for (k, &n) in SCALING_NODES.iter().enumerate() {
        let receptor = random_cloud(n, width, seed, 10 + k as u64);
        scaling.push(timing(n, ligand_atoms, forward_on(&receptor)?));
        log::info!("{n} receptor nodes: median {:.4} s", scaling[k].median_s);
    }
    let slope = loglog_slope(&scaling.iter().map(|s| (s.total_nodes as f64, s.median_s)).collect::<Vec<_>>());

    let resolved = serde_json::json!({ "denoiser": den_cfg, "vr": vr_cfg, "time_step": t });
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        provenance: provenance("bench", cfg, resolved),
        ligand_atoms,
        repetitions: reps,
        warmup,
        speedup: full.median_s / virtual_receptor.median_s,
        speedup_with_encoding: full.median_s / (virtual_receptor.median_s + encode),
        full,
        virtual_receptor,
        encode_median_s: encode,
        scaling,
        loglog_slope: slope,
        superlinear: slope > 1.0,
    })
}

/// Structural check of a serialized report.
pub fn validate_report(value: &Value) -> Result<(), String> {
    let report: BenchReport = serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(format!("schema version {} != {SCHEMA_VERSION}", report.schema_version));
    }
    if report.repetitions < MIN_REPETITIONS {
        return Err(format!("{} repetitions, need {MIN_REPETITIONS}", report.repetitions));
    }
    let nodes: Vec<usize> = report.scaling.iter().map(|s| s.receptor_nodes).collect();
    if nodes != SCALING_NODES {
        return Err(format!("scaling node counts {nodes:?}, expected {SCALING_NODES:?}"));
    }
    let all = report.scaling.iter().chain([&report.full, &report.virtual_receptor]);
    for t in all {
        if !(t.median_s.is_finite() && t.median_s > 0.0 && t.min_s <= t.median_s && t.median_s <= t.max_s) {
            return Err(format!("bad timing for {} nodes", t.receptor_nodes));
        }
        if t.total_nodes != t.receptor_nodes + report.ligand_atoms {
            return Err("total node count does not add up".into());
        }
    }
    if !report.speedup.is_finite() || !report.loglog_slope.is_finite() {
        return Err("derived ratios are not finite".into());
    }
    Ok(())
}
