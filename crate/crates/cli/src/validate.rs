//! The property suite behind `vrdiff validate`: quick versions of every
//! module's invariants, reported with the tolerance each one used.

use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vrdiff::dataio::{dataset_to_string, parse_dataset, synth_generate, SynthConfig};
use vrdiff::diffcore::{derived_rng, flatten, Activation, Checkpoint, Mlp};
use vrdiff::diffusion::{DiffusionState, NoisePredictor, NoiseSchedule};
use vrdiff::egnn::DenoiserConfig;
use vrdiff::embeddings::EmbeddingTable;
use vrdiff::geometry::{apply_transform, select_pocket, RigidTransform};
use vrdiff::matching::bipartite_loss_positions;
use vrdiff::training::ConditionalModel;
use vrdiff::virtual_receptor::VrConfig;

use crate::checks::*;
use crate::config::{provenance, RunConfig};
use crate::error::{CliError, CliResult};

/// Deliberate defects the suite must catch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    /// Adds a fixed vector to the denoiser's position output.
    RotationBug,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rotation-bug" => Ok(Fault::RotationBug),
            other => Err(format!("unknown fault {other:?}; known: rotation-bug")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub provenance: Value,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// A small conditional model for the checks; widths do not affect the
/// properties under test.
pub fn small_model(seed: u64) -> CliResult<ConditionalModel> {
    let vr = VrConfig {
        virtual_atoms: 8,
        pocket_atoms: 24,
        receptor_features: 8,
        feature_width: 8,
        hidden: 16,
        q_dim: 8,
        b_half: 4,
        k_dim: 4,
        time_dim: 8,
        max_time: 100,
        ..VrConfig::default()
    };
    let den = DenoiserConfig {
        layers: 3,
        width: 8,
        hidden: 16,
        time_dim: 8,
        receptor_features: 8,
        max_time: 100,
        ..DenoiserConfig::default()
    };
    Ok(ConditionalModel::new(vr, den, &mut derived_rng(seed, 0))?)
}

fn mlp_gradient(seed: u64) -> CliResult<Check> {
    let mut rng = derived_rng(seed, 1);
    let mlp = Mlp::new(&[5, 16, 16, 3], Activation::Silu, &mut rng);
    let input: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (grads, _) = mlp.gradient(&input, &upstream)?;
    let base = flatten(&mlp);
    let analytic = flatten(&grads);
    let objective = |p: &[f64]| {
        let mut m = mlp.clone();
        vrdiff::diffcore::unflatten(&mut m, p);
        m.forward(&input).expect("dims fixed").iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
    };
    let probes = probe_indices(base.len(), 100, seed);
    let err = fd_max_error(objective, &base, &analytic, &probes, 1e-6);
    Ok(Check::at_most("diffcore", "mlp_gradient_matches_finite_differences", 1e-4, err, format!("{} probes", probes.len())))
}

fn checkpoint_roundtrip(model: &ConditionalModel) -> CliResult<Check> {
    let mut ck = Checkpoint::new(json!({ "kind": "probe" }));
    ck.add_params("m", model);
    let back = Checkpoint::from_bytes(&ck.to_bytes()).map_err(CliError::Runtime)?;
    let mut restored = model.clone();
    vrdiff::diffcore::unflatten(&mut restored, &vec![0.0; flatten(model).len()]);
    back.load_params("m", &mut restored)?;
    let diff = flatten(model).iter().zip(flatten(&restored)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(Check::at_most("diffcore", "checkpoint_roundtrip_is_exact", 0.0, diff, "max |Δparam|"))
}

fn rigid_orthonormal(seed: u64) -> Check {
    let mut rng = derived_rng(seed, 2);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let g = RigidTransform::random(&mut rng, k % 2 == 1, 5.0);
        let r = g.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|a| r[a][i] * r[a][j]).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst = worst.max((g.determinant().abs() - 1.0).abs());
    }
    Check::at_most("geometry", "rigid_transforms_are_orthonormal", 1e-12, worst, "100 transforms, half reflections")
}

fn pocket_selection_invariant(seed: u64) -> CliResult<Check> {
    let records = synth_generate(&SynthConfig { count: 4, families: 2, ..SynthConfig::default() }, seed)?;
    let mut rng = derived_rng(seed, 3);
    let mut mismatches = 0usize;
    for r in &records {
        let before = select_pocket(&r.receptor, r.ligand_centroid(), 100)?;
        let g = RigidTransform::random(&mut rng, true, 20.0);
        let moved = apply_transform(&r.receptor, &g);
        let after = select_pocket(&moved, g.apply_point(r.ligand_centroid()), 100)?;
        if before.residue_index() != after.residue_index() {
            mismatches += 1;
        }
    }
    Ok(Check::at_most("geometry", "pocket_selection_is_rigid_motion_invariant", 0.0, mismatches as f64, "complexes whose selection changed"))
}

fn bipartite_permutation_invariant(seed: u64) -> CliResult<Check> {
    let mut rng = derived_rng(seed, 4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = Array2::from_shape_simple_fn((12, 3), || rng.random_range(-5.0..5.0));
        let y = Array2::from_shape_simple_fn((12, 3), || rng.random_range(-5.0..5.0));
        let mut order: Vec<usize> = (0..12).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let shuffled = Array2::from_shape_fn((12, 3), |(i, a)| y[[order[i], a]]);
        let (l1, _) = bipartite_loss_positions(x.view(), y.view())?;
        let (l2, _) = bipartite_loss_positions(x.view(), shuffled.view())?;
        worst = worst.max((l1 - l2).abs() / l1.max(1e-12));
    }
    Ok(Check::at_most("matching", "bipartite_loss_ignores_atom_order", 1e-12, worst, "relative difference"))
}

fn schedule_checks() -> CliResult<Vec<Check>> {
    let mut out = Vec::new();
    let mut worst = 0.0f64;
    for steps in [2usize, 50, 500, 1000] {
        let s = NoiseSchedule::polynomial(steps)?;
        worst = worst.max((1.0 - 1e-4) - s.alpha(0)).max(s.alpha(steps) - 1e-2);
    }
    out.push(Check::at_most("diffusion", "schedule_endpoints", 0.0, worst.max(0.0), "α_0 ≥ 1−1e-4 and α_T ≤ 1e-2 for T ∈ {2, 50, 500, 1000}"));
    let s = NoiseSchedule::polynomial(1000)?;
    let violations = (1..=1000).filter(|&t| s.snr(t).partial_cmp(&s.snr(t - 1)) != Some(std::cmp::Ordering::Less)).count();
    out.push(Check::at_most("diffusion", "snr_strictly_decreasing", 0.0, violations as f64, "T = 1000, count of non-decreasing steps"));
    Ok(out)
}

fn posterior_check(seed: u64) -> CliResult<Check> {
    let s = NoiseSchedule::polynomial(500)?;
    let mut worst = 0.0f64;
    for t in [2, 100, 250, 400, 500] {
        let m = posterior_marginal(&s, t, 1.3, 20_000, seed)?;
        worst = worst.max(m.mean_z).max(m.variance_z);
    }
    Ok(Check::at_most("diffusion", "posterior_preserves_marginals", 3.0, worst, "largest deviation in standard errors, 2·10⁴ samples, 5 times"))
}

fn planted_check(seed: u64) -> CliResult<Check> {
    let s = NoiseSchedule::polynomial(500)?;
    let mut rng = derived_rng(seed, 5);
    let z0 = DiffusionState::new(
        Array2::from_shape_simple_fn((12, 3), || rng.random_range(-4.0..4.0)),
        Array2::from_shape_simple_fn((12, 4), || rng.random_range(0.0..0.25)),
    )?;
    let err = planted_recovery(&s, &z0, seed)?;
    Ok(Check::at_most("diffusion", "planted_answer_is_recovered", 1e-3, err, "mean position error (Å)"))
}

fn equivariance_check(model: &ConditionalModel, fault: Option<Fault>, seed: u64) -> CliResult<Vec<Check>> {
    let cases = equivariance_cases(6, model.vr.config.pocket_atoms, model.vr.config.receptor_features, 7, model.vr.config.max_time, seed);
    let (pos, feat) = match fault {
        Some(Fault::RotationBug) => equivariance_errors(&RotationBug(model), &cases, 4, seed)?,
        None => equivariance_errors(model, &cases, 4, seed)?,
    };
    Ok(vec![
        Check::at_most("egnn", "positions_transform_covariantly", 1e-5, pos, "6 inputs × 4 rigid motions incl. reflections"),
        Check::at_most("egnn", "features_are_invariant", 1e-5, feat, "6 inputs × 4 rigid motions incl. reflections"),
    ])
}

fn ligand_permutation_check(model: &ConditionalModel, seed: u64) -> CliResult<Check> {
    let case = &equivariance_cases(1, model.vr.config.pocket_atoms, model.vr.config.receptor_features, 7, 50, seed)[0];
    let base = model.predict_noise(&case.pocket, &case.z_t, case.t)?;
    let order = [3usize, 0, 6, 1, 5, 2, 4];
    let perm = |a: &Array2<f64>| Array2::from_shape_fn(a.raw_dim(), |(i, c)| a[[order[i], c]]);
    let z = DiffusionState::new(perm(&case.z_t.positions), perm(&case.z_t.features))?;
    let out = model.predict_noise(&case.pocket, &z, case.t)?;
    let diff = (&out.positions - &perm(&base.positions)).iter().chain((&out.features - &perm(&base.features)).iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Check::at_most("egnn", "ligand_permutation_equivariance", 1e-10, diff, "max |Δ| after permuting ligand atoms"))
}

fn vr_checks(model: &ConditionalModel, seed: u64) -> CliResult<Vec<Check>> {
    let (conv, excursion) = convexity(&model.vr, 300, seed)?;
    let mut out = vec![
        Check::at_most("virtual_receptor", "weights_are_convex", 1e-9, conv, "300 random receptors; worst negativity or row-sum error"),
        Check::at_most("virtual_receptor", "virtual_atoms_stay_in_bounds", 1e-9, excursion, "worst excursion past the coordinate range (Å)"),
    ];
    let case = &equivariance_cases(1, model.vr.config.pocket_atoms, model.vr.config.receptor_features, 1, 50, seed)[0];
    let mut rng = derived_rng(seed, 6);
    let mut worst = 0.0f64;
    for k in 0..6 {
        let g = RigidTransform::random(&mut rng, k % 2 == 1, 10.0);
        let a = model.vr.encode(&case.pocket, case.t)?;
        let b = model.vr.encode(&apply_transform(&case.pocket, &g), case.t)?;
        let expected = g.apply_rows(a.positions());
        let dp = (&b.positions() - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let df = (&b.features() - &a.features()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(dp).max(df);
    }
    out.push(Check::at_most("virtual_receptor", "encoder_is_rigid_motion_equivariant", 1e-9, worst, "max |Δ| over 6 motions"));
    Ok(out)
}

fn embedding_roundtrip(seed: u64) -> CliResult<Check> {
    let mut rng = derived_rng(seed, 7);
    let mut table = EmbeddingTable::new("probe", 6);
    for r in -3..9i64 {
        let row: Vec<f32> = (0..6).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        table.insert(r * 2, row).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = table.to_bytes();
    let back = EmbeddingTable::from_bytes(&bytes).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mismatch = (back != table || back.to_bytes() != bytes) as u8;
    Ok(Check::at_most("embeddings", "file_roundtrip_is_exact", 0.0, mismatch as f64, "1 if reading back changes the table"))
}

fn dataset_roundtrip(seed: u64) -> CliResult<Check> {
    let records = synth_generate(&SynthConfig { count: 3, families: 2, ..SynthConfig::default() }, seed)?;
    let text = dataset_to_string(&records)?;
    let back = parse_dataset(text.as_bytes())?;
    let mismatch = (back != records) as u8;
    Ok(Check::at_most("dataio", "dataset_roundtrip_is_exact", 0.0, mismatch as f64, "1 if parsing the written dataset changes it"))
}

fn hungarian_check(seed: u64) -> CliResult<Check> {
    let (mismatches, _) = hungarian_vs_enumeration(50, 6, seed)?;
    Ok(Check::at_most("matching", "hungarian_matches_enumeration", 0.0, mismatches as f64, "50 random 6×6 problems"))
}

pub fn run_validation(cfg: &RunConfig, fault: Option<Fault>) -> CliResult<ValidationReport> {
    let seed = cfg.seed.unwrap_or(0);
    let model = small_model(seed)?;
    let mut checks = vec![mlp_gradient(seed)?, checkpoint_roundtrip(&model)?, rigid_orthonormal(seed), pocket_selection_invariant(seed)?];
    checks.push(hungarian_check(seed)?);
    checks.push(bipartite_permutation_invariant(seed)?);
    checks.extend(schedule_checks()?);
    checks.push(posterior_check(seed)?);
    checks.push(planted_check(seed)?);
    checks.extend(equivariance_check(&model, fault, seed)?);
    checks.push(ligand_permutation_check(&model, seed)?);
    checks.extend(vr_checks(&model, seed)?);
    checks.push(embedding_roundtrip(seed)?);
    checks.push(dataset_roundtrip(seed)?);
    let passed = checks.iter().all(|c| c.passed);
    let prov = provenance("validate", cfg, json!({ "fault": fault, "seed": seed }));
    Ok(ValidationReport { provenance: prov, passed, checks })
}
