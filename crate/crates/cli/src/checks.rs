//! Property checks shared by `vrdiff validate` and the acceptance suite.
//! Each returns the measured quantity; callers decide the tolerance.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vrdiff::diffcore::derived_rng;
use vrdiff::diffusion::{forward_sample, forward_step, sample, DiffusionState, NoisePredictor, NoiseSchedule};
use vrdiff::geometry::{apply_transform, AtomCloud, RigidTransform};
use vrdiff::matching::{hungarian, Assignment};
use vrdiff::virtual_receptor::VirtualReceptor;

use crate::error::CliResult;

/// Denominator floor for finite-difference relative errors, so that
/// vanishing gradients are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-3;

/// One evaluated property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub module: String,
    pub property: String,
    pub tolerance: f64,
    pub measured: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `measured ≤ tolerance` (and is not NaN).
    pub fn at_most(module: &str, property: &str, tolerance: f64, measured: f64, detail: impl Into<String>) -> Self {
        Self {
            module: module.into(),
            property: property.into(),
            tolerance,
            measured,
            passed: measured <= tolerance,
            detail: detail.into(),
        }
    }
}

pub fn fd_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central differences of `f` at `x` along each probed coordinate, compared
/// with `analytic`. Returns the largest relative error.
pub fn fd_max_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], probes: &[usize], h: f64) -> f64 {
    let mut worst = 0.0f64;
    let mut p = x.to_vec();
    for &k in probes {
        p[k] = x[k] + h;
        let up = f(&p);
        p[k] = x[k] - h;
        let down = f(&p);
        p[k] = x[k];
        worst = worst.max(fd_relative_error(analytic[k], (up - down) / (2.0 * h)));
    }
    worst
}

/// `count` distinct coordinates out of `len`, or all of them if fewer.
pub fn probe_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = derived_rng(seed, 0xfd);
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, len, count.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

/// Predictor wrapper that adds a fixed vector to every position output,
/// which breaks rotation equivariance. Used to show that the suite notices.
pub struct RotationBug<'a, P>(pub &'a P);

impl<P: NoisePredictor<Context = AtomCloud>> NoisePredictor for RotationBug<'_, P> {
    type Context = AtomCloud;

    fn predict_noise(&self, ctx: &AtomCloud, z_t: &DiffusionState, t: usize) -> vrdiff::Result<DiffusionState> {
        let mut out = self.0.predict_noise(ctx, z_t, t)?;
        out.positions.column_mut(0).mapv_inplace(|v| v + 0.05);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct EquivarianceCase {
    pub pocket: AtomCloud,
    pub z_t: DiffusionState,
    pub t: usize,
}

fn gaussian_rows(n: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    let s = DiffusionState::standard_normal(n, cols, rng);
    s.features.mapv(|v| v * scale)
}

/// Random pockets and noisy ligands at random times in `1..=max_time`.
pub fn equivariance_cases(
    count: usize,
    pocket_atoms: usize,
    feature_dim: usize,
    ligand_atoms: usize,
    max_time: usize,
    seed: u64,
) -> Vec<EquivarianceCase> {
    (0..count)
        .map(|k| {
            let mut rng = derived_rng(seed, k as u64);
            let pocket = AtomCloud::new(gaussian_rows(pocket_atoms, 3, 6.0, &mut rng), gaussian_rows(pocket_atoms, feature_dim, 1.0, &mut rng))
                .expect("shapes agree");
            let z_t = DiffusionState::new(gaussian_rows(ligand_atoms, 3, 2.0, &mut rng), gaussian_rows(ligand_atoms, 4, 1.0, &mut rng))
                .expect("shapes agree");
            let t = rng.random_range(1..=max_time);
            EquivarianceCase { pocket, z_t, t }
        })
        .collect()
}

fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest relative deviation from `ε(gX) = R ε(X)` for positions and
/// `ε(gX) = ε(X)` for features, over `transforms` random rigid motions per
/// case; every other motion includes a reflection.
pub fn equivariance_errors<P>(predictor: &P, cases: &[EquivarianceCase], transforms: usize, seed: u64) -> CliResult<(f64, f64)>
where
    P: NoisePredictor<Context = AtomCloud> + Sync,
{
    let per_case = cases
        .par_iter()
        .enumerate()
        .map(|(k, case)| {
            let base = predictor.predict_noise(&case.pocket, &case.z_t, case.t)?;
            let mut rng = derived_rng(seed, 1000 + k as u64);
            let (mut pos, mut feat) = (0.0f64, 0.0f64);
            for m in 0..transforms {
                let g = RigidTransform::random(&mut rng, m % 2 == 1, 10.0);
                let pocket = apply_transform(&case.pocket, &g);
                let z = DiffusionState::new(g.apply_rows(case.z_t.positions.view()), case.z_t.features.clone())?;
                let moved = predictor.predict_noise(&pocket, &z, case.t)?;
                let expected = g.rotate_rows(base.positions.view());
                pos = pos.max(frobenius((&moved.positions - &expected).view()) / frobenius(expected.view()).max(1e-300));
                feat = feat.max(frobenius((&moved.features - &base.features).view()) / frobenius(base.features.view()).max(1e-300));
            }
            Ok((pos, feat))
        })
        .collect::<vrdiff::Result<Vec<(f64, f64)>>>()?;
    Ok(per_case.iter().fold((0.0, 0.0), |(a, b), &(p, f)| (a.max(p), b.max(f))))
}

/// Worst convexity error of the encoder weights and worst excursion of a
/// virtual coordinate outside the receptor's coordinate range, over
/// `evaluations` random receptors and times.
pub fn convexity(vr: &VirtualReceptor, evaluations: usize, seed: u64) -> CliResult<(f64, f64)> {
    let cfg = &vr.config;
    let per = (0..evaluations)
        .into_par_iter()
        .map(|k| {
            let mut rng = derived_rng(seed, k as u64);
            let scale = rng.random_range(0.5..20.0);
            let rec = AtomCloud::new(
                gaussian_rows(cfg.pocket_atoms, 3, scale, &mut rng),
                gaussian_rows(cfg.pocket_atoms, cfg.receptor_features, 1.0, &mut rng),
            )?;
            let t = rng.random_range(0..=cfg.max_time);
            let w = vr.compute_weights(&rec, t)?;
            let encoded = vr.encode(&rec, t)?;
            let virt = encoded.positions();
            let mut excursion = 0.0f64;
            for a in 0..3 {
                let col = rec.positions().column(a).to_owned();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for &v in virt.column(a) {
                    excursion = excursion.max(lo - v).max(v - hi);
                }
            }
            Ok((w.convexity_error(), excursion))
        })
        .collect::<vrdiff::Result<Vec<(f64, f64)>>>()?;
    Ok(per.iter().fold((0.0, 0.0), |(a, b), &(c, e)| (a.max(c), b.max(e))))
}

/// Minimum assignment cost by visiting every permutation (Heap's algorithm).
pub fn min_cost_by_enumeration(cost: ArrayView2<f64>) -> f64 {
    let n = cost.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = Assignment::cost_of(cost, &perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(Assignment::cost_of(cost, &perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Number of random `n×n` problems where the solver's permutation costs
/// more than the enumerated optimum, and the largest such excess.
pub fn hungarian_vs_enumeration(trials: usize, n: usize, seed: u64) -> CliResult<(usize, f64)> {
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for k in 0..trials {
        let mut rng = derived_rng(seed, k as u64);
        let cost = Array2::from_shape_simple_fn((n, n), || rng.random_range(0.0..100.0));
        let a = hungarian(cost.view())?;
        let found = Assignment::cost_of(cost.view(), &a.permutation);
        let best = min_cost_by_enumeration(cost.view());
        if found != best {
            mismatches += 1;
            worst = worst.max((found - best).abs());
        }
    }
    Ok((mismatches, worst))
}

/// Sample moments of one scalar against their expected values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentTest {
    pub t: usize,
    pub mean: f64,
    pub expected_mean: f64,
    pub variance: f64,
    pub expected_variance: f64,
    /// |mean − expected| in standard errors.
    pub mean_z: f64,
    /// |variance − expected| in standard errors.
    pub variance_z: f64,
}

fn moment_test(t: usize, xs: &[f64], expected_mean: f64, expected_variance: f64) -> MomentTest {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let variance = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let se_mean = (expected_variance / n).sqrt();
    let se_var = expected_variance * (2.0 / (n - 1.0)).sqrt();
    MomentTest {
        t,
        mean,
        expected_mean,
        variance,
        expected_variance,
        mean_z: (mean - expected_mean).abs() / se_mean,
        variance_z: (variance - expected_variance).abs() / se_var,
    }
}

fn scalar_state(v: f64) -> DiffusionState {
    DiffusionState::new(Array2::from_elem((1, 3), v), Array2::zeros((1, 0))).expect("shapes agree")
}

/// Draws `z_t ~ q(z_t | z0)`, then `z_{t−1}` from the posterior given
/// `(z_t, z0)`, and compares the moments of `z_{t−1}` with `q(z_{t−1} | z0)`.
pub fn posterior_marginal(schedule: &NoiseSchedule, t: usize, z0: f64, samples: usize, seed: u64) -> CliResult<MomentTest> {
    let c = schedule.posterior_coefficients(t)?;
    let x0 = scalar_state(z0);
    let mut rng = derived_rng(seed, t as u64);
    let mut xs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (z_t, _) = forward_sample(&x0, t, schedule, &mut rng)?;
        let xi: f64 = rng.sample(StandardNormal);
        xs.push(c.u * z_t.positions[[0, 0]] + c.v * z0 + c.w.sqrt() * xi);
    }
    let a = schedule.alpha(t - 1);
    Ok(moment_test(t, &xs, a * z0, 1.0 - a * a))
}

/// Draws the time-0 latent from `q(z_0 | x)`, applies one-step forward
/// transitions up to `t` and compares the moments of the result with the
/// direct marginal `q(z_t | x)`. The chain starts at `z_0`, not at `x`:
/// `σ_0 > 0`, so skipping that draw understates the variance.
pub fn forward_chain_marginal(schedule: &NoiseSchedule, t: usize, z0: f64, samples: usize, seed: u64) -> CliResult<MomentTest> {
    let x0 = scalar_state(z0);
    let mut rng = derived_rng(seed, 7000 + t as u64);
    let mut xs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (mut z, _) = forward_sample(&x0, 0, schedule, &mut rng)?;
        for s in 1..=t {
            z = forward_step(&z, s, schedule, &mut rng)?;
        }
        xs.push(z.positions[[0, 0]]);
    }
    let a = schedule.alpha(t);
    Ok(moment_test(t, &xs, a * z0, 1.0 - a * a))
}

/// Oracle that knows the clean ligand and returns the exact noise in `z_t`.
pub struct Planted {
    pub z0: DiffusionState,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for Planted {
    type Context = ();

    fn predict_noise(&self, _: &(), z_t: &DiffusionState, t: usize) -> vrdiff::Result<DiffusionState> {
        let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
        Ok(z_t.combine(1.0 / s, &self.z0, -a / s))
    }
}

/// Mean Euclidean distance between planted and recovered atom positions.
pub fn planted_recovery(schedule: &NoiseSchedule, z0: &DiffusionState, seed: u64) -> CliResult<f64> {
    let oracle = Planted { z0: z0.clone(), schedule: schedule.clone() };
    let out = sample(&oracle, &(), z0.n_atoms(), z0.channels(), schedule, &mut derived_rng(seed, 0))?;
    let n = z0.n_atoms() as f64;
    let total: f64 = out
        .positions
        .outer_iter()
        .zip(z0.positions.outer_iter())
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .sum();
    Ok(total / n)
}
