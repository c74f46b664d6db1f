//! Variance-preserving diffusion over ligand positions and feature channels.
//!
//! The forward marginal is `q(z_t | z_0) = N(α_t z_0, (1 − α_t²) I)` and the
//! reverse step samples `q(z_{t−1} | z_t, z_0) = N(u_t z_t + v_t z_0, w_t I)`
//! with the clean data replaced by the denoiser's estimate.

use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 500;

/// Precision floor `s` of the polynomial schedule.
pub const SCHEDULE_PRECISION: f64 = 1e-6;

/// One-hot feature channels are scaled by this factor relative to positions
/// before diffusion.
pub const FEATURE_SCALE: f64 = 0.25;

/// `recover_data` refuses `α_t` below this value.
pub const MIN_RECOVERABLE_ALPHA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// Polynomial schedule `α_t² = (1 − 2s)(1 − (t/T)²)² + s`, where the
    /// per-step ratios `α_t²/α_{t−1}²` are first clipped to at least 1e-3.
    pub fn polynomial(steps: usize) -> Result<Self> {
        Self::polynomial_with_precision(steps, SCHEDULE_PRECISION)
    }

    pub fn polynomial_with_precision(steps: usize, precision: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(0.0..0.5).contains(&precision) {
            return Err(Error::invalid(format!("precision must be in [0, 0.5), got {precision}")));
        }
        let t_max = steps as f64;
        let raw: Vec<f64> = (0..=steps)
            .map(|t| {
                let x = t as f64 / t_max;
                (1.0 - x * x).powi(2)
            })
            .collect();
        // clip per-step ratios, then rebuild the cumulative product
        let mut alphas2 = Vec::with_capacity(steps + 1);
        let mut acc: f64 = 1.0;
        let mut prev = 1.0;
        for (t, &a) in raw.iter().enumerate() {
            // short horizons need a lower floor on the last ratio to reach α_T ≤ 1e-2
            let floor = if t == steps { (5e-5 / acc).min(1e-3) } else { 1e-3 };
            let ratio = if prev > 0.0 { (a / prev).clamp(floor, 1.0) } else { floor };
            acc *= ratio;
            alphas2.push(acc);
            prev = a;
        }
        let alphas = alphas2
            .iter()
            .map(|&a2| ((1.0 - 2.0 * precision) * a2 + precision).sqrt())
            .collect();
        Self::from_alphas(alphas)
    }

    /// Validates an explicit `α_0..α_T` sequence.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 3 {
            return Err(Error::invalid("schedule needs T >= 2"));
        }
        if alphas.iter().any(|a| !a.is_finite() || *a <= 0.0 || *a > 1.0) {
            return Err(Error::invalid("every alpha must lie in (0, 1]"));
        }
        if alphas[0] < 1.0 - 1e-4 {
            return Err(Error::invalid(format!("alpha_0 = {} is not close to 1", alphas[0])));
        }
        if *alphas.last().unwrap() > 1e-2 {
            return Err(Error::invalid(format!("alpha_T = {} is not close to 0", alphas.last().unwrap())));
        }
        if alphas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("alphas must be strictly decreasing"));
        }
        Ok(Self { alphas })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// `σ_t = √(1 − α_t²)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alphas[t] * self.alphas[t]).max(0.0).sqrt()
    }

    pub fn snr(&self, t: usize) -> f64 {
        let a2 = self.alphas[t] * self.alphas[t];
        a2 / (1.0 - a2)
    }

    fn check_time(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid(format!("time {t} outside [0, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn posterior_coefficients(&self, t: usize) -> Result<PosteriorCoefficients> {
        if t == 0 {
            return Err(Error::invalid("posterior coefficients need t >= 1"));
        }
        self.check_time(t)?;
        Ok(posterior_coefficients_from(self.alphas[t - 1], self.alphas[t]))
    }
}

/// Coefficients of `q(z_{t−1} | z_t, z_0) = N(u z_t + v z_0, w I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

/// Posterior coefficients from `α_{t−1}` and `α_t` alone.
pub fn posterior_coefficients_from(alpha_prev: f64, alpha_t: f64) -> PosteriorCoefficients {
    let sigma2_prev = 1.0 - alpha_prev * alpha_prev;
    let sigma2_t = 1.0 - alpha_t * alpha_t;
    let alpha_step = alpha_t / alpha_prev;
    let sigma2_step = (sigma2_t - alpha_step * alpha_step * sigma2_prev).max(0.0);
    if sigma2_t <= 0.0 {
        // both marginals are noiseless; the step is the identity
        return PosteriorCoefficients { u: 1.0, v: 0.0, w: 0.0 };
    }
    PosteriorCoefficients {
        u: alpha_step * sigma2_prev / sigma2_t,
        v: alpha_prev * sigma2_step / sigma2_t,
        w: sigma2_step * sigma2_prev / sigma2_t,
    }
}

/// Ligand positions and feature channels, the object being diffused.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub positions: Array2<f64>,
    pub features: Array2<f64>,
}

impl DiffusionState {
    pub fn new(positions: Array2<f64>, features: Array2<f64>) -> Result<Self> {
        if positions.ncols() != 3 || positions.nrows() != features.nrows() {
            return Err(Error::shape(format!(
                "state needs n×3 positions and n×c features, got {:?} and {:?}",
                positions.shape(),
                features.shape()
            )));
        }
        Ok(Self { positions, features })
    }

    pub fn zeros(n_atoms: usize, channels: usize) -> Self {
        Self { positions: Array2::zeros((n_atoms, 3)), features: Array2::zeros((n_atoms, channels)) }
    }

    pub fn standard_normal<R: Rng + ?Sized>(n_atoms: usize, channels: usize, rng: &mut R) -> Self {
        let mut draw = |shape: (usize, usize)| Array2::from_shape_simple_fn(shape, || StandardNormal.sample(&mut *rng));
        let positions = draw((n_atoms, 3));
        let features = draw((n_atoms, channels));
        Self { positions, features }
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.nrows()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.positions.shape() == other.positions.shape() && self.features.shape() == other.features.shape()
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        debug_assert!(self.same_shape(other));
        let mix = |x: &Array2<f64>, y: &Array2<f64>| {
            let mut out = x * a;
            out.scaled_add(b, y);
            out
        };
        Self {
            positions: mix(&self.positions, &other.positions),
            features: mix(&self.features, &other.features),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(self.features.iter()).all(|v| v.is_finite())
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.positions.iter().chain(self.features.iter())
    }

    pub fn len(&self) -> usize {
        self.positions.len() + self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn squared_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }
}

/// Draws `z_t = α_t z_0 + σ_t ε` and returns it with the noise `ε`.
pub fn forward_sample<R: Rng + ?Sized>(
    z0: &DiffusionState,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(DiffusionState, DiffusionState)> {
    schedule.check_time(t)?;
    let eps = DiffusionState::standard_normal(z0.n_atoms(), z0.channels(), rng);
    let zt = z0.combine(schedule.alpha(t), &eps, schedule.sigma(t));
    Ok((zt, eps))
}

/// One forward transition `z_t ~ q(z_t | z_{t−1})` for `t >= 1`.
pub fn forward_step<R: Rng + ?Sized>(
    z_prev: &DiffusionState,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<DiffusionState> {
    if t == 0 {
        return Err(Error::invalid("forward step needs t >= 1"));
    }
    schedule.check_time(t)?;
    let (ap, at) = (schedule.alpha(t - 1), schedule.alpha(t));
    let step = at / ap;
    let var = (1.0 - at * at) - step * step * (1.0 - ap * ap);
    let eps = DiffusionState::standard_normal(z_prev.n_atoms(), z_prev.channels(), rng);
    Ok(z_prev.combine(step, &eps, var.max(0.0).sqrt()))
}

/// `ẑ_0 = z_t / α_t − (σ_t / α_t) ε̂`.
pub fn recover_data(
    z_t: &DiffusionState,
    eps_hat: &DiffusionState,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<DiffusionState> {
    if t == 0 {
        return Err(Error::invalid("recover_data needs t >= 1"));
    }
    schedule.check_time(t)?;
    recover_data_with_alpha(z_t, eps_hat, schedule.alpha(t))
}

pub fn recover_data_with_alpha(z_t: &DiffusionState, eps_hat: &DiffusionState, alpha: f64) -> Result<DiffusionState> {
    if alpha < MIN_RECOVERABLE_ALPHA {
        return Err(Error::Numerical(format!("alpha {alpha:e} too small to invert the forward process")));
    }
    if !z_t.same_shape(eps_hat) {
        return Err(Error::shape("noise estimate shape differs from state"));
    }
    let sigma = (1.0 - alpha * alpha).max(0.0).sqrt();
    Ok(z_t.combine(1.0 / alpha, eps_hat, -sigma / alpha))
}

/// Anything that estimates the noise in `z_t` given conditioning context.
pub trait NoisePredictor {
    type Context;

    fn predict_noise(&self, ctx: &Self::Context, z_t: &DiffusionState, t: usize) -> Result<DiffusionState>;
}

/// Output of the ancestral sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedLigand {
    pub positions: Array2<f64>,
    /// Final feature channels before decoding.
    pub features: Array2<f64>,
    /// Argmax over the feature channels, one class per atom.
    pub atom_classes: Vec<usize>,
}

/// Ancestral sampling from `z_T ~ N(0, I)` down to `z_0`.
///
/// Each step predicts the noise, recovers the clean-data estimate and draws
/// `z_{t−1}` from the posterior with that estimate plugged in. The final
/// step (`t = 1`) uses the posterior mean without noise.
pub fn sample<P: NoisePredictor, R: Rng + ?Sized>(
    predictor: &P,
    ctx: &P::Context,
    n_atoms: usize,
    channels: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<GeneratedLigand> {
    if n_atoms == 0 {
        return Err(Error::invalid("cannot sample a ligand with zero atoms"));
    }
    let mut z = DiffusionState::standard_normal(n_atoms, channels, rng);
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = predictor.predict_noise(ctx, &z, t)?;
        if !eps_hat.same_shape(&z) {
            return Err(Error::shape(format!("noise prediction at t={t} has the wrong shape")));
        }
        if !eps_hat.is_finite() {
            return Err(Error::NonFinite(format!("noise prediction at t={t}")));
        }
        let z0_hat = recover_data(&z, &eps_hat, t, schedule)?;
        let c = schedule.posterior_coefficients(t)?;
        let mut next = z.combine(c.u, &z0_hat, c.v);
        if t > 1 && c.w > 0.0 {
            let noise = DiffusionState::standard_normal(n_atoms, channels, rng);
            next = next.combine(1.0, &noise, c.w.sqrt());
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at t={}", t - 1)));
        }
        z = next;
    }
    let atom_classes = decode_classes(&z.features);
    Ok(GeneratedLigand { positions: z.positions, features: z.features, atom_classes })
}

/// Argmax per row; ties go to the lowest channel.
pub fn decode_classes(features: &Array2<f64>) -> Vec<usize> {
    features
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Mean squared difference per component, the denoising objective.
pub fn mean_squared_error(a: &DiffusionState, b: &DiffusionState) -> f64 {
    let mut total = 0.0;
    Zip::from(&a.positions).and(&b.positions).for_each(|x, y| total += (x - y) * (x - y));
    Zip::from(&a.features).and(&b.features).for_each(|x, y| total += (x - y) * (x - y));
    total / a.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn clean_state(rng: &mut ChaCha8Rng, n: usize) -> DiffusionState {
        let positions = Array2::from_shape_simple_fn((n, 3), || rng.random_range(-3.0..3.0));
        let mut features = Array2::zeros((n, 4));
        for i in 0..n {
            features[[i, rng.random_range(0..4)]] = FEATURE_SCALE;
        }
        DiffusionState::new(positions, features).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        for steps in [2, 10, 100, 500, 1000] {
            let s = NoiseSchedule::polynomial(steps).unwrap();
            assert!(s.alpha(0) >= 1.0 - 1e-4);
            assert!(s.alpha(steps) <= 1e-2);
            assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn snr_strictly_decreasing_over_full_sweep() {
        let s = NoiseSchedule::polynomial(1000).unwrap();
        for t in 1..=1000 {
            assert!(s.snr(t) < s.snr(t - 1), "snr not decreasing at t={t}");
        }
    }

    #[test]
    fn schedule_rejects_short_horizon() {
        assert!(NoiseSchedule::polynomial(1).is_err());
        assert!(NoiseSchedule::from_alphas(vec![1.0, 0.5, 0.6, 0.001]).is_err());
    }

    #[test]
    fn forward_at_zero_is_near_clean_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = NoiseSchedule::polynomial(500).unwrap();
        let z0 = clean_state(&mut rng, 20);
        let (zt, _) = forward_sample(&z0, 0, &s, &mut rng).unwrap();
        let bound = s.sigma(0) * 5.0 + (1.0 - s.alpha(0)) * 3.0;
        for (a, b) in zt.values().zip(z0.values()) {
            assert!((a - b).abs() < bound);
        }
    }

    #[test]
    fn forward_moments_match_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = NoiseSchedule::polynomial(100).unwrap();
        let z0 = DiffusionState::new(Array2::from_elem((1, 3), 1.5), Array2::from_elem((1, 1), -0.5)).unwrap();
        let t = 40;
        let n = 10_000;
        let (mut sum, mut sum2) = (vec![0.0; 4], vec![0.0; 4]);
        for _ in 0..n {
            let (zt, _) = forward_sample(&z0, t, &s, &mut rng).unwrap();
            for (k, v) in zt.values().enumerate() {
                sum[k] += v;
                sum2[k] += v * v;
            }
        }
        let var = 1.0 - s.alpha(t).powi(2);
        for (k, z) in z0.values().enumerate() {
            let mean = sum[k] / n as f64;
            let sample_var = sum2[k] / n as f64 - mean * mean;
            let se_mean = (var / n as f64).sqrt();
            let se_var = var * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - s.alpha(t) * z).abs() < 3.0 * se_mean, "mean {mean}");
            assert!((sample_var - var).abs() < 3.0 * se_var, "var {sample_var} vs {var}");
        }
    }

    #[test]
    fn terminal_state_uncorrelated_with_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = NoiseSchedule::polynomial(500).unwrap();
        let z0 = clean_state(&mut rng, 200);
        let (zt, _) = forward_sample(&z0, 500, &s, &mut rng).unwrap();
        let xs: Vec<f64> = z0.positions.iter().copied().collect();
        let ys: Vec<f64> = zt.positions.iter().copied().collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
        let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n).sqrt();
        let corr = cov / (sx * sy);
        // |corr| for 600 independent samples is below 4/sqrt(600) ≈ 0.16 w.h.p.
        assert!(corr.abs() < 0.16, "corr {corr}");
    }

    #[test]
    fn degenerate_step_is_noop() {
        let c = posterior_coefficients_from(0.8, 0.8);
        assert!((c.u - 1.0).abs() < 1e-15);
        assert!(c.v.abs() < 1e-15);
        assert!(c.w.abs() < 1e-15);
    }

    #[test]
    fn posterior_mean_at_noiseless_input_is_previous_marginal_mean() {
        let s = NoiseSchedule::polynomial(200).unwrap();
        for t in [1, 2, 50, 150, 200] {
            let c = s.posterior_coefficients(t).unwrap();
            // z_t = α_t z_0 exactly ⇒ mean = (u α_t + v) z_0 = α_{t−1} z_0
            assert!((c.u * s.alpha(t) + c.v - s.alpha(t - 1)).abs() < 1e-12, "t={t}");
            // variance identity: u² σ_t² + w = σ_{t−1}²
            let lhs = c.u * c.u * s.sigma(t).powi(2) + c.w;
            assert!((lhs - s.sigma(t - 1).powi(2)).abs() < 1e-12, "t={t}");
        }
        assert!(s.posterior_coefficients(0).is_err());
    }

    #[test]
    fn recover_inverts_forward_with_true_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = NoiseSchedule::polynomial(500).unwrap();
        let z0 = clean_state(&mut rng, 15);
        for t in [1, 10, 250, 499] {
            let (zt, eps) = forward_sample(&z0, t, &s, &mut rng).unwrap();
            let back = recover_data(&zt, &eps, t, &s).unwrap();
            for (a, b) in back.values().zip(z0.values()) {
                assert!((a - b).abs() < 1e-9, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn recover_with_unit_alpha_and_zero_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = clean_state(&mut rng, 4);
        let zero = DiffusionState::zeros(4, 4);
        assert_eq!(recover_data_with_alpha(&z, &zero, 1.0).unwrap(), z);
    }

    #[test]
    fn recover_matches_independent_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = NoiseSchedule::polynomial(300).unwrap();
        let zt = clean_state(&mut rng, 6);
        let eps = DiffusionState::standard_normal(6, 4, &mut rng);
        let t = 120;
        let got = recover_data(&zt, &eps, t, &s).unwrap();
        // solve z_t = α z_0 + σ ε for z_0, one scalar at a time
        let (a, sg) = (s.alpha(t), s.sigma(t));
        for ((g, z), e) in got.values().zip(zt.values()).zip(eps.values()) {
            assert!((g - (z - sg * e) / a).abs() < 1e-12);
        }
    }

    #[test]
    fn recover_guards_tiny_alpha() {
        let z = DiffusionState::zeros(1, 1);
        assert!(matches!(recover_data_with_alpha(&z, &z, 1e-7), Err(Error::Numerical(_))));
    }

    /// Returns the exact noise that takes a planted `z_0` to the current state.
    struct Planted {
        z0: DiffusionState,
        schedule: NoiseSchedule,
        calls: Cell<usize>,
    }

    impl NoisePredictor for Planted {
        type Context = ();

        fn predict_noise(&self, _: &(), z_t: &DiffusionState, t: usize) -> Result<DiffusionState> {
            self.calls.set(self.calls.get() + 1);
            let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
            Ok(z_t.combine(1.0 / s, &self.z0, -a / s))
        }
    }

    #[test]
    fn planted_sampler_recovers_data_with_exactly_t_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let schedule = NoiseSchedule::polynomial(500).unwrap();
        let z0 = clean_state(&mut rng, 12);
        let oracle = Planted { z0: z0.clone(), schedule: schedule.clone(), calls: Cell::new(0) };
        let out = sample(&oracle, &(), 12, 4, &schedule, &mut rng).unwrap();
        assert_eq!(oracle.calls.get(), 500);
        let err: f64 = out
            .positions
            .outer_iter()
            .zip(z0.positions.outer_iter())
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
            .sum::<f64>()
            / 12.0;
        assert!(err < 1e-3, "mean position error {err}");
        assert_eq!(out.atom_classes, decode_classes(&z0.features));
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let schedule = NoiseSchedule::polynomial(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let oracle = Planted { z0: clean_state(&mut rng, 5), schedule: schedule.clone(), calls: Cell::new(0) };
        let a = sample(&oracle, &(), 5, 4, &schedule, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let b = sample(&oracle, &(), 5, 4, &schedule, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positions.shape(), &[5, 3]);
        assert_eq!(a.features.shape(), &[5, 4]);
    }

    struct Exploding;

    impl NoisePredictor for Exploding {
        type Context = ();

        fn predict_noise(&self, _: &(), z_t: &DiffusionState, _: usize) -> Result<DiffusionState> {
            let mut out = z_t.clone();
            out.positions[[0, 0]] = f64::NAN;
            Ok(out)
        }
    }

    #[test]
    fn nonfinite_prediction_aborts() {
        let schedule = NoiseSchedule::polynomial(10).unwrap();
        let err = sample(&Exploding, &(), 3, 4, &schedule, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("t=10")));
    }
}
