//! Forward diffusion, noise schedules, and the ancestral reverse sampler.
//!
//! The sampler is driven by any [`ScoreSource`](crate::compose::ScoreSource):
//! scores convert to ε predictions through ε̂ = −√(1−ᾱ_t)·s, which plugs
//! into the standard reverse update
//!
//! ```text
//! x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·η
//! ```
//!
//! with σ_t² the posterior variance (so σ_1 = 0 and the final step is
//! noiseless). An optional Langevin corrector interleaves
//! `x ← x + (δ/2)·s + √δ·η` steps at each noise level.

use crate::compose::{ComposeError, ScoreSource};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("beta[{index}] = {beta} outside (0, 1]")]
    BetaOutOfRange { index: usize, beta: f64 },
    #[error("alpha_bar must be strictly decreasing; violated at step {index}")]
    AlphaBarNotDecreasing { index: usize },
    #[error("step t = {t} outside schedule range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("non-finite epsilon prediction at t = {t}")]
    NonFiniteEps { t: usize },
    #[error("dimension mismatch: state is {state}-d, prediction is {pred}-d")]
    DimMismatch { state: usize, pred: usize },
    #[error("subsampling needs 2..={t_max} steps, asked for {requested}")]
    BadSubsample { requested: usize, t_max: usize },
    #[error(transparent)]
    Score(#[from] ComposeError),
}

/// β_t, α_t, ᾱ_t, σ_t arrays. Index convention: step t ∈ 1..=T maps to
/// array index t−1. `t_map` carries the original (training-scale) timestep
/// of each step, so strided schedules keep querying sources at the t values
/// they were trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    t_map: Vec<usize>,
}

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl NoiseSchedule {
    /// Linear β schedule from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::EmptySchedule);
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Standard training schedule: linear 1e-4 → 0.02 over 1000 steps.
    pub fn default_train() -> Self {
        Self::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid default")
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        let t_map = (1..=betas.len()).collect();
        Self::from_betas_with_map(betas, t_map)
    }

    fn from_betas_with_map(betas: Vec<f64>, t_map: Vec<usize>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::EmptySchedule);
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b <= 1.0) {
                return Err(DiffusionError::BetaOutOfRange { index: i, beta: b });
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for (i, &a) in alphas.iter().enumerate() {
            let next = acc * a;
            if next >= acc {
                return Err(DiffusionError::AlphaBarNotDecreasing { index: i });
            }
            alpha_bars.push(next);
            acc = next;
        }
        // Posterior variance β̃_t = (1 − ᾱ_{t−1})/(1 − ᾱ_t) · β_t, ᾱ_0 = 1.
        let sigmas: Vec<f64> = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                ((1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]).sqrt()
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars, sigmas, t_map })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Original timestep behind step `t` of this (possibly strided) schedule.
    pub fn original_t(&self, t: usize) -> usize {
        self.t_map[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange { t, t_max: self.steps() });
        }
        Ok(())
    }

    /// Strided schedule with `n` steps whose kept ᾱ values agree with this
    /// schedule at evenly spaced original timesteps (always keeping t = 1
    /// and t = T). Sources keep being queried at original timesteps via
    /// `original_t`.
    pub fn subsample(&self, n: usize) -> Result<NoiseSchedule, DiffusionError> {
        if n < 2 || n > self.steps() {
            return Err(DiffusionError::BadSubsample { requested: n, t_max: self.steps() });
        }
        let t_max = self.steps();
        let mut kept: Vec<usize> = (0..n)
            .map(|i| 1 + ((t_max - 1) as f64 * i as f64 / (n - 1) as f64).round() as usize)
            .collect();
        kept.dedup();
        let mut betas = Vec::with_capacity(kept.len());
        let mut prev_bar = 1.0;
        for &t in &kept {
            let bar = self.alpha_bar(t);
            betas.push(1.0 - bar / prev_bar);
            prev_bar = bar;
        }
        Self::from_betas_with_map(betas, kept)
    }
}

/// One point of a reverse trajectory: position, step, and the generator
/// that owns the trajectory's randomness.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub x: Vec<f64>,
    pub t: usize,
    pub rng: ChaCha8Rng,
}

/// Closed-form forward noising: x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε. Returns the
/// noised sample together with the exact ε drawn.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>), DiffusionError> {
    sched.check_t(t)?;
    let bar = sched.alpha_bar(t);
    let (sa, sn) = (bar.sqrt(), (1.0 - bar).sqrt());
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let xt = x0.iter().zip(&eps).map(|(x, e)| sa * x + sn * e).collect();
    Ok((xt, eps))
}

/// One reverse step t → t−1 given an ε prediction. Noise is suppressed on
/// the final step (σ_1 = 0 by the posterior-variance schedule, and η is not
/// drawn at t = 1 at all).
pub fn ancestral_step(
    mut state: DiffusionState,
    eps_pred: &[f64],
    sched: &NoiseSchedule,
) -> Result<DiffusionState, DiffusionError> {
    sched.check_t(state.t)?;
    if eps_pred.len() != state.x.len() {
        return Err(DiffusionError::DimMismatch { state: state.x.len(), pred: eps_pred.len() });
    }
    if eps_pred.iter().any(|v| !v.is_finite()) {
        return Err(DiffusionError::NonFiniteEps { t: state.t });
    }
    let t = state.t;
    let (beta, alpha, bar, sigma) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t), sched.sigma(t));
    let coef = beta / (1.0 - bar).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    for (x, e) in state.x.iter_mut().zip(eps_pred) {
        *x = inv_sqrt_alpha * (*x - coef * e);
    }
    if t > 1 && sigma > 0.0 {
        for x in state.x.iter_mut() {
            let eta: f64 = state.rng.sample(StandardNormal);
            *x += sigma * eta;
        }
    }
    state.t = t - 1;
    Ok(state)
}

/// How the Langevin corrector sizes its steps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LangevinStep {
    /// The same δ at every noise level.
    Fixed(f64),
    /// δ = scale · β_t, following the noise schedule.
    ProportionalToBeta(f64),
}

/// Corrector configuration: `n_steps` Langevin updates interleaved at each
/// noise level. Off by default.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub n_steps: usize,
    pub step: LangevinStep,
}

impl LangevinConfig {
    fn delta(&self, sched: &NoiseSchedule, t: usize) -> f64 {
        match self.step {
            LangevinStep::Fixed(d) => d,
            LangevinStep::ProportionalToBeta(scale) => scale * sched.beta(t),
        }
    }
}

/// ε̂ = −√(1−ᾱ_t)·s. The inverse (score from an ε prediction) is exact to
/// machine precision, so composing in score space loses nothing.
pub fn eps_from_score(score: &[f64], sched: &NoiseSchedule, t: usize) -> Vec<f64> {
    let c = (1.0 - sched.alpha_bar(t)).sqrt();
    score.iter().map(|s| -c * s).collect()
}

pub fn score_from_eps(eps: &[f64], sched: &NoiseSchedule, t: usize) -> Vec<f64> {
    let c = (1.0 - sched.alpha_bar(t)).sqrt();
    eps.iter().map(|e| -e / c).collect()
}

/// Full reverse rollout: x_T ~ N(0, I), then `steps()` ancestral updates
/// driven by the source's score, optionally interleaving Langevin corrector
/// steps at each noise level. A corrector with δ = 0 or n_steps = 0 draws no
/// randomness and leaves the trajectory bit-identical to a corrector-free
/// run.
pub fn sample(
    source: &dyn ScoreSource,
    sched: &NoiseSchedule,
    dim: usize,
    rng: ChaCha8Rng,
    corrector: Option<&LangevinConfig>,
) -> Result<Vec<f64>, DiffusionError> {
    Ok(sample_trajectory(source, sched, dim, rng, corrector)?.0)
}

/// Like [`sample`] but also returns the trajectory (x at every step,
/// noisiest first), for CSV dumps and diagnostics.
pub fn sample_trajectory(
    source: &dyn ScoreSource,
    sched: &NoiseSchedule,
    dim: usize,
    mut rng: ChaCha8Rng,
    corrector: Option<&LangevinConfig>,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), DiffusionError> {
    let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut state = DiffusionState { x, t: sched.steps(), rng };
    let mut traj = Vec::with_capacity(sched.steps() + 1);
    traj.push(state.x.clone());
    while state.t >= 1 {
        let t = state.t;
        let orig_t = sched.original_t(t);
        if let Some(cfg) = corrector {
            let delta = cfg.delta(sched, t);
            if delta > 0.0 && cfg.n_steps > 0 {
                for _ in 0..cfg.n_steps {
                    let s = source.score(&state.x, orig_t)?;
                    let sqrt_delta = delta.sqrt();
                    for (x, sv) in state.x.iter_mut().zip(&s) {
                        let eta: f64 = state.rng.sample(StandardNormal);
                        *x += 0.5 * delta * sv + sqrt_delta * eta;
                    }
                }
            }
        }
        let score = source.score(&state.x, orig_t)?;
        let eps = eps_from_score(&score, sched, t);
        state = ancestral_step(state, &eps, sched)?;
        traj.push(state.x.clone());
    }
    Ok((state.x, traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::{mixture_expert, DiffusedMixtureScore, ExpertEnsemble, MixtureScore};
    use crate::gmm::GaussianMixture;
    use crate::quad::{Grid, GridDensity};
    use rand_chacha::rand_core::SeedableRng;
    use std::sync::Arc;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn schedule_invariants_hold() {
        let s = NoiseSchedule::default_train();
        assert_eq!(s.steps(), 1000);
        for t in 2..=s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.sigma(t) > 0.0);
        }
        assert_eq!(s.sigma(1), 0.0);
        assert!(matches!(
            NoiseSchedule::from_betas(vec![0.0]),
            Err(DiffusionError::BetaOutOfRange { .. })
        ));
    }

    #[test]
    fn subsample_keeps_endpoints_and_alpha_bars() {
        let s = NoiseSchedule::default_train();
        let sub = s.subsample(50).unwrap();
        assert_eq!(sub.original_t(1), 1);
        assert_eq!(sub.original_t(sub.steps()), 1000);
        for t in 1..=sub.steps() {
            let orig = sub.original_t(t);
            assert!((sub.alpha_bar(t) - s.alpha_bar(orig)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_noise_approaches_identity_as_alpha_bar_approaches_one() {
        // the t → 0 limit: ᾱ_1 = 1 − 1e-14, so x_t deviates from x_0 by
        // O(1e-7 · ε)
        let s = NoiseSchedule::from_betas(vec![1e-14]).unwrap();
        let x0 = vec![0.4, -1.2];
        let (xt, eps) = forward_noise(&x0, 1, &s, &mut rng(3)).unwrap();
        for ((a, b), e) in xt.iter().zip(&x0).zip(&eps) {
            assert!((a - b).abs() <= 1.1e-7 * e.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn forward_noise_zero_signal_is_reproducible() {
        let s = NoiseSchedule::default_train();
        let x0 = vec![0.0; 4];
        let (xt1, eps1) = forward_noise(&x0, 700, &s, &mut rng(9)).unwrap();
        let (xt2, eps2) = forward_noise(&x0, 700, &s, &mut rng(9)).unwrap();
        assert_eq!(xt1, xt2);
        assert_eq!(eps1, eps2);
        let sn = (1.0 - s.alpha_bar(700)).sqrt();
        for (x, e) in xt1.iter().zip(&eps1) {
            assert_eq!(*x, sn * e);
        }
    }

    #[test]
    fn forward_noise_variance_matches_schedule() {
        let s = NoiseSchedule::default_train();
        let t = 400;
        let x0 = vec![1.7];
        let mut r = rng(42);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let (xt, _) = forward_noise(&x0, t, &s, &mut r).unwrap();
            let d = xt[0] - s.alpha_bar(t).sqrt() * x0[0];
            sum += d;
            sumsq += d * d;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var / want - 1.0).abs() < 0.02, "var {var} vs {want}");
    }

    #[test]
    fn forward_noise_rejects_out_of_range_t() {
        let s = NoiseSchedule::default_train();
        assert!(matches!(
            forward_noise(&[0.0], 0, &s, &mut rng(0)),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
        assert!(matches!(
            forward_noise(&[0.0], 1001, &s, &mut rng(0)),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn ancestral_step_inverts_forward_at_t1() {
        let s = NoiseSchedule::default_train();
        let x0 = vec![0.3, -0.8, 2.0];
        let mut r = rng(5);
        let (x1, eps) = forward_noise(&x0, 1, &s, &mut r).unwrap();
        let state = DiffusionState { x: x1, t: 1, rng: rng(6) };
        let out = ancestral_step(state, &eps, &s).unwrap();
        assert_eq!(out.t, 0);
        for (got, want) in out.x.iter().zip(&x0) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn ancestral_step_pure_noise_injection() {
        let s = NoiseSchedule::default_train();
        let t = 500;
        let state = DiffusionState { x: vec![0.0; 3], t, rng: rng(7) };
        let out = ancestral_step(state, &[0.0; 3], &s).unwrap();
        // must equal σ_t · η with η from the same generator state
        let mut check = rng(7);
        for v in &out.x {
            let eta: f64 = check.sample(StandardNormal);
            assert_eq!(*v, s.sigma(t) * eta);
        }
    }

    #[test]
    fn ancestral_step_rejects_non_finite() {
        let s = NoiseSchedule::default_train();
        let state = DiffusionState { x: vec![0.0], t: 10, rng: rng(0) };
        assert!(matches!(
            ancestral_step(state, &[f64::NAN], &s),
            Err(DiffusionError::NonFiniteEps { t: 10 })
        ));
    }

    #[test]
    fn eps_score_round_trip_is_exact() {
        let s = NoiseSchedule::default_train();
        let score = vec![0.123456789, -2.5, 17.0];
        for t in [1, 13, 500, 1000] {
            let eps = eps_from_score(&score, &s, t);
            let back = score_from_eps(&eps, &s, t);
            for (a, b) in back.iter().zip(&score) {
                // (-c·s)/(-c) round-trips within one ulp
                assert!(crate::numeric::rel_err(*a, *b) < 1e-15, "t = {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let sched = Arc::new(NoiseSchedule::linear(100, 1e-4, 0.02).unwrap());
        let mix = GaussianMixture::new_1d(vec![0.5, 0.5], vec![-2.0, 2.0], vec![0.5, 0.5]).unwrap();
        let src = DiffusedMixtureScore::new(mix, Arc::clone(&sched), "target");
        let a = sample(&src, &sched, 1, rng(21), None).unwrap();
        let b = sample(&src, &sched, 1, rng(21), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_deterministic_sample() {
        // T = 1: x_0 = (x_1 − β/√(1−ᾱ)·ε̂)/√α with σ_1 = 0; deterministic
        // given the seed.
        let sched = Arc::new(NoiseSchedule::from_betas(vec![0.5]).unwrap());
        let src = MixtureScore::new(GaussianMixture::single(vec![0.0], 1.0).unwrap(), "n01");
        let a = sample(&src, &sched, 1, rng(33), None).unwrap();
        let b = sample(&src, &sched, 1, rng(33), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_delta_corrector_is_bit_exact_noop() {
        let sched = Arc::new(NoiseSchedule::linear(50, 1e-4, 0.05).unwrap());
        let mix = GaussianMixture::new_1d(vec![1.0], vec![0.7], vec![1.0]).unwrap();
        let src = DiffusedMixtureScore::new(mix, Arc::clone(&sched), "g");
        let plain = sample(&src, &sched, 1, rng(4), None).unwrap();
        let cfg = LangevinConfig { n_steps: 3, step: LangevinStep::Fixed(0.0) };
        let with = sample(&src, &sched, 1, rng(4), Some(&cfg)).unwrap();
        assert_eq!(plain, with);
        let cfg = LangevinConfig { n_steps: 0, step: LangevinStep::Fixed(0.1) };
        let with = sample(&src, &sched, 1, rng(4), Some(&cfg)).unwrap();
        assert_eq!(plain, with);
    }

    #[test]
    fn exact_score_single_gaussian_moments() {
        let sched = Arc::new(NoiseSchedule::default_train());
        let target_mean = 1.5;
        let target_var = 0.8;
        let mix = GaussianMixture::single(vec![target_mean], target_var).unwrap();
        let src = DiffusedMixtureScore::new(mix, Arc::clone(&sched), "g");
        // full schedule: strided steps under-disperse by O(β') per step
        let n = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let x = sample(&src, &sched, 1, rng(1000 + i), None).unwrap()[0];
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        // 3 standard errors: se(mean) = σ/√n, se(var) ≈ σ²·√(2/n)
        let se_mean = target_var.sqrt() / (n as f64).sqrt();
        let se_var = target_var * (2.0 / n as f64).sqrt();
        assert!((mean - target_mean).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - target_var).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn rollout_with_analytic_score_matches_two_mode_target() {
        use crate::quad::tv_distance;
        let sched = Arc::new(NoiseSchedule::default_train());
        let mix = GaussianMixture::new_1d(vec![0.4, 0.6], vec![-2.0, 2.0], vec![0.4, 0.4]).unwrap();
        let src = DiffusedMixtureScore::new(mix.clone(), Arc::clone(&sched), "target");
        let sub = sched.subsample(200).unwrap();
        let samples: Vec<f64> = (0..10_000)
            .map(|i| sample(&src, &sub, 1, rng(7000 + i), None).unwrap()[0])
            .collect();
        let grid = Grid::new(-8.0, 8.0, 4096).unwrap();
        let truth = GridDensity::from_log_density(grid, |x| mix.log_density(&[x]).unwrap()).unwrap();
        let tv = tv_distance(&samples, &truth, -8.0, 8.0, 80);
        assert!(tv < 0.1, "TV distance {tv}");
    }

    #[test]
    fn ensemble_drives_the_sampler() {
        // smoke: an ExpertEnsemble is itself a ScoreSource
        let sched = Arc::new(NoiseSchedule::linear(60, 1e-4, 0.02).unwrap());
        let m1 = GaussianMixture::new_1d(vec![0.5, 0.5], vec![-2.0, 2.0], vec![0.5, 0.5]).unwrap();
        let e = ExpertEnsemble::new(vec![mixture_expert(m1.clone(), m1, 1.0, "a")]).unwrap();
        let out = sample(&e, &sched, 1, rng(2), None).unwrap();
        assert!(out[0].is_finite());
    }
}
