//! Analytic Gaussian-mixture experts.
//!
//! A mixture here is a shared-kernel KDE: M isotropic Gaussian components
//! with weights summing to one. Two operations matter:
//!
//! - `temper` raises a single Gaussian to a power α, which *shrinks its
//!   variance* to σ²/α — the rejected way of suppressing light modes.
//! - `contrastive_reweight` combines a conditional mixture with a baseline
//!   sharing the same kernels, producing weights ∝ π_k^α · ω_k^(1−α) while
//!   leaving every kernel untouched. For well-separated kernels this is
//!   exactly what pointwise p(x)^α · p̄(x)^(1−α) normalizes to, which the
//!   quadrature oracle in [`crate::quad`] verifies.
//!
//! All densities and weight products are evaluated in log space so that
//! contrast exponents up to α = 8 stay clear of underflow.

use crate::numeric::logsumexp;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("mixture needs at least one component")]
    Empty,
    #[error("weights must be nonnegative, got {0}")]
    NegativeWeight(f64),
    #[error("weights must sum to 1 within 1e-12, got {0}")]
    WeightsNotNormalized(f64),
    #[error("variances must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("component counts differ: {weights} weights, {means} means, {variances} variances")]
    ComponentMismatch { weights: usize, means: usize, variances: usize },
    #[error("mean dimensions differ across components")]
    MeanDimMismatch,
    #[error("input dimension {got} does not match mixture dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("density underflowed at a numerically degenerate point")]
    DegeneratePoint,
    #[error("tempering is only defined for a single-component mixture, got {0} components")]
    TemperMultiComponent(usize),
    #[error("tempering exponent must be positive, got {0}")]
    TemperNonPositiveAlpha(f64),
    #[error("contrastive pair kernels differ at component {0} (means/variances must match)")]
    KernelMismatch(usize),
    #[error("contrast coefficient must be >= 1, got {0}")]
    AlphaBelowOne(f64),
    #[error("baseline weight {index} is zero; contrast with alpha > 1 divides by it")]
    ZeroBaselineWeight { index: usize },
    #[error(
        "kernels not separated: components {a} and {b} are {separation:.3} apart, need >= {required:.3}"
    )]
    NotSeparated { a: usize, b: usize, separation: f64, required: f64 },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Isotropic Gaussian mixture: component m has weight `weights[m]`, mean
/// `means[m]` (a d-vector) and variance `variances[m]` (shared across the d
/// coordinates of that component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self, GmmError> {
        if weights.is_empty() {
            return Err(GmmError::Empty);
        }
        if weights.len() != means.len() || weights.len() != variances.len() {
            return Err(GmmError::ComponentMismatch {
                weights: weights.len(),
                means: means.len(),
                variances: variances.len(),
            });
        }
        let mut sum = 0.0;
        for &w in &weights {
            if w < 0.0 || !w.is_finite() {
                return Err(GmmError::NegativeWeight(w));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(GmmError::WeightsNotNormalized(sum));
        }
        for &v in &variances {
            if !(v > 0.0) || !v.is_finite() {
                return Err(GmmError::NonPositiveVariance(v));
            }
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) {
            return Err(GmmError::MeanDimMismatch);
        }
        Ok(Self { weights, means, variances })
    }

    /// 1-D convenience constructor.
    pub fn new_1d(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self, GmmError> {
        let means = means.into_iter().map(|m| vec![m]).collect();
        Self::new(weights, means, variances)
    }

    /// Single isotropic Gaussian.
    pub fn single(mean: Vec<f64>, variance: f64) -> Result<Self, GmmError> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// 1-D means as scalars (panics on multi-d mixtures).
    pub fn means_1d(&self) -> Vec<f64> {
        assert_eq!(self.dim(), 1, "means_1d on a {}-d mixture", self.dim());
        self.means.iter().map(|m| m[0]).collect()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), GmmError> {
        if x.len() != self.dim() {
            return Err(GmmError::DimMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// Per-component log(w_m · N(x; μ_m, σ_m² I)).
    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((&w, mu), &var)| {
                let sq: f64 = x.iter().zip(mu).map(|(xi, mi)| (xi - mi) * (xi - mi)).sum();
                let log_norm = -0.5 * d * (2.0 * std::f64::consts::PI * var).ln();
                if w == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    w.ln() + log_norm - 0.5 * sq / var
                }
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64, GmmError> {
        self.check_dim(x)?;
        Ok(logsumexp(&self.component_log_terms(x)))
    }

    /// Σ_m w_m · N(x; μ_m, σ_m² I). Strictly positive for finite x, although
    /// the returned f64 may underflow to 0 far in the tails; `log_density`
    /// is the underflow-safe evaluation.
    pub fn density(&self, x: &[f64]) -> Result<f64, GmmError> {
        Ok(self.log_density(x)?.exp())
    }

    /// ∇_x log p(x): the responsibility-weighted sum of per-component
    /// Gaussian scores (μ_m − x)/σ_m².
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>, GmmError> {
        self.check_dim(x)?;
        let log_terms = self.component_log_terms(x);
        let log_total = logsumexp(&log_terms);
        if log_total == f64::NEG_INFINITY {
            return Err(GmmError::DegeneratePoint);
        }
        let mut out = vec![0.0; x.len()];
        for ((lt, mu), &var) in log_terms.iter().zip(&self.means).zip(&self.variances) {
            let resp = (lt - log_total).exp();
            if resp == 0.0 {
                continue;
            }
            for (o, (xi, mi)) in out.iter_mut().zip(x.iter().zip(mu)) {
                *o += resp * (mi - xi) / var;
            }
        }
        Ok(out)
    }

    /// Mixture of the forward-noised marginal √a·x₀ + √(1−a)·ε with
    /// x₀ drawn from this mixture and a = ᾱ_t: component means scale by √a
    /// and variances become a·σ² + (1−a).
    pub fn diffused(&self, alpha_bar: f64) -> GaussianMixture {
        let sqrt_a = alpha_bar.sqrt();
        GaussianMixture {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|v| sqrt_a * v).collect())
                .collect(),
            variances: self.variances.iter().map(|v| alpha_bar * v + (1.0 - alpha_bar)).collect(),
        }
    }

    /// Smallest pairwise separation between component means divided by the
    /// largest component sigma.
    pub fn min_separation_in_sigmas(&self) -> f64 {
        let max_sigma = self.variances.iter().map(|v| v.sqrt()).fold(0.0f64, f64::max);
        let mut min_sep = f64::INFINITY;
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                let sq: f64 = self.means[i]
                    .iter()
                    .zip(&self.means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                min_sep = min_sep.min(sq.sqrt());
            }
        }
        min_sep / max_sigma
    }
}

/// Raise a single Gaussian to the power α and renormalize: the mean stays,
/// the variance shrinks to σ²/α. This is the operation contrastive
/// reweighting is contrasted against — it changes local geometry.
pub fn temper(mix: &GaussianMixture, alpha: f64) -> Result<GaussianMixture, GmmError> {
    if mix.num_components() != 1 {
        return Err(GmmError::TemperMultiComponent(mix.num_components()));
    }
    if !(alpha > 0.0) {
        return Err(GmmError::TemperNonPositiveAlpha(alpha));
    }
    if alpha == 1.0 {
        return Ok(mix.clone());
    }
    GaussianMixture::new(vec![1.0], vec![mix.means[0].clone()], vec![mix.variances[0] / alpha])
}

/// A conditional mixture paired with a baseline that shares its kernels.
#[derive(Debug, Clone)]
pub struct ContrastivePair {
    conditional: GaussianMixture,
    baseline: GaussianMixture,
    alpha: f64,
    /// Required mean separation in units of the largest sigma before the
    /// kernels count as effectively disjoint.
    separation_sigmas: f64,
}

/// Default "effectively disjoint" threshold: 8σ keeps pairwise overlap mass
/// below 1e-14.
pub const DEFAULT_SEPARATION_SIGMAS: f64 = 8.0;

impl ContrastivePair {
    pub fn new(conditional: GaussianMixture, baseline: GaussianMixture, alpha: f64) -> Result<Self, GmmError> {
        Self::with_separation(conditional, baseline, alpha, DEFAULT_SEPARATION_SIGMAS)
    }

    pub fn with_separation(
        conditional: GaussianMixture,
        baseline: GaussianMixture,
        alpha: f64,
        separation_sigmas: f64,
    ) -> Result<Self, GmmError> {
        if alpha < 1.0 {
            return Err(GmmError::AlphaBelowOne(alpha));
        }
        if conditional.num_components() != baseline.num_components() {
            return Err(GmmError::ComponentMismatch {
                weights: conditional.num_components(),
                means: baseline.num_components(),
                variances: baseline.num_components(),
            });
        }
        for k in 0..conditional.num_components() {
            if conditional.means[k] != baseline.means[k] || conditional.variances[k] != baseline.variances[k] {
                return Err(GmmError::KernelMismatch(k));
            }
        }
        Ok(Self { conditional, baseline, alpha, separation_sigmas })
    }

    pub fn conditional(&self) -> &GaussianMixture {
        &self.conditional
    }

    pub fn baseline(&self) -> &GaussianMixture {
        &self.baseline
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn check_separation(&self) -> Result<(), GmmError> {
        let max_sigma = self.conditional.variances.iter().map(|v| v.sqrt()).fold(0.0f64, f64::max);
        let required = self.separation_sigmas * max_sigma;
        let means = &self.conditional.means;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let sq: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                let sep = sq.sqrt();
                if sep < required {
                    return Err(GmmError::NotSeparated { a: i, b: j, separation: sep, required });
                }
            }
        }
        Ok(())
    }
}

/// Kernel-preserving contrastive reweighting.
///
/// For effectively disjoint shared kernels, pointwise p(x)^α · p̄(x)^(1−α)
/// normalizes to the same kernels with weights ∝ π_k^α · ω_k^(1−α). Kernels
/// are copied bit-exactly; only weights change. Computed in log space and
/// renormalized there.
pub fn contrastive_reweight(pair: &ContrastivePair) -> Result<GaussianMixture, GmmError> {
    pair.check_separation()?;
    let alpha = pair.alpha;
    if alpha == 1.0 {
        // Exact identity: weights are the conditional's, untouched.
        return Ok(pair.conditional.clone());
    }
    let mut log_w = Vec::with_capacity(pair.conditional.num_components());
    for (k, (&pi, &om)) in pair.conditional.weights.iter().zip(&pair.baseline.weights).enumerate() {
        if om == 0.0 {
            return Err(GmmError::ZeroBaselineWeight { index: k });
        }
        let lw = if pi == 0.0 { f64::NEG_INFINITY } else { alpha * pi.ln() + (1.0 - alpha) * om.ln() };
        log_w.push(lw);
    }
    let log_norm = logsumexp(&log_w);
    if log_norm == f64::NEG_INFINITY {
        return Err(GmmError::DegeneratePoint);
    }
    let mut weights: Vec<f64> = log_w.iter().map(|&lw| (lw - log_norm).exp()).collect();
    // Guard the 1e-12 normalization invariant against rounding drift.
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    GaussianMixture::new(weights, pair.conditional.means.clone(), pair.conditional.variances.clone())
}

/// Contrast ratios ρ_k = π_k / ω_k. Reweighted weights satisfy
/// π̃_k / ω_k ∝ ρ_k^α, so modes with ρ > 1 amplify and ρ < 1 suppress.
pub fn contrast_ratio(pair: &ContrastivePair) -> Result<Vec<f64>, GmmError> {
    pair.conditional
        .weights
        .iter()
        .zip(&pair.baseline.weights)
        .enumerate()
        .map(|(k, (&pi, &om))| {
            if om == 0.0 {
                Err(GmmError::ZeroBaselineWeight { index: k })
            } else {
                Ok(pi / om)
            }
        })
        .collect()
}

/// Plain-text serialization: a header line, then one `weight mean... variance`
/// line per component.
pub fn to_text(mix: &GaussianMixture) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# mixture dim={} components={}", mix.dim(), mix.num_components());
    for k in 0..mix.num_components() {
        let mean = mix.means[k]
            .iter()
            .map(|m| format!("{m:?}"))
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "weight={:?} mean={} var={:?}", mix.weights[k], mean, mix.variances[k]);
    }
    out
}

pub fn from_text(text: &str) -> Result<GaussianMixture, GmmError> {
    let mut weights = Vec::new();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut weight = None;
        let mut mean = None;
        let mut var = None;
        for field in line.split_whitespace() {
            let (key, val) = field.split_once('=').ok_or_else(|| GmmError::Parse {
                line: idx + 1,
                msg: format!("expected key=value, got '{field}'"),
            })?;
            match key {
                "weight" => weight = Some(parse_f64(val, idx)?),
                "var" => var = Some(parse_f64(val, idx)?),
                "mean" => {
                    let parsed: Result<Vec<f64>, _> = val.split(',').map(|v| parse_f64(v, idx)).collect();
                    mean = Some(parsed?);
                }
                other => {
                    return Err(GmmError::Parse { line: idx + 1, msg: format!("unknown key '{other}'") })
                }
            }
        }
        match (weight, mean, var) {
            (Some(w), Some(m), Some(v)) => {
                weights.push(w);
                means.push(m);
                vars.push(v);
            }
            _ => {
                return Err(GmmError::Parse {
                    line: idx + 1,
                    msg: "component line needs weight=, mean=, var=".to_string(),
                })
            }
        }
    }
    GaussianMixture::new(weights, means, vars)
}

fn parse_f64(s: &str, line: usize) -> Result<f64, GmmError> {
    s.parse::<f64>()
        .map_err(|e| GmmError::Parse { line: line + 1, msg: format!("bad float '{s}': {e}") })
}
