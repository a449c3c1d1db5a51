//! Score composition over heterogeneous experts.
//!
//! Every expert is a `(conditional, baseline, α)` triple of score sources.
//! The contrastive composite score is
//!
//! ```text
//! Σ_k [ α_k · s_k(x, t) + (1 − α_k) · s̄_k(x, t) ]
//! ```
//!
//! and the naive product-of-experts composite (the ablation baseline) drops
//! the baseline terms and sums the conditional scores alone. With a single
//! expert the contrastive rule is exactly classifier-free-guidance
//! extrapolation s̄ + α·(s − s̄).

use crate::diffusion::NoiseSchedule;
use crate::gmm::GaussianMixture;
use crate::numeric::sum_exact;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("ensemble needs at least one expert")]
    Empty,
    #[error("contrast coefficient for expert '{label}' must be >= 1, got {alpha}")]
    AlphaBelowOne { label: String, alpha: f64 },
    #[error("dimension mismatch: expert '{label}' is {got}-d, ensemble is {expected}-d")]
    DimMismatch { label: String, expected: usize, got: usize },
    #[error("input is {got}-d, ensemble is {expected}-d")]
    InputDimMismatch { expected: usize, got: usize },
    #[error("non-finite score from source '{label}' at t={t}")]
    NonFinite { label: String, t: usize },
    #[error("source '{label}' exposes no log density; composition of log densities needs analytic sources")]
    NoLogDensity { label: String },
    #[error("score source '{label}' failed: {msg}")]
    Source { label: String, msg: String },
}

/// Anything that can report ∇_x log p(x_t) at a diffusion step.
///
/// `t` is the *original* (training-scale) timestep; `t = 0` addresses the
/// clean data distribution and is only meaningful for analytic sources.
pub trait ScoreSource: Send + Sync {
    fn label(&self) -> &str;
    fn dim(&self) -> usize;
    fn score(&self, x: &[f64], t: usize) -> Result<Vec<f64>, ComposeError>;
    /// Unnormalized log density, when the source has one in closed form.
    fn log_density(&self, _x: &[f64], _t: usize) -> Option<f64> {
        None
    }
}

/// Score of an analytic mixture, ignoring the diffusion step.
pub struct MixtureScore {
    mix: GaussianMixture,
    label: String,
}

impl MixtureScore {
    pub fn new(mix: GaussianMixture, label: impl Into<String>) -> Self {
        Self { mix, label: label.into() }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mix
    }
}

impl ScoreSource for MixtureScore {
    fn label(&self) -> &str {
        &self.label
    }

    fn dim(&self) -> usize {
        self.mix.dim()
    }

    fn score(&self, x: &[f64], _t: usize) -> Result<Vec<f64>, ComposeError> {
        self.mix
            .score(x)
            .map_err(|e| ComposeError::Source { label: self.label.clone(), msg: e.to_string() })
    }

    fn log_density(&self, x: &[f64], _t: usize) -> Option<f64> {
        self.mix.log_density(x).ok()
    }
}

/// Score of the forward-noised marginal of an analytic mixture: at step t
/// the target mixture is diffused in closed form (means shrink by √ᾱ_t,
/// variances blend toward 1), so ancestral sampling against this source is
/// exact reverse diffusion.
pub struct DiffusedMixtureScore {
    mix: GaussianMixture,
    sched: Arc<NoiseSchedule>,
    label: String,
}

impl DiffusedMixtureScore {
    pub fn new(mix: GaussianMixture, sched: Arc<NoiseSchedule>, label: impl Into<String>) -> Self {
        Self { mix, sched, label: label.into() }
    }

    fn at(&self, t: usize) -> GaussianMixture {
        if t == 0 {
            self.mix.clone()
        } else {
            self.mix.diffused(self.sched.alpha_bar(t))
        }
    }
}

impl ScoreSource for DiffusedMixtureScore {
    fn label(&self) -> &str {
        &self.label
    }

    fn dim(&self) -> usize {
        self.mix.dim()
    }

    fn score(&self, x: &[f64], t: usize) -> Result<Vec<f64>, ComposeError> {
        self.at(t)
            .score(x)
            .map_err(|e| ComposeError::Source { label: self.label.clone(), msg: e.to_string() })
    }

    fn log_density(&self, x: &[f64], t: usize) -> Option<f64> {
        self.at(t).log_density(x).ok()
    }
}

/// One contrastive expert: conditional score, baseline score, contrast α.
pub struct ContrastiveExpert {
    pub conditional: Arc<dyn ScoreSource>,
    pub baseline: Arc<dyn ScoreSource>,
    pub alpha: f64,
    pub label: String,
}

/// Which composition rule an ensemble applies when asked for a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionRule {
    /// α·s + (1−α)·s̄ per expert.
    Contrastive,
    /// Conditional scores only (the ablation baseline).
    Naive,
}

/// Default contrast coefficient: midpoint of the robust range [2, 3].
pub const DEFAULT_ALPHA: f64 = 2.5;

/// An ordered set of contrastive experts with a composition rule. Immutable
/// after construction; the same ensemble serves the contrastive and naive
/// ablation arms by toggling the rule.
pub struct ExpertEnsemble {
    experts: Vec<ContrastiveExpert>,
    rule: CompositionRule,
    dim: usize,
}

impl ExpertEnsemble {
    pub fn new(experts: Vec<ContrastiveExpert>) -> Result<Self, ComposeError> {
        Self::with_rule(experts, CompositionRule::Contrastive)
    }

    pub fn with_rule(experts: Vec<ContrastiveExpert>, rule: CompositionRule) -> Result<Self, ComposeError> {
        let first = experts.first().ok_or(ComposeError::Empty)?;
        let dim = first.conditional.dim();
        for e in &experts {
            if e.alpha < 1.0 {
                return Err(ComposeError::AlphaBelowOne { label: e.label.clone(), alpha: e.alpha });
            }
            for src in [&e.conditional, &e.baseline] {
                if src.dim() != dim {
                    return Err(ComposeError::DimMismatch {
                        label: src.label().to_string(),
                        expected: dim,
                        got: src.dim(),
                    });
                }
            }
        }
        Ok(Self { experts, rule, dim })
    }

    pub fn experts(&self) -> &[ContrastiveExpert] {
        &self.experts
    }

    pub fn rule(&self) -> CompositionRule {
        self.rule
    }

    /// Same experts under the other composition rule (sources shared).
    pub fn to_rule(&self, rule: CompositionRule) -> ExpertEnsemble {
        ExpertEnsemble {
            experts: self
                .experts
                .iter()
                .map(|e| ContrastiveExpert {
                    conditional: Arc::clone(&e.conditional),
                    baseline: Arc::clone(&e.baseline),
                    alpha: e.alpha,
                    label: e.label.clone(),
                })
                .collect(),
            rule: self.rule,
            dim: self.dim,
        }
        .with_rule_unchecked(rule)
    }

    fn with_rule_unchecked(mut self, rule: CompositionRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ComposeError> {
        if x.len() != self.dim {
            return Err(ComposeError::InputDimMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    fn source_score(src: &Arc<dyn ScoreSource>, x: &[f64], t: usize) -> Result<Vec<f64>, ComposeError> {
        let s = src.score(x, t)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(ComposeError::NonFinite { label: src.label().to_string(), t });
        }
        Ok(s)
    }
}

/// The contrastive composite score Σ_k [α_k s_k + (1−α_k) s̄_k].
///
/// Per-coordinate contributions are accumulated with an exact compensated
/// sum in canonical order, so the result is bit-identical under any
/// permutation of the expert list.
pub fn pocm_score(e: &ExpertEnsemble, x: &[f64], t: usize) -> Result<Vec<f64>, ComposeError> {
    e.check_input(x)?;
    // 2 terms per expert: α·s and (1−α)·s̄. The baseline evaluation is
    // skipped entirely when α == 1 (its coefficient is exactly 0).
    let mut terms: Vec<Vec<f64>> = Vec::with_capacity(2 * e.experts.len());
    for ex in &e.experts {
        let s = ExpertEnsemble::source_score(&ex.conditional, x, t)?;
        terms.push(s.iter().map(|v| ex.alpha * v).collect());
        if ex.alpha != 1.0 {
            let sb = ExpertEnsemble::source_score(&ex.baseline, x, t)?;
            terms.push(sb.iter().map(|v| (1.0 - ex.alpha) * v).collect());
        }
    }
    Ok(sum_terms(&terms, x.len()))
}

/// The naive product-of-experts composite: Σ_k s_k, conditionals only.
pub fn naive_poe_score(e: &ExpertEnsemble, x: &[f64], t: usize) -> Result<Vec<f64>, ComposeError> {
    e.check_input(x)?;
    let mut terms: Vec<Vec<f64>> = Vec::with_capacity(e.experts.len());
    for ex in &e.experts {
        terms.push(ExpertEnsemble::source_score(&ex.conditional, x, t)?);
    }
    Ok(sum_terms(&terms, x.len()))
}

fn sum_terms(terms: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let mut scratch = vec![0.0; terms.len()];
    for i in 0..dim {
        for (slot, term) in scratch.iter_mut().zip(terms) {
            *slot = term[i];
        }
        out.push(sum_exact(&mut scratch));
    }
    out
}

/// Σ_k [α_k log p_k(x) + (1−α_k) log p̄_k(x)] at the clean-data step.
///
/// Only defined when every source has an analytic log density; grid
/// normalization of its exponential is the density used for mixture plots.
pub fn pocm_logdensity_unnormalized(e: &ExpertEnsemble, x: &[f64]) -> Result<f64, ComposeError> {
    pocm_logdensity_at(e, x, 0)
}

/// Same composite log density at an arbitrary step.
pub fn pocm_logdensity_at(e: &ExpertEnsemble, x: &[f64], t: usize) -> Result<f64, ComposeError> {
    e.check_input(x)?;
    let mut terms = Vec::with_capacity(2 * e.experts.len());
    for ex in &e.experts {
        let lp = ex
            .conditional
            .log_density(x, t)
            .ok_or_else(|| ComposeError::NoLogDensity { label: ex.conditional.label().to_string() })?;
        terms.push(ex.alpha * lp);
        if ex.alpha != 1.0 {
            let lb = ex
                .baseline
                .log_density(x, t)
                .ok_or_else(|| ComposeError::NoLogDensity { label: ex.baseline.label().to_string() })?;
            terms.push((1.0 - ex.alpha) * lb);
        }
    }
    Ok(sum_exact(&mut terms))
}

/// Σ_k log p_k(x): the naive product's log density.
pub fn naive_poe_logdensity(e: &ExpertEnsemble, x: &[f64]) -> Result<f64, ComposeError> {
    e.check_input(x)?;
    let mut terms = Vec::with_capacity(e.experts.len());
    for ex in &e.experts {
        let lp = ex
            .conditional
            .log_density(x, 0)
            .ok_or_else(|| ComposeError::NoLogDensity { label: ex.conditional.label().to_string() })?;
        terms.push(lp);
    }
    Ok(sum_exact(&mut terms))
}

impl ScoreSource for ExpertEnsemble {
    fn label(&self) -> &str {
        match self.rule {
            CompositionRule::Contrastive => "pocm-ensemble",
            CompositionRule::Naive => "naive-poe-ensemble",
        }
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64], t: usize) -> Result<Vec<f64>, ComposeError> {
        match self.rule {
            CompositionRule::Contrastive => pocm_score(self, x, t),
            CompositionRule::Naive => naive_poe_score(self, x, t),
        }
    }

    fn log_density(&self, x: &[f64], t: usize) -> Option<f64> {
        match self.rule {
            CompositionRule::Contrastive => pocm_logdensity_at(self, x, t).ok(),
            CompositionRule::Naive => naive_poe_logdensity(self, x).ok(),
        }
    }
}

/// Convenience: wrap a mixture pair as a single contrastive expert.
pub fn mixture_expert(
    conditional: GaussianMixture,
    baseline: GaussianMixture,
    alpha: f64,
    label: &str,
) -> ContrastiveExpert {
    ContrastiveExpert {
        conditional: Arc::new(MixtureScore::new(conditional, format!("{label}/cond"))),
        baseline: Arc::new(MixtureScore::new(baseline, format!("{label}/base"))),
        alpha,
        label: label.to_string(),
    }
}
