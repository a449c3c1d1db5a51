//! Desk-scale laboratory for composing heterogeneous memory experts in
//! diffusion models through contrastive products of score functions.
//!
//! The crate is organized around the sampling-time composition rule
//!
//! ```text
//! score(x, t) = Σ_k [ α_k · s_k(x, t) + (1 − α_k) · s̄_k(x, t) ]
//! ```
//!
//! where each expert contributes a conditional score `s_k` and an
//! unconditional baseline `s̄_k`. Modules:
//!
//! - [`gmm`] — analytic Gaussian-mixture experts, contrastive reweighting,
//!   and tempering (the closed-form theory side).
//! - [`quad`] — deterministic grid quadrature used as the numerical oracle
//!   for everything the mixtures claim in closed form.
//! - [`compose`] — generic score composition over arbitrary score sources.
//! - [`diffusion`] — noise schedules, the forward process, the ancestral
//!   sampler, and an optional Langevin corrector.
//! - [`neural`] — small dense ε-prediction networks with a self-contained
//!   reverse-mode gradient engine, AdamW, and low-rank adapters.
//! - [`cards`] — the Memory-Cards gridworld, dataset generation, and the
//!   structured frame encoding.
//! - [`memory`] — memory bank, expert roles, and the streaming / recall
//!   protocols.
//! - [`eval`] — metrics, the toy mixture experiment, and ablation harnesses.
//! - [`config`] / [`cli`] — reproducible experiment runs.

pub mod cards;
pub mod cli;
pub mod compose;
pub mod config;
pub mod diffusion;
pub mod eval;
pub mod gmm;
pub mod memory;
pub mod neural;
pub mod numeric;
pub mod quad;
pub mod seeds;
