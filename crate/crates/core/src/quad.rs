//! Deterministic 1-D grid quadrature.
//!
//! Everything the analytic mixtures claim in closed form is re-derived here
//! by brute numerical integration: normalization, moments, per-basin mass.
//! The quadrature path never calls back into the closed-form weight algebra,
//! which is what makes it usable as an independent oracle.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("grid needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("grid under-resolved: {points_per_sigma:.1} points per sigma < required {required:.1}")]
    UnderResolved { points_per_sigma: f64, required: f64 },
    #[error("density mass is not positive (sum = {0})")]
    DegenerateMass(f64),
}

/// Uniform grid on [lo, hi] with `n` points.
#[derive(Debug, Clone)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub xs: Vec<f64>,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self, QuadError> {
        if n < 2 {
            return Err(QuadError::TooFewPoints(n));
        }
        let h = (hi - lo) / (n - 1) as f64;
        let xs = (0..n).map(|i| lo + h * i as f64).collect();
        Ok(Self { lo, hi, xs })
    }

    /// Grid spanning ±`pad_sigmas`·σ beyond the extreme means.
    pub fn covering(means: &[f64], max_sigma: f64, pad_sigmas: f64, n: usize) -> Result<Self, QuadError> {
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min) - pad_sigmas * max_sigma;
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad_sigmas * max_sigma;
        Self::new(lo, hi, n)
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.xs.len() - 1) as f64
    }

    pub fn points_per_sigma(&self, sigma: f64) -> f64 {
        sigma / self.step()
    }
}

/// Trapezoid-rule integral of samples `ys` over the grid.
pub fn trapezoid(grid: &Grid, ys: &[f64]) -> f64 {
    debug_assert_eq!(grid.xs.len(), ys.len());
    let h = grid.step();
    let inner: f64 = ys[1..ys.len() - 1].iter().sum();
    h * (0.5 * (ys[0] + ys[ys.len() - 1]) + inner)
}

/// A density normalized on a grid, built from pointwise unnormalized
/// log-density values.
#[derive(Debug, Clone)]
pub struct GridDensity {
    pub grid: Grid,
    /// Normalized density values at the grid points.
    pub pdf: Vec<f64>,
    /// log of the normalizing constant of exp(log_density) on this grid.
    pub log_norm: f64,
}

impl GridDensity {
    /// Normalize exp(log_density) on the grid. Evaluation happens in log
    /// space: the maximum is subtracted before exponentiation so that
    /// mixtures with large |log p| do not underflow.
    pub fn from_log_density(grid: Grid, mut log_density: impl FnMut(f64) -> f64) -> Result<Self, QuadError> {
        let logs: Vec<f64> = grid.xs.iter().map(|&x| log_density(x)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(QuadError::DegenerateMass(0.0));
        }
        let unnorm: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
        let mass = trapezoid(&grid, &unnorm);
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(QuadError::DegenerateMass(mass));
        }
        let pdf = unnorm.iter().map(|&u| u / mass).collect();
        Ok(Self { grid, pdf, log_norm: max + mass.ln() })
    }

    pub fn total_mass(&self) -> f64 {
        trapezoid(&self.grid, &self.pdf)
    }

    pub fn mean(&self) -> f64 {
        let ys: Vec<f64> = self.grid.xs.iter().zip(&self.pdf).map(|(&x, &p)| x * p).collect();
        trapezoid(&self.grid, &ys)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let ys: Vec<f64> = self
            .grid
            .xs
            .iter()
            .zip(&self.pdf)
            .map(|(&x, &p)| (x - m) * (x - m) * p)
            .collect();
        trapezoid(&self.grid, &ys)
    }

    /// Mass in [a, b]: trapezoid over grid segments, with segments that
    /// straddle an interval end clipped by linear interpolation.
    pub fn mass_in(&self, a: f64, b: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.pdf.len() - 1 {
            let x0 = self.grid.xs[i];
            let x1 = self.grid.xs[i + 1];
            let lo = x0.max(a);
            let hi = x1.min(b);
            if hi <= lo {
                continue;
            }
            let y_lo = lerp(x0, x1, self.pdf[i], self.pdf[i + 1], lo);
            let y_hi = lerp(x0, x1, self.pdf[i], self.pdf[i + 1], hi);
            acc += 0.5 * (y_lo + y_hi) * (hi - lo);
        }
        acc
    }

    /// Per-basin masses when basins are the nearest-center cells of
    /// `centers` (boundaries at the midpoints of the sorted centers).
    pub fn basin_masses(&self, centers: &[f64]) -> Vec<f64> {
        let bounds = basin_bounds(centers, self.grid.lo, self.grid.hi);
        bounds.iter().map(|&(a, b)| self.mass_in(a, b)).collect()
    }

    /// Mean and variance of the density restricted to [a, b], renormalized.
    pub fn basin_moments(&self, a: f64, b: f64) -> (f64, f64) {
        let mass = self.mass_in(a, b);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..self.pdf.len() - 1 {
            let x0 = self.grid.xs[i];
            let x1 = self.grid.xs[i + 1];
            let lo = x0.max(a);
            let hi = x1.min(b);
            if hi <= lo {
                continue;
            }
            let y_lo = lerp(x0, x1, self.pdf[i], self.pdf[i + 1], lo);
            let y_hi = lerp(x0, x1, self.pdf[i], self.pdf[i + 1], hi);
            m1 += 0.5 * (lo * y_lo + hi * y_hi) * (hi - lo);
            m2 += 0.5 * (lo * lo * y_lo + hi * hi * y_hi) * (hi - lo);
        }
        let mean = m1 / mass;
        (mean, m2 / mass - mean * mean)
    }
}

#[inline]
fn lerp(x0: f64, x1: f64, y0: f64, y1: f64, x: f64) -> f64 {
    if x1 == x0 {
        return y0;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Basin boundaries: [lo, mid_01], [mid_01, mid_12], ..., [mid, hi] for
/// centers in the given order (centers must be sorted ascending).
pub fn basin_bounds(centers: &[f64], lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let mut bounds = Vec::with_capacity(centers.len());
    for (i, _) in centers.iter().enumerate() {
        let a = if i == 0 { lo } else { 0.5 * (centers[i - 1] + centers[i]) };
        let b = if i + 1 == centers.len() { hi } else { 0.5 * (centers[i] + centers[i + 1]) };
        bounds.push((a, b));
    }
    bounds
}

/// Total-variation distance between a sample histogram and a grid density,
/// over `bins` uniform bins on [lo, hi). Sample mass falling outside the
/// window counts fully toward the distance.
pub fn tv_distance(samples: &[f64], density: &GridDensity, lo: f64, hi: f64, bins: usize) -> f64 {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0f64; bins];
    let mut outside = 0.0;
    for &s in samples {
        if s < lo || s >= hi {
            outside += 1.0;
            continue;
        }
        let b = ((s - lo) / width) as usize;
        counts[b.min(bins - 1)] += 1.0;
    }
    let n = samples.len() as f64;
    let mut tv = outside / n;
    for (i, c) in counts.iter().enumerate() {
        let a = lo + i as f64 * width;
        let p_true = density.mass_in(a, a + width);
        tv += (c / n - p_true).abs();
    }
    0.5 * tv
}

/// Default number of grid points for the oracles.
pub const DEFAULT_GRID_POINTS: usize = 8192;
/// Default padding beyond extreme means, in units of the largest sigma.
pub const DEFAULT_PAD_SIGMAS: f64 = 10.0;
