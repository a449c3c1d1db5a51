//! Shared numeric helpers: log-sum-exp, exact summation, small vector ops.

/// log(Σ exp(v_i)) evaluated stably. Returns −∞ for an empty slice or when
/// every entry is −∞.
pub fn logsumexp(vals: &[f64]) -> f64 {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max; // all -inf (or empty, or a NaN/inf which propagates below)
    }
    let sum: f64 = vals.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Error-free expansion accumulator (Shewchuk-style grow-expansion).
///
/// The running sum is kept as a list of non-overlapping doubles whose exact
/// sum equals the exact sum of everything added so far, so no cancellation
/// error accumulates. Callers that need bit-identical results under input
/// permutation should feed terms in a canonical order (see [`sum_exact`]).
#[derive(Debug, Clone, Default)]
pub struct ExpansionSum {
    parts: Vec<f64>,
}

impl ExpansionSum {
    pub fn new() -> Self {
        Self { parts: Vec::new() }
    }

    pub fn add(&mut self, value: f64) {
        let mut x = value;
        let mut out = 0;
        for i in 0..self.parts.len() {
            let y = self.parts[i];
            let (hi, lo) = two_sum(x, y);
            if lo != 0.0 {
                self.parts[out] = lo;
                out += 1;
            }
            x = hi;
        }
        self.parts.truncate(out);
        if x != 0.0 || self.parts.is_empty() {
            self.parts.push(x);
        }
    }

    /// Correctly rounded value of the exact sum.
    pub fn value(&self) -> f64 {
        // Parts are ordered with increasing magnitude; summing smallest first
        // reproduces the correctly rounded total.
        self.parts.iter().sum()
    }
}

/// Exact sum of a small set of terms, independent of input order.
///
/// Terms are brought into a canonical order first, then accumulated with the
/// error-free expansion, so permuting the input can never change the result
/// bit pattern.
pub fn sum_exact(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    let mut acc = ExpansionSum::new();
    for &t in terms.iter() {
        acc.add(t);
    }
    acc.value()
}

/// Knuth two-sum: a + b = hi + lo exactly.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let hi = a + b;
    let a_virt = hi - b;
    let b_virt = hi - a_virt;
    let lo = (a - a_virt) + (b - b_virt);
    (hi, lo)
}

/// Σ (a_i − b_i)²
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative error of `got` against `want`, guarded for tiny references.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_naive_on_moderate_values() {
        let v = [0.3f64, -1.2, 2.0, 0.0];
        let naive: f64 = v.iter().map(|x| f64::exp(*x)).sum::<f64>().ln();
        assert!((logsumexp(&v) - naive).abs() < 1e-14);
    }

    #[test]
    fn logsumexp_survives_large_magnitudes() {
        let v = [-1100.0, -1100.5];
        let got = logsumexp(&v);
        let want = -1100.0 + (1.0 + (-0.5f64).exp()).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_all_neg_inf_is_neg_inf() {
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn expansion_sum_is_order_independent() {
        let terms = [1e16, 1.0, -1e16, 3.125e-3, 0.4, -7.25, 1e8, -1e8];
        let mut fwd = ExpansionSum::new();
        for &t in &terms {
            fwd.add(t);
        }
        let mut rev = ExpansionSum::new();
        for &t in terms.iter().rev() {
            rev.add(t);
        }
        assert_eq!(fwd.value().to_bits(), rev.value().to_bits());
        // Exact: the cancellations leave 1.0 + 3.125e-3 + 0.4 - 7.25
        assert_eq!(fwd.value(), 1.0 + 3.125e-3 + 0.4 - 7.25);
    }
}
