//! Low-rank adapter deltas: one (down, up) factor pair per dense layer.

use super::net::DenseNet;
use super::NeuralError;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Per-layer factors of the weight delta scale·D·U added to the frozen
/// weight at evaluation. `down` is d_in × r (random init), `up` is
/// r × d_out (zero init, so a fresh adapter is an exact no-op).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub down: Vec<f64>,
    pub up: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub scale: f64,
    pub layers: Vec<AdapterLayer>,
}

/// Default adapter rank for memorization.
pub const DEFAULT_RANK: usize = 8;

impl LowRankAdapter {
    /// Adapter for every dense layer of `net`, down ~ N(0, 1/d_in), up = 0.
    pub fn init(net: &DenseNet, rank: usize, scale: f64, seed: u64) -> Result<Self, NeuralError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(net.layers.len());
        for (i, l) in net.layers.iter().enumerate() {
            let limit = l.d_in.min(l.d_out);
            if rank > limit {
                return Err(NeuralError::RankTooLarge { index: i, rank, limit });
            }
            let std = (1.0 / l.d_in as f64).sqrt();
            let down: Vec<f64> = (0..l.d_in * rank)
                .map(|_| {
                    let g: f64 = rng.sample(StandardNormal);
                    g * std
                })
                .collect();
            layers.push(AdapterLayer { d_in: l.d_in, d_out: l.d_out, down, up: vec![0.0; rank * l.d_out] });
        }
        Ok(Self { rank, scale, layers })
    }

    pub fn check_shape(&self, net: &DenseNet) -> Result<(), NeuralError> {
        if self.layers.len() != net.layers.len() {
            return Err(NeuralError::AdapterShape { index: self.layers.len().min(net.layers.len()) });
        }
        for (i, (a, l)) in self.layers.iter().zip(&net.layers).enumerate() {
            if a.d_in != l.d_in
                || a.d_out != l.d_out
                || a.down.len() != l.d_in * self.rank
                || a.up.len() != self.rank * l.d_out
            {
                return Err(NeuralError::AdapterShape { index: i });
            }
        }
        Ok(())
    }

    /// (down, up, scale, rank) view for one layer's affine evaluation.
    pub fn layer_view(&self, layer: usize) -> (&[f64], &[f64], f64, usize) {
        let l = &self.layers[layer];
        (&l.down, &l.up, self.scale, self.rank)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.down.len() + l.up.len()).sum()
    }

    /// The materialized delta scale·D·U for one layer (d_in × d_out,
    /// row-major by input index). Diagnostic/testing helper.
    pub fn materialize_delta(&self, layer: usize) -> Vec<f64> {
        let l = &self.layers[layer];
        let r = self.rank;
        let mut delta = vec![0.0; l.d_in * l.d_out];
        for i in 0..l.d_in {
            for k in 0..r {
                let d = l.down[i * r + k];
                if d == 0.0 {
                    continue;
                }
                let row = &l.up[k * l.d_out..(k + 1) * l.d_out];
                let out = &mut delta[i * l.d_out..(i + 1) * l.d_out];
                for (o, u) in out.iter_mut().zip(row) {
                    *o += self.scale * d * u;
                }
            }
        }
        delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::net::InputLayout;

    #[test]
    fn fresh_adapter_is_exact_noop() {
        let mut net = DenseNet::init(InputLayout::new(4, 4, 0), &[12, 12], 7).unwrap();
        // give the output layer signal so the check is not trivially 0 == 0
        for (i, w) in net.layers.last_mut().unwrap().w.iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin() * 0.1;
        }
        let adapter = LowRankAdapter::init(&net, 4, 1.0, 99).unwrap();
        let x = [0.4, -0.2, 1.1, 0.0];
        let plain = net.forward(None, &x, None, None, 14).unwrap();
        let with = net.forward(Some(&adapter), &x, None, None, 14).unwrap();
        assert_eq!(plain, with);
    }

    #[test]
    fn rank_above_layer_limit_is_rejected() {
        let net = DenseNet::init(InputLayout::new(2, 0, 0), &[4], 7).unwrap();
        // output layer is 4 -> 2, so rank 3 > min(4, 2)
        assert!(matches!(
            LowRankAdapter::init(&net, 3, 1.0, 0),
            Err(NeuralError::RankTooLarge { .. })
        ));
    }

    #[test]
    fn materialized_delta_matches_factored_evaluation() {
        let mut net = DenseNet::init(InputLayout::new(3, 0, 0), &[5], 2).unwrap();
        let mut adapter = LowRankAdapter::init(&net, 2, 0.7, 11).unwrap();
        for (i, u) in adapter.layers[0].up.iter_mut().enumerate() {
            *u = 0.1 * (i as f64 + 1.0);
        }
        // zero the net so only the adapter contributes at layer 0
        for w in net.layers[0].w.iter_mut() {
            *w = 0.0;
        }
        let x = vec![1.0, -2.0, 0.5];
        let input = net.assemble_input(&x, None, None, 3).unwrap();
        let z = net.layers[0].affine(&input, Some(adapter.layer_view(0)));
        let delta = adapter.materialize_delta(0);
        let d_out = net.layers[0].d_out;
        for j in 0..d_out {
            let want: f64 = input.iter().enumerate().map(|(i, xi)| xi * delta[i * d_out + j]).sum();
            assert!((z[j] - want).abs() < 1e-12, "{} vs {}", z[j], want);
        }
    }
}
