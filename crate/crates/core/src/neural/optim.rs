//! AdamW over flattened parameter vectors, plus the canonical
//! flatten/unflatten order shared with the checkpoint format.

use super::adapter::LowRankAdapter;
use super::grad::GradStore;
use super::net::DenseNet;

/// Decoupled-weight-decay adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    /// w ← w − lr·( m̂/(√v̂ + ε) + wd·w )
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Canonical parameter order: null_context, null_pos, then per layer w, b.
pub fn net_params(net: &DenseNet) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.param_count());
    out.extend_from_slice(&net.null_context);
    out.extend_from_slice(&net.null_pos);
    for l in &net.layers {
        out.extend_from_slice(&l.w);
        out.extend_from_slice(&l.b);
    }
    out
}

pub fn set_net_params(net: &mut DenseNet, flat: &[f64]) {
    let mut off = 0;
    let mut copy = |dst: &mut [f64]| {
        let n = dst.len();
        dst.copy_from_slice(&flat[off..off + n]);
        off += n;
    };
    copy(&mut net.null_context);
    copy(&mut net.null_pos);
    for l in net.layers.iter_mut() {
        copy(&mut l.w);
        copy(&mut l.b);
    }
    debug_assert_eq!(off, flat.len());
}

pub fn net_grads_flat(grads: &GradStore) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(&grads.null_context);
    out.extend_from_slice(&grads.null_pos);
    for (w, b) in grads.layer_w.iter().zip(&grads.layer_b) {
        out.extend_from_slice(w);
        out.extend_from_slice(b);
    }
    out
}

/// Adapter order: per layer down, up.
pub fn adapter_params(adapter: &LowRankAdapter) -> Vec<f64> {
    let mut out = Vec::with_capacity(adapter.param_count());
    for l in &adapter.layers {
        out.extend_from_slice(&l.down);
        out.extend_from_slice(&l.up);
    }
    out
}

pub fn set_adapter_params(adapter: &mut LowRankAdapter, flat: &[f64]) {
    let mut off = 0;
    let mut copy = |dst: &mut [f64]| {
        let n = dst.len();
        dst.copy_from_slice(&flat[off..off + n]);
        off += n;
    };
    for l in adapter.layers.iter_mut() {
        copy(&mut l.down);
        copy(&mut l.up);
    }
    debug_assert_eq!(off, flat.len());
}

pub fn adapter_grads_flat(grads: &GradStore) -> Option<Vec<f64>> {
    let ad = grads.adapter.as_ref()?;
    let mut out = Vec::new();
    for (d, u) in ad {
        out.extend_from_slice(d);
        out.extend_from_slice(u);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::net::InputLayout;

    #[test]
    fn param_round_trip_preserves_net() {
        let net = DenseNet::init(InputLayout::new(3, 4, 2), &[8, 8], 9).unwrap();
        let flat = net_params(&net);
        assert_eq!(flat.len(), net.param_count());
        let mut copy = net.clone();
        set_net_params(&mut copy, &flat);
        assert_eq!(net, copy);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        // minimize (w - 3)² from w = 0
        let mut w = vec![0.0];
        let mut opt = AdamW::new(0.1, 0.0, 1);
        for _ in 0..500 {
            let g = vec![2.0 * (w[0] - 3.0)];
            opt.update(&mut w, &g);
        }
        assert!((w[0] - 3.0).abs() < 1e-3, "w = {}", w[0]);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut w = vec![1.0];
        let mut opt = AdamW::new(0.01, 0.5, 1);
        for _ in 0..2000 {
            opt.update(&mut w, &[0.0]);
        }
        assert!(w[0].abs() < 1e-3, "w = {}", w[0]);
    }
}
