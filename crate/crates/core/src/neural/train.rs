//! Training and memorization loops.

use super::adapter::LowRankAdapter;
use super::grad::{diffusion_loss, BatchItem, Trainable};
use super::net::DenseNet;
use super::optim::{
    adapter_grads_flat, adapter_params, net_grads_flat, net_params, set_adapter_params, set_net_params,
    AdamW,
};
use super::NeuralError;
use crate::diffusion::NoiseSchedule;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Optimizer and schedule settings shared by pretraining and memorization
/// (memorization reuses the training learning rate and hyperparameters).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub context_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            batch_size: 16,
            total_steps: 5000,
            context_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if !(self.learning_rate >= 0.0) {
            return Err(NeuralError::BadConfig(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(NeuralError::BadConfig(format!("weight decay {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(NeuralError::BadConfig("batch size 0".into()));
        }
        if !(0.0..1.0).contains(&self.context_dropout) {
            return Err(NeuralError::BadConfig(format!("context dropout {}", self.context_dropout)));
        }
        Ok(())
    }
}

/// Source of training examples. Implementations must be deterministic
/// functions of the generator state.
pub trait TrainData: Sync {
    fn sample(&self, rng: &mut ChaCha8Rng) -> BatchItem;
}

impl<F: Fn(&mut ChaCha8Rng) -> BatchItem + Sync> TrainData for F {
    fn sample(&self, rng: &mut ChaCha8Rng) -> BatchItem {
        self(rng)
    }
}

/// Loss curve and bookkeeping from one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// (cumulative step, loss) every `log_every` steps plus the final step.
    pub losses: Vec<(u64, f64)>,
    pub steps_run: u64,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_WINDOW: usize = 100;
const LOG_EVERY: u64 = 50;

/// Train the full network in place for `cfg.total_steps` AdamW steps.
///
/// Aborts with a report when the loss stays above 10× the initial loss for
/// 100 consecutive steps. Identical (seed, config, data) reruns produce
/// bit-identical parameters.
pub fn train(
    net: &mut DenseNet,
    data: &dyn TrainData,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport, NeuralError> {
    cfg.validate()?;
    let mut params = net_params(net);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, params.len());
    let mut report = TrainReport { losses: Vec::new(), steps_run: 0 };
    let mut initial_loss = None;
    let mut high_streak = 0usize;
    for _ in 0..cfg.total_steps {
        let batch: Vec<BatchItem> = (0..cfg.batch_size).map(|_| data.sample(rng)).collect();
        let (loss, grads) =
            diffusion_loss(net, None, &batch, sched, cfg.context_dropout, rng, Trainable::Full)?;
        let initial = *initial_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            high_streak += 1;
            if high_streak >= DIVERGENCE_WINDOW {
                return Err(NeuralError::Diverged {
                    step: net.train_steps,
                    loss,
                    initial,
                    window: DIVERGENCE_WINDOW,
                });
            }
        } else {
            high_streak = 0;
        }
        opt.update(&mut params, &net_grads_flat(&grads));
        set_net_params(net, &params);
        net.train_steps += 1;
        report.steps_run += 1;
        if net.train_steps % LOG_EVERY == 0 || report.steps_run == cfg.total_steps {
            report.losses.push((net.train_steps, loss));
        }
    }
    Ok(report)
}

/// Memorization: AdamW on the adapter factors only. The network is borrowed
/// immutably, so the freeze contract is enforced by the type system; a fresh
/// optimizer state is used per call (each memorization episode starts cold).
pub fn finetune_adapter(
    net: &DenseNet,
    adapter: &mut LowRankAdapter,
    data: &dyn TrainData,
    n_steps: u64,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport, NeuralError> {
    cfg.validate()?;
    adapter.check_shape(net)?;
    let mut params = adapter_params(adapter);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, params.len());
    let mut report = TrainReport { losses: Vec::new(), steps_run: 0 };
    for step in 0..n_steps {
        let batch: Vec<BatchItem> = (0..cfg.batch_size).map(|_| data.sample(rng)).collect();
        let (loss, grads) = diffusion_loss(
            net,
            Some(adapter),
            &batch,
            sched,
            cfg.context_dropout,
            rng,
            Trainable::AdapterOnly,
        )?;
        let flat = adapter_grads_flat(&grads).expect("adapter grads present");
        opt.update(&mut params, &flat);
        set_adapter_params(adapter, &params);
        report.steps_run += 1;
        if (step + 1) % LOG_EVERY == 0 || step + 1 == n_steps {
            report.losses.push((step + 1, loss));
        }
    }
    Ok(report)
}

/// Mean diffusion loss over a fixed evaluation noise set: deterministic in
/// (net, adapter, items, seed), for before/after memorization comparisons.
pub fn eval_loss(
    net: &DenseNet,
    adapter: Option<&LowRankAdapter>,
    items: &[BatchItem],
    sched: &NoiseSchedule,
    repeats: usize,
    seed: u64,
) -> Result<f64, NeuralError> {
    use super::grad::{draw_noise, loss_with_noise};
    use rand_chacha::rand_core::SeedableRng;
    if items.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..repeats.max(1) {
        let draws = draw_noise(net, items, sched, 0.0, &mut rng);
        let (loss, _) = loss_with_noise(net, adapter, items, &draws, sched, Trainable::AdapterOnly)?;
        total += loss;
    }
    Ok(total / repeats.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GaussianMixture;
    use crate::neural::net::InputLayout;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn gmm_data(mix: GaussianMixture) -> impl TrainData {
        move |r: &mut ChaCha8Rng| {
            // sample the mixture: pick a component, then gaussian
            let u: f64 = r.gen();
            let mut acc = 0.0;
            let mut comp = 0;
            for (k, w) in mix.weights().iter().enumerate() {
                acc += w;
                if u <= acc {
                    comp = k;
                    break;
                }
                comp = k;
            }
            let g: f64 = r.sample(StandardNormal);
            let x = mix.means()[comp][0] + mix.variances()[comp].sqrt() * g;
            BatchItem { x0: vec![x], context: None, pos: None }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut net = DenseNet::init(InputLayout::new(1, 0, 0), &[16], 4).unwrap();
        let before = net.clone();
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, weight_decay: 0.0, total_steps: 20, ..Default::default() };
        let data = gmm_data(GaussianMixture::new_1d(vec![1.0], vec![0.0], vec![1.0]).unwrap());
        train(&mut net, &data, &sched, &cfg, &mut rng(1)).unwrap();
        assert_eq!(before.layers, net.layers);
        assert_eq!(before.null_context, net.null_context);
        assert_eq!(net.train_steps, 20);
    }

    #[test]
    fn same_seed_same_config_gives_identical_parameters() {
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig { total_steps: 50, batch_size: 8, ..Default::default() };
        let data = gmm_data(GaussianMixture::new_1d(vec![0.5, 0.5], vec![-2.0, 2.0], vec![0.5, 0.5]).unwrap());
        let run = || {
            let mut net = DenseNet::init(InputLayout::new(1, 0, 0), &[16], 4).unwrap();
            train(&mut net, &data, &sched, &cfg, &mut rng(9)).unwrap();
            net
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn training_reduces_loss_on_a_toy_target() {
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig { total_steps: 400, batch_size: 16, ..Default::default() };
        let data = gmm_data(GaussianMixture::new_1d(vec![1.0], vec![1.0], vec![0.25]).unwrap());
        let mut net = DenseNet::init(InputLayout::new(1, 0, 0), &[32, 32], 4).unwrap();
        let report = train(&mut net, &data, &sched, &cfg, &mut rng(2)).unwrap();
        let first = report.losses.first().unwrap().1;
        let last = report.losses.last().unwrap().1;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn zero_finetune_steps_leave_adapter_unchanged() {
        let net = DenseNet::init(InputLayout::new(1, 2, 0), &[8], 4).unwrap();
        let mut adapter = LowRankAdapter::init(&net, 1, 1.0, 5).unwrap();
        let before = adapter.clone();
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig::default();
        let data = gmm_data(GaussianMixture::new_1d(vec![1.0], vec![0.0], vec![1.0]).unwrap());
        finetune_adapter(&net, &mut adapter, &data, 0, &sched, &cfg, &mut rng(3)).unwrap();
        assert_eq!(before, adapter);
    }

    #[test]
    fn finetune_touches_only_the_adapter() {
        let mut net = DenseNet::init(InputLayout::new(1, 2, 0), &[8], 4).unwrap();
        // non-degenerate output layer so gradients flow to the adapter
        let mut r = rng(6);
        for w in net.layers.last_mut().unwrap().w.iter_mut() {
            *w = r.sample::<f64, _>(StandardNormal) * 0.1;
        }
        let frozen = net.clone();
        let mut adapter = LowRankAdapter::init(&net, 1, 1.0, 5).unwrap();
        let before = adapter.clone();
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig { batch_size: 4, ..Default::default() };
        let data = gmm_data(GaussianMixture::new_1d(vec![1.0], vec![0.5], vec![0.5]).unwrap());
        finetune_adapter(&net, &mut adapter, &data, 100, &sched, &cfg, &mut rng(3)).unwrap();
        assert_eq!(frozen, net, "frozen weights must stay byte-identical");
        assert_ne!(before, adapter, "adapter must actually move");
    }

    #[test]
    fn divergent_training_aborts_with_report() {
        // absurd learning rate on a real target diverges fast
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e6,
            total_steps: 100_000,
            batch_size: 4,
            ..Default::default()
        };
        let data = gmm_data(GaussianMixture::new_1d(vec![1.0], vec![0.0], vec![1.0]).unwrap());
        let mut net = DenseNet::init(InputLayout::new(1, 0, 0), &[16], 4).unwrap();
        let err = train(&mut net, &data, &sched, &cfg, &mut rng(2));
        assert!(
            matches!(err, Err(NeuralError::Diverged { .. }) | Err(NeuralError::NonFiniteLoss { .. })),
            "got {err:?}"
        );
    }
}
