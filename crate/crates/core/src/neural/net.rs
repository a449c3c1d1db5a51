//! Network definition and the plain (uncached) forward pass.

use super::adapter::LowRankAdapter;
use super::NeuralError;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Sinusoidal timestep features appended to every input.
pub const TIME_EMBED_DIM: usize = 16;

/// Block structure of the network input: the noisy target, an optional
/// context block, the timestep embedding, and an optional position block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InputLayout {
    pub target_dim: usize,
    pub context_dim: usize,
    pub time_dim: usize,
    pub pos_dim: usize,
}

impl InputLayout {
    pub fn new(target_dim: usize, context_dim: usize, pos_dim: usize) -> Self {
        Self { target_dim, context_dim, time_dim: TIME_EMBED_DIM, pos_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.target_dim + self.context_dim + self.time_dim + self.pos_dim
    }

    /// Offset of the context block in the assembled input.
    pub fn context_offset(&self) -> usize {
        self.target_dim
    }

    /// Offset of the position block in the assembled input.
    pub fn pos_offset(&self) -> usize {
        self.target_dim + self.context_dim + self.time_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z * sigmoid(z),
            Activation::Linear => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Linear => 1.0,
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One dense layer: y_j = Σ_i x_i · w[i·d_out + j] + b_j, then activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major by input index: row i is contiguous over outputs.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl DenseLayer {
    /// z = xᵀW + b, optionally with the adapter delta scale·(xᵀD)U added.
    pub fn affine(&self, x: &[f64], adapter: Option<(&[f64], &[f64], f64, usize)>) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.d_in);
        let mut z = self.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w[i * self.d_out..(i + 1) * self.d_out];
            for (zj, wj) in z.iter_mut().zip(row) {
                *zj += xi * wj;
            }
        }
        if let Some((down, up, scale, rank)) = adapter {
            let mut h = vec![0.0; rank];
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &down[i * rank..(i + 1) * rank];
                for (hk, dk) in h.iter_mut().zip(row) {
                    *hk += xi * dk;
                }
            }
            for (k, &hk) in h.iter().enumerate() {
                if hk == 0.0 {
                    continue;
                }
                let row = &up[k * self.d_out..(k + 1) * self.d_out];
                let c = scale * hk;
                for (zj, uj) in z.iter_mut().zip(row) {
                    *zj += c * uj;
                }
            }
        }
        z
    }
}

/// Small dense ε-prediction network.
///
/// The input is `[x_t | context-or-null | time(t) | pos-or-null]`; absent
/// context and position fall back to learned null embeddings, which is how
/// the unconditional baseline of each expert is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layout: InputLayout,
    pub layers: Vec<DenseLayer>,
    /// Learned embedding substituted for a dropped/absent context.
    pub null_context: Vec<f64>,
    /// Learned embedding substituted for a dropped/absent position.
    pub null_pos: Vec<f64>,
    /// Cumulative optimizer steps applied (resume bookkeeping).
    pub train_steps: u64,
}

impl DenseNet {
    /// He-style init for hidden layers; the output layer starts at zero so an
    /// untrained net predicts ε̂ = 0.
    pub fn init(layout: InputLayout, hidden: &[usize], seed: u64) -> Result<Self, NeuralError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![layout.input_dim()];
        dims.extend_from_slice(hidden);
        dims.push(layout.target_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for li in 0..dims.len() - 1 {
            let (d_in, d_out) = (dims[li], dims[li + 1]);
            let last = li == dims.len() - 2;
            let std = (2.0 / d_in as f64).sqrt();
            let w = if last {
                vec![0.0; d_in * d_out]
            } else {
                (0..d_in * d_out)
                    .map(|_| {
                        let g: f64 = rng.sample(StandardNormal);
                        g * std
                    })
                    .collect()
            };
            layers.push(DenseLayer {
                d_in,
                d_out,
                w,
                b: vec![0.0; d_out],
                act: if last { Activation::Linear } else { Activation::Silu },
            });
        }
        let net = Self {
            layout,
            layers,
            null_context: vec![0.0; layout.context_dim],
            null_pos: vec![0.0; layout.pos_dim],
            train_steps: 0,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let mut prev = self.layout.input_dim();
        for (i, l) in self.layers.iter().enumerate() {
            if l.d_in != prev {
                return Err(NeuralError::LayerChain { index: i, prev, got: l.d_in });
            }
            if l.w.len() != l.d_in * l.d_out || l.b.len() != l.d_out {
                return Err(NeuralError::Layout(format!("layer {i} weight/bias size")));
            }
            prev = l.d_out;
        }
        if prev != self.layout.target_dim {
            return Err(NeuralError::Layout(format!(
                "output dim {prev} != target dim {}",
                self.layout.target_dim
            )));
        }
        if self.null_context.len() != self.layout.context_dim || self.null_pos.len() != self.layout.pos_dim {
            return Err(NeuralError::Layout("null embedding size".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>()
            + self.null_context.len()
            + self.null_pos.len()
    }

    /// Assemble `[x_t | context | time | pos]`, substituting null embeddings
    /// where conditioning is absent.
    pub fn assemble_input(
        &self,
        xt: &[f64],
        context: Option<&[f64]>,
        pos: Option<&[f64]>,
        t: usize,
    ) -> Result<Vec<f64>, NeuralError> {
        let lay = &self.layout;
        if xt.len() != lay.target_dim {
            return Err(NeuralError::Layout(format!(
                "target block is {} wide, got {}",
                lay.target_dim,
                xt.len()
            )));
        }
        if let Some(c) = context {
            if c.len() != lay.context_dim {
                return Err(NeuralError::Layout(format!(
                    "context block is {} wide, got {}",
                    lay.context_dim,
                    c.len()
                )));
            }
        }
        if let Some(p) = pos {
            if p.len() != lay.pos_dim {
                return Err(NeuralError::Layout(format!(
                    "position block is {} wide, got {}",
                    lay.pos_dim,
                    p.len()
                )));
            }
        }
        let mut input = Vec::with_capacity(lay.input_dim());
        input.extend_from_slice(xt);
        input.extend_from_slice(context.unwrap_or(&self.null_context));
        input.extend_from_slice(&time_embedding(t, lay.time_dim));
        input.extend_from_slice(pos.unwrap_or(&self.null_pos));
        Ok(input)
    }

    /// ε prediction. With an adapter every layer evaluates W + scale·D·U in
    /// factored form; a freshly created adapter (up = 0) leaves the output
    /// bit-identical to the adapter-free pass.
    pub fn forward(
        &self,
        adapter: Option<&LowRankAdapter>,
        xt: &[f64],
        context: Option<&[f64]>,
        pos: Option<&[f64]>,
        t: usize,
    ) -> Result<Vec<f64>, NeuralError> {
        if let Some(a) = adapter {
            a.check_shape(self)?;
        }
        let mut x = self.assemble_input(xt, context, pos, t)?;
        for (li, layer) in self.layers.iter().enumerate() {
            let ad = adapter.map(|a| a.layer_view(li));
            let z = layer.affine(&x, ad);
            x = z.into_iter().map(|v| layer.act.apply(v)).collect();
        }
        Ok(x)
    }
}

/// Sinusoidal features of the (integer) timestep: interleaved sin/cos at
/// geometrically spaced frequencies.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        e.push(arg.sin());
        e.push(arg.cos());
    }
    while e.len() < dim {
        e.push(0.0);
    }
    e
}
