//! Parameter storage, layers built on the autodiff graph, Adam and EMA.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Gradients, Var};

/// Named, ordered collection of parameter matrices. Ids are insertion indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: usize) -> &Array2<f64> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array2<f64> {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    /// Replaces all values; shapes must match.
    pub fn set_values(&mut self, values: Vec<Array2<f64>>) -> Result<(), String> {
        if values.len() != self.values.len() {
            return Err(format!(
                "expected {} tensors, got {}",
                self.values.len(),
                values.len()
            ));
        }
        for (i, (old, new)) in self.values.iter().zip(&values).enumerate() {
            if old.dim() != new.dim() {
                return Err(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    self.names[i],
                    new.dim(),
                    old.dim()
                ));
            }
        }
        self.values = values;
        Ok(())
    }
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    normal_matrix(rng, rows, cols, 1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    /// Xavier-uniform weights (`din x dout`), zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, din: usize, dout: usize) -> Self {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((din, dout), || rng.random_range(-bound..bound));
        Self {
            w: store.insert(format!("{name}.w"), w),
            b: store.insert(format!("{name}.b"), Array2::zeros((1, dout))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Array2::ones((1, d))),
            beta: store.insert(format!("{name}.beta"), Array2::zeros((1, d))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Result of an attention layer: the projected output and the raw attention node
/// (whose recorded probabilities can be inspected).
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub out: Var,
    pub attn: Var,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        context: Var,
        q_segs: &[usize],
        k_segs: &[usize],
    ) -> AttentionOutput {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let attn = g.attention(q, k, v, self.heads, q_segs, k_segs);
        let out = self.o.forward(g, attn);
        AttentionOutput { out, attn }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer encoder layer over row segments.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, segs: &[usize]) -> Var {
        let h = self.norm1.forward(g, x);
        let a = self.attn.forward(g, h, h, segs, segs).out;
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

/// Sinusoidal embedding of a scalar position or diffusion step.
pub fn sinusoid(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.params.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            ndarray::Zip::from(store.value_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

/// Rescales gradients so that their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads
        .params
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in grads.params.iter_mut().flatten() {
            g.mapv_inplace(|x| x * c);
        }
    }
    norm
}

/// `ema <- decay * ema + (1 - decay) * model`.
pub fn ema_update(ema: &mut ParamStore, model: &ParamStore, decay: f64) {
    for id in 0..model.len() {
        ndarray::Zip::from(ema.value_mut(id))
            .and(model.value(id))
            .for_each(|e, &m| *e = decay * *e + (1.0 - decay) * m);
    }
}
