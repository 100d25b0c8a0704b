//! Contrastive motion-text dual encoder used to score generated motions.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{PmgError, Result};
use crate::motion::{FeatureLayout, MotionSequence};
use crate::nn::{normal_matrix, sinusoid, Adam, AdamConfig, EncoderLayer, LayerNorm, Linear, ParamStore};
use crate::normalize::Normalizer;
use crate::text::MAX_PROMPT_TOKENS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorConfig {
    /// Motion-encoder depth.
    pub l3: usize,
    pub text_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Feed only the relative feature block (absolute root channels removed).
    pub drop_absolute: bool,
    pub max_len: usize,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            l3: 4,
            text_layers: 2,
            d: 64,
            heads: 4,
            ff_mult: 2,
            embed_dim: 32,
            temperature: 0.1,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            drop_absolute: true,
            max_len: crate::motion::DEFAULT_MAX_LEN,
        }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l3 == 0 || self.text_layers == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(PmgError::Config(
                "eval.l3 and eval.text_layers must be positive and eval.d divisible by eval.heads".into(),
            ));
        }
        if !(self.temperature > 0.0) || !(self.lr > 0.0) || self.embed_dim == 0 || self.ff_mult == 0 {
            return Err(PmgError::Config("eval temperature, lr and widths must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(PmgError::Config("eval.batch_size must be at least 2 to provide negatives".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MotionClip {
    pub config: EvaluatorConfig,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub motion_in: Linear,
    pub motion_pos: usize,
    pub motion_layers: Vec<EncoderLayer>,
    pub motion_norm: LayerNorm,
    pub motion_out: Linear,
    pub token_emb: usize,
    pub text_pos: usize,
    pub text_layers: Vec<EncoderLayer>,
    pub text_norm: LayerNorm,
    pub text_out: Linear,
}

/// A trained evaluator: architecture, parameters and its own feature normalization.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub net: MotionClip,
    pub params: ParamStore,
    pub normalizer: Normalizer,
}

impl MotionClip {
    pub fn new(config: EvaluatorConfig, vocab_size: usize, layout: &FeatureLayout, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let EvaluatorConfig { d, heads, embed_dim, .. } = config;
        let hidden = d * config.ff_mult;
        let input_dim = if config.drop_absolute { layout.abs_yaw() } else { layout.dim() };
        let motion_in = Linear::new(&mut store, r, "motion.in", input_dim, d);
        let motion_pos = store.insert("motion.pos", sinusoid_rows(config.max_len, d));
        let motion_layers = (0..config.l3)
            .map(|i| EncoderLayer::new(&mut store, r, &format!("motion.layer{i}"), d, heads, hidden))
            .collect();
        let motion_norm = LayerNorm::new(&mut store, "motion.norm", d);
        let motion_out = small_head(&mut store, r, "motion.out", d, embed_dim);
        let token_emb = store.insert("text.token_emb", normal_matrix(r, vocab_size, d, 1.0));
        let text_pos = store.insert("text.pos", sinusoid_rows(MAX_PROMPT_TOKENS, d));
        let text_layers = (0..config.text_layers)
            .map(|i| EncoderLayer::new(&mut store, r, &format!("text.layer{i}"), d, heads, hidden))
            .collect();
        let text_norm = LayerNorm::new(&mut store, "text.norm", d);
        let text_out = small_head(&mut store, r, "text.out", d, embed_dim);
        Ok((
            Self {
                config,
                vocab_size,
                input_dim,
                motion_in,
                motion_pos,
                motion_layers,
                motion_norm,
                motion_out,
                token_emb,
                text_pos,
                text_layers,
                text_norm,
                text_out,
            },
            store,
        ))
    }

    fn motion_forward(&self, g: &mut Graph, frames: &[Array2<f64>]) -> Result<Var> {
        let mut pos = Vec::new();
        let mut segs = Vec::new();
        for f in frames {
            if f.nrows() == 0 || f.nrows() > self.config.max_len {
                return Err(PmgError::InvalidMotion(format!(
                    "evaluator accepts 1..={} frames, got {}",
                    self.config.max_len,
                    f.nrows()
                )));
            }
            pos.extend(0..f.nrows());
            segs.push(f.nrows());
        }
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).map_err(|e| PmgError::Shape(e.to_string()))?;
        let x = g.input(x);
        let mut h = self.motion_in.forward(g, x);
        let table = g.param(self.motion_pos);
        let pe = g.gather_rows(table, &pos);
        h = g.add(h, pe);
        for layer in &self.motion_layers {
            h = layer.forward(g, h, &segs);
        }
        let pooled = g.mean_rows(h, &segs);
        let pooled = self.motion_norm.forward(g, pooled);
        Ok(self.motion_out.forward(g, pooled))
    }

    fn text_forward(&self, g: &mut Graph, texts: &[Vec<u32>]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segs = Vec::new();
        for t in texts {
            if t.is_empty() || t.len() > MAX_PROMPT_TOKENS {
                return Err(PmgError::schema("text", "evaluator texts need 1..=32 tokens"));
            }
            for (i, &id) in t.iter().enumerate() {
                if id as usize >= self.vocab_size {
                    return Err(PmgError::TokenOutOfRange {
                        id: id as usize,
                        size: self.vocab_size,
                    });
                }
                ids.push(id as usize);
                pos.push(i);
            }
            segs.push(t.len());
        }
        let table = g.param(self.token_emb);
        let tok = g.gather_rows(table, &ids);
        let ptable = g.param(self.text_pos);
        let pe = g.gather_rows(ptable, &pos);
        let mut h = g.add(tok, pe);
        for layer in &self.text_layers {
            h = layer.forward(g, h, &segs);
        }
        let pooled = g.mean_rows(h, &segs);
        let pooled = self.text_norm.forward(g, pooled);
        Ok(self.text_out.forward(g, pooled))
    }

    /// Symmetric InfoNCE over in-batch negatives.
    pub fn contrastive_loss(&self, g: &mut Graph, frames: &[Array2<f64>], texts: &[Vec<u32>]) -> Result<Var> {
        if frames.len() != texts.len() || frames.len() < 2 {
            return Err(PmgError::InsufficientSamples("contrastive batches need at least 2 pairs".into()));
        }
        let m = self.motion_forward(g, frames)?;
        let t = self.text_forward(g, texts)?;
        let m = g.l2_normalize_rows(m);
        let t = g.l2_normalize_rows(t);
        let tt = g.transpose(t);
        let logits = g.matmul(m, tt);
        let logits = g.scale(logits, 1.0 / self.config.temperature);
        let targets: Vec<usize> = (0..frames.len()).collect();
        let l_m = g.cross_entropy(logits, &targets);
        let lt = g.transpose(logits);
        let l_t = g.cross_entropy(lt, &targets);
        let sum = g.add(l_m, l_t);
        Ok(g.scale(sum, 0.5))
    }
}

fn small_head(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Linear {
    // Near-constant initial embeddings make the initial contrastive logits uniform.
    let w = store.insert(format!("{name}.w"), normal_matrix(rng, din, dout, 1e-3));
    let b = store.insert(format!("{name}.b"), normal_matrix(rng, 1, dout, 1.0));
    Linear { w, b }
}

fn sinusoid_rows(rows: usize, d: usize) -> Array2<f64> {
    let mut t = Array2::zeros((rows, d));
    for (i, mut row) in t.rows_mut().into_iter().enumerate() {
        row.assign(&ndarray::Array1::from(sinusoid(i as f64, d)));
    }
    t
}

impl Evaluator {
    fn inputs(&self, motion: &MotionSequence) -> Array2<f64> {
        let x = self.normalizer.normalize(&motion.features);
        x.slice(s![.., ..self.net.input_dim]).to_owned()
    }

    /// Raw (unnormalized) motion embeddings, one row per motion.
    pub fn embed_motions(&self, motions: &[&MotionSequence]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((motions.len(), self.net.config.embed_dim));
        for (c, chunk) in motions.chunks(64).enumerate() {
            let frames: Vec<_> = chunk.iter().map(|m| self.inputs(m)).collect();
            let mut g = Graph::new(&self.params);
            let e = self.net.motion_forward(&mut g, &frames)?;
            out.slice_mut(s![c * 64..c * 64 + chunk.len(), ..]).assign(g.value(e));
        }
        Ok(out)
    }

    /// Raw text embeddings, one row per prompt.
    pub fn embed_texts(&self, texts: &[Vec<u32>]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((texts.len(), self.net.config.embed_dim));
        for (c, chunk) in texts.chunks(64).enumerate() {
            let mut g = Graph::new(&self.params);
            let e = self.net.text_forward(&mut g, chunk)?;
            out.slice_mut(s![c * 64..c * 64 + chunk.len(), ..]).assign(g.value(e));
        }
        Ok(out)
    }

    /// Contrastive loss of one batch under the current parameters.
    pub fn batch_loss(&self, motions: &[&MotionSequence], texts: &[Vec<u32>]) -> Result<f64> {
        let frames: Vec<_> = motions.iter().map(|m| self.inputs(m)).collect();
        let mut g = Graph::new(&self.params);
        let l = self.net.contrastive_loss(&mut g, &frames, texts)?;
        Ok(g.value(l)[[0, 0]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Trains the dual encoder on `(tokens, motion)` pairs. Pairs with empty text are
/// rejected.
pub fn train_motionclip(
    corpus: &[(Vec<u32>, &MotionSequence)],
    vocab_size: usize,
    config: EvaluatorConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EvaluatorEpoch),
) -> Result<Evaluator> {
    config.validate()?;
    if corpus.len() < 2 {
        return Err(PmgError::InsufficientSamples("evaluator training needs at least 2 pairs".into()));
    }
    let layout = corpus[0].1.layout();
    let normalizer = Normalizer::fit(corpus.iter().map(|(_, m)| *m))?;
    let (net, params) = MotionClip::new(config, vocab_size, &layout, seed)?;
    let mut ev = Evaluator { net, params, normalizer };
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &ev.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let bs = config.batch_size.min(corpus.len());
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs).filter(|c| c.len() >= 2) {
            let frames: Vec<_> = chunk.iter().map(|&i| ev.inputs(corpus[i].1)).collect();
            let texts: Vec<_> = chunk.iter().map(|&i| corpus[i].0.clone()).collect();
            let grads = {
                let mut g = Graph::new(&ev.params);
                let l = ev.net.contrastive_loss(&mut g, &frames, &texts)?;
                let loss = g.value(l)[[0, 0]];
                if !loss.is_finite() {
                    return Err(PmgError::NonFiniteLoss {
                        step: epoch as u64,
                        loss,
                    });
                }
                total += loss;
                batches += 1;
                g.backward(l)
            };
            adam.update(&mut ev.params, &grads);
        }
        on_epoch(&EvaluatorEpoch {
            epoch: epoch + 1,
            mean_loss: total / batches.max(1) as f64,
        });
    }
    Ok(ev)
}
