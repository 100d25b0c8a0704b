//! The text-frame guided noise predictor.
//!
//! Layout of one forward pass for a batch of stage inputs:
//! text tokens go through a small transformer encoder (or become the learned null
//! row), obtained and generating frames are embedded as `proj(frame) + pos(position)`,
//! the frame-aware semantics decoder refines the text tokens against the obtained
//! frames, and the guided blocks denoise the generating tokens.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{PmgError, Result};
use crate::nn::{
    normal_matrix, sinusoid, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    ParamStore,
};
use crate::text::MAX_PROMPT_TOKENS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub d: usize,
    /// Frame-aware semantics decoder depth.
    pub l1: usize,
    /// Number of text-frame guided blocks.
    pub l2: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ff_mult: usize,
    pub text_layers: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub dropout: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d: 128,
            l1: 4,
            l2: 4,
            heads: 4,
            ff_mult: 2,
            text_layers: 2,
            max_len: crate::motion::DEFAULT_MAX_LEN,
            vocab_size: crate::corpus::corpus_vocabulary().len(),
            feature_dim: crate::motion::FeatureLayout::new(6).dim(),
            dropout: 0.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(PmgError::Config("generator.d must be divisible by generator.heads".into()));
        }
        if self.l1 == 0 || self.l2 == 0 || self.text_layers == 0 {
            return Err(PmgError::Config("generator depths must be at least 1".into()));
        }
        if self.ff_mult == 0 || self.max_len == 0 || self.vocab_size == 0 || self.feature_dim == 0 {
            return Err(PmgError::Config("generator sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PmgError::Config("generator.dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Parameter handles of one decoder block of the semantics decoder.
#[derive(Debug, Clone, Copy)]
pub struct FsdBlock {
    pub norm_sa: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_ca: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct TgbBlock {
    pub self_attn: MultiHeadAttention,
    pub frame_attn: MultiHeadAttention,
    pub fusion: Fusion,
    pub norm_fused: LayerNorm,
    pub norm_text: LayerNorm,
    pub text_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ffn: FeedForward,
}

/// Architecture: parameter ids into a [`ParamStore`] built by [`Generator::new`].
/// Any store with the same layout (the EMA copy, a loaded checkpoint) can be used.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub token_emb: usize,
    pub text_pos: usize,
    pub text_encoder: Vec<EncoderLayer>,
    pub text_norm: LayerNorm,
    pub null_text: usize,
    pub frame_proj: Linear,
    pub frame_pos: usize,
    pub frame_flag: usize,
    pub placeholder: usize,
    pub time_proj: Linear,
    pub fsd: Vec<FsdBlock>,
    pub fsd_norm: LayerNorm,
    pub tgb: Vec<TgbBlock>,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
}

/// Index into the frame flag table.
const FLAG_GIVEN: usize = 0;
const FLAG_GENERATED: usize = 1;

/// Inputs for predicting the noise of one stage of one motion.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInput {
    /// Noisy generating frames, `|P^k| x d_m`, normalized feature space.
    pub x_t: Array2<f64>,
    /// 1-based positions of the generating frames.
    pub positions: Vec<usize>,
    pub t: usize,
    /// Token ids; empty means the null condition.
    pub text: Vec<u32>,
    /// Obtained frames (given plus earlier stages), normalized; may have zero rows.
    pub obtained: Array2<f64>,
    pub obtained_positions: Vec<usize>,
    /// Whether each obtained frame is a user-given (partial) frame.
    pub obtained_given: Vec<bool>,
}

/// Nodes produced by a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Var,
    /// Rows per sample of `eps`.
    pub segments: Vec<usize>,
    /// Cross-attention node of the last semantics-decoder block.
    pub fsd_cross_attention: Var,
    pub text_segments: Vec<usize>,
    pub obtained_segments: Vec<usize>,
}

/// Dropout state; inference passes `None`.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Generator {
    /// Builds the architecture and deterministic initial parameters.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let GeneratorConfig { d, heads, .. } = config;
        let hidden = d * config.ff_mult;
        let r = &mut rng;

        let token_emb = store.insert("text.token_emb", normal_matrix(r, config.vocab_size, d, 1.0));
        let text_pos = store.insert("text.pos", sinusoid_table(MAX_PROMPT_TOKENS, d));
        let text_encoder = (0..config.text_layers)
            .map(|i| EncoderLayer::new(&mut store, r, &format!("text.layer{i}"), d, heads, hidden))
            .collect();
        let text_norm = LayerNorm::new(&mut store, "text.norm", d);
        let null_text = store.insert("text.null", normal_matrix(r, 1, d, 1.0));

        let frame_proj = Linear::new(&mut store, r, "embed.proj", config.feature_dim, d);
        let frame_pos = store.insert("embed.pos", sinusoid_table(config.max_len + 1, d));
        let frame_flag = store.insert("embed.flag", normal_matrix(r, 2, d, 0.1));
        let placeholder = store.insert("embed.placeholder", normal_matrix(r, 1, d, 0.1));
        let time_proj = Linear::new(&mut store, r, "embed.time", d, d);

        let fsd = (0..config.l1)
            .map(|i| {
                let n = format!("fsd.block{i}");
                FsdBlock {
                    norm_sa: LayerNorm::new(&mut store, &format!("{n}.norm_sa"), d),
                    self_attn: MultiHeadAttention::new(&mut store, r, &format!("{n}.sa"), d, heads),
                    norm_ca: LayerNorm::new(&mut store, &format!("{n}.norm_ca"), d),
                    cross_attn: MultiHeadAttention::new(&mut store, r, &format!("{n}.ca"), d, heads),
                    norm_ff: LayerNorm::new(&mut store, &format!("{n}.norm_ff"), d),
                    ffn: FeedForward::new(&mut store, r, &format!("{n}.ffn"), d, hidden),
                }
            })
            .collect();
        let fsd_norm = LayerNorm::new(&mut store, "fsd.norm", d);

        let tgb = (0..config.l2)
            .map(|i| {
                let n = format!("tgb.block{i}");
                TgbBlock {
                    self_attn: MultiHeadAttention::new(&mut store, r, &format!("{n}.sa"), d, heads),
                    frame_attn: MultiHeadAttention::new(&mut store, r, &format!("{n}.ca_frames"), d, heads),
                    fusion: Fusion {
                        fc1: Linear::new(&mut store, r, &format!("{n}.fusion.fc1"), 2 * d, d),
                        fc2: Linear::new(&mut store, r, &format!("{n}.fusion.fc2"), d, d),
                    },
                    norm_fused: LayerNorm::new(&mut store, &format!("{n}.norm_fused"), d),
                    norm_text: LayerNorm::new(&mut store, &format!("{n}.norm_text"), d),
                    text_attn: MultiHeadAttention::new(&mut store, r, &format!("{n}.ca_text"), d, heads),
                    norm_ff: LayerNorm::new(&mut store, &format!("{n}.norm_ff"), d),
                    ffn: FeedForward::new(&mut store, r, &format!("{n}.ffn"), d, hidden),
                }
            })
            .collect();
        let out_norm = LayerNorm::new(&mut store, "out.norm", d);
        let out_proj = Linear::new(&mut store, r, "out.proj", d, config.feature_dim);

        Ok((
            Self {
                config,
                token_emb,
                text_pos,
                text_encoder,
                text_norm,
                null_text,
                frame_proj,
                frame_pos,
                frame_flag,
                placeholder,
                time_proj,
                fsd,
                fsd_norm,
                tgb,
                out_norm,
                out_proj,
            },
            store,
        ))
    }

    /// Encodes a batch of prompts. Empty prompts become the single learned null row.
    /// Returns stacked token features and the row count of each prompt.
    pub fn encode_text(&self, g: &mut Graph, prompts: &[&[u32]], drop: &mut Option<Dropout>) -> Result<(Var, Vec<usize>)> {
        let vocab = self.config.vocab_size;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segs = Vec::new();
        for p in prompts.iter().filter(|p| !p.is_empty()) {
            if p.len() > MAX_PROMPT_TOKENS {
                return Err(PmgError::PromptTooLong(p.len()));
            }
            for (i, &id) in p.iter().enumerate() {
                if id as usize >= vocab {
                    return Err(PmgError::TokenOutOfRange { id: id as usize, size: vocab });
                }
                ids.push(id as usize);
                pos.push(i);
            }
            segs.push(p.len());
        }
        let null = g.param(self.null_text);
        let encoded = if segs.is_empty() {
            None
        } else {
            let table = g.param(self.token_emb);
            let tok = g.gather_rows(table, &ids);
            let pos_table = g.param(self.text_pos);
            let pe = g.gather_rows(pos_table, &pos);
            let mut x = g.add(tok, pe);
            for layer in &self.text_encoder {
                x = encoder_layer(g, layer, x, &segs, drop);
            }
            Some(self.text_norm.forward(g, x))
        };
        // Reassemble in prompt order: encoded rows first, then the null row.
        let n_enc = ids.len();
        let mut order = Vec::new();
        let mut out_segs = Vec::with_capacity(prompts.len());
        let mut r0 = 0;
        for p in prompts {
            if p.is_empty() {
                order.push(n_enc);
                out_segs.push(1);
            } else {
                order.extend(r0..r0 + p.len());
                r0 += p.len();
                out_segs.push(p.len());
            }
        }
        let all = match encoded {
            Some(e) => g.concat_rows(&[e, null]),
            None => null,
        };
        Ok((g.gather_rows(all, &order), out_segs))
    }

    /// `proj(frame) + pos(position)`, plus the given/generated flag row for obtained
    /// frames (`flags = Some`) or the projected timestep embedding for generating
    /// frames (`t = Some`).
    pub fn embed_frames(
        &self,
        g: &mut Graph,
        frames: &Array2<f64>,
        positions: &[usize],
        flags: Option<&[bool]>,
        t: Option<&[usize]>,
    ) -> Result<Var> {
        if frames.nrows() != positions.len() || frames.ncols() != self.config.feature_dim {
            return Err(PmgError::Shape(format!(
                "frames {:?} with {} positions, feature width {}",
                frames.dim(),
                positions.len(),
                self.config.feature_dim
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p == 0 || p > self.config.max_len) {
            return Err(PmgError::InvalidPosition {
                position: p,
                len: self.config.max_len,
            });
        }
        let x = g.input(frames.clone());
        let mut z = self.frame_proj.forward(g, x);
        let pos_table = g.param(self.frame_pos);
        let pe = g.gather_rows(pos_table, positions);
        z = g.add(z, pe);
        if let Some(flags) = flags {
            let table = g.param(self.frame_flag);
            let idx: Vec<usize> = flags
                .iter()
                .map(|&f| if f { FLAG_GIVEN } else { FLAG_GENERATED })
                .collect();
            let fe = g.gather_rows(table, &idx);
            z = g.add(z, fe);
        }
        if let Some(ts) = t {
            let d = self.config.d;
            let mut emb = Array2::zeros((ts.len(), d));
            for (mut row, &t) in emb.rows_mut().into_iter().zip(ts) {
                row.assign(&ndarray::Array1::from(sinusoid(t as f64, d)));
            }
            let e = g.input(emb);
            let te = self.time_proj.forward(g, e);
            z = g.add(z, te);
        }
        Ok(z)
    }

    /// Frame-aware semantics: text tokens attend to themselves and to the obtained
    /// frame tokens. Returns the refined tokens and the cross-attention node of the
    /// last block.
    pub fn frame_aware_semantics(
        &self,
        g: &mut Graph,
        text: Var,
        text_segs: &[usize],
        obtained: Var,
        obtained_segs: &[usize],
        drop: &mut Option<Dropout>,
    ) -> (Var, Var) {
        let mut z = text;
        let mut last = None;
        for b in &self.fsd {
            let h = b.norm_sa.forward(g, z);
            let a = b.self_attn.forward(g, h, h, text_segs, text_segs).out;
            let a = dropout(g, a, drop);
            z = g.add(z, a);
            let h = b.norm_ca.forward(g, z);
            let c = b.cross_attn.forward(g, h, obtained, text_segs, obtained_segs);
            last = Some(c.attn);
            let co = dropout(g, c.out, drop);
            z = g.add(z, co);
            let h = b.norm_ff.forward(g, z);
            let f = b.ffn.forward(g, h);
            let f = dropout(g, f, drop);
            z = g.add(z, f);
        }
        (self.fsd_norm.forward(g, z), last.expect("at least one decoder block"))
    }

    /// `w = sigmoid(FC2(GELU(FC1([p, q]))))`, `fused = w * p + (1 - w) * q`.
    /// Returns `(fused, w)`.
    pub fn fusion(&self, g: &mut Graph, block: usize, p: Var, q: Var) -> (Var, Var) {
        let f = &self.tgb[block].fusion;
        let cat = g.concat_cols(&[p, q]);
        let h = f.fc1.forward(g, cat);
        let h = g.gelu(h);
        let h = f.fc2.forward(g, h);
        let w = g.sigmoid(h);
        let wp = g.mul(w, p);
        let one_minus = g.one_minus(w);
        let wq = g.mul(one_minus, q);
        (g.add(wp, wq), w)
    }

    /// One text-frame guided block.
    #[allow(clippy::too_many_arguments)]
    pub fn tgb_forward(
        &self,
        g: &mut Graph,
        block: usize,
        z: Var,
        segs: &[usize],
        obtained: Var,
        obtained_segs: &[usize],
        semantics: Var,
        text_segs: &[usize],
        drop: &mut Option<Dropout>,
    ) -> Var {
        let b = &self.tgb[block];
        let p = b.self_attn.forward(g, z, z, segs, segs).out;
        let p = dropout(g, p, drop);
        let q = b.frame_attn.forward(g, z, obtained, segs, obtained_segs).out;
        let q = dropout(g, q, drop);
        let (fused, _) = self.fusion(g, block, p, q);
        let res = g.add(z, fused);
        let zbar = b.norm_fused.forward(g, res);
        let h = b.norm_text.forward(g, zbar);
        let c = b.text_attn.forward(g, h, semantics, segs, text_segs).out;
        let c = dropout(g, c, drop);
        let u = g.add(zbar, c);
        let h = b.norm_ff.forward(g, u);
        let f = b.ffn.forward(g, h);
        let f = dropout(g, f, drop);
        g.add(u, f)
    }

    /// Batched forward pass. Each input contributes one row segment to the output.
    pub fn forward(&self, g: &mut Graph, inputs: &[StageInput], mut drop: Option<Dropout>) -> Result<ForwardOutput> {
        if inputs.is_empty() {
            return Err(PmgError::Shape("empty batch".into()));
        }
        let dm = self.config.feature_dim;
        for inp in inputs {
            if inp.x_t.nrows() == 0 || inp.x_t.ncols() != dm || inp.positions.len() != inp.x_t.nrows() {
                return Err(PmgError::Shape(format!(
                    "generating frames {:?} with {} positions",
                    inp.x_t.dim(),
                    inp.positions.len()
                )));
            }
            if inp.obtained.ncols() != dm
                || inp.obtained.nrows() != inp.obtained_positions.len()
                || inp.obtained.nrows() != inp.obtained_given.len()
            {
                return Err(PmgError::Shape(format!(
                    "obtained frames {:?} with {} positions and {} flags",
                    inp.obtained.dim(),
                    inp.obtained_positions.len(),
                    inp.obtained_given.len()
                )));
            }
        }

        let prompts: Vec<&[u32]> = inputs.iter().map(|i| i.text.as_slice()).collect();
        let (text, text_segs) = self.encode_text(g, &prompts, &mut drop)?;

        // Obtained tokens; samples without any use the placeholder row.
        let obt_rows: Vec<_> = inputs.iter().filter(|i| i.obtained.nrows() > 0).collect();
        let n_obt: usize = obt_rows.iter().map(|i| i.obtained.nrows()).sum();
        let placeholder = g.param(self.placeholder);
        let all_obt = if n_obt > 0 {
            let views: Vec<_> = obt_rows.iter().map(|i| i.obtained.view()).collect();
            let frames = ndarray::concatenate(Axis(0), &views).expect("widths checked");
            let positions: Vec<usize> = obt_rows.iter().flat_map(|i| i.obtained_positions.iter().copied()).collect();
            let flags: Vec<bool> = obt_rows.iter().flat_map(|i| i.obtained_given.iter().copied()).collect();
            let z = self.embed_frames(g, &frames, &positions, Some(&flags), None)?;
            g.concat_rows(&[z, placeholder])
        } else {
            placeholder
        };
        let mut order = Vec::new();
        let mut obt_segs = Vec::with_capacity(inputs.len());
        let mut r0 = 0;
        for inp in inputs {
            let n = inp.obtained.nrows();
            if n == 0 {
                order.push(n_obt);
                obt_segs.push(1);
            } else {
                order.extend(r0..r0 + n);
                r0 += n;
                obt_segs.push(n);
            }
        }
        let obtained = g.gather_rows(all_obt, &order);

        let views: Vec<_> = inputs.iter().map(|i| i.x_t.view()).collect();
        let frames = ndarray::concatenate(Axis(0), &views).expect("widths checked");
        let positions: Vec<usize> = inputs.iter().flat_map(|i| i.positions.iter().copied()).collect();
        let ts: Vec<usize> = inputs.iter().flat_map(|i| std::iter::repeat_n(i.t, i.positions.len())).collect();
        let mut z = self.embed_frames(g, &frames, &positions, None, Some(&ts))?;
        let segs: Vec<usize> = inputs.iter().map(|i| i.positions.len()).collect();

        let (semantics, fsd_attn) =
            self.frame_aware_semantics(g, text, &text_segs, obtained, &obt_segs, &mut drop);
        for block in 0..self.tgb.len() {
            z = self.tgb_forward(g, block, z, &segs, obtained, &obt_segs, semantics, &text_segs, &mut drop);
        }
        let h = self.out_norm.forward(g, z);
        let eps = self.out_proj.forward(g, h);
        Ok(ForwardOutput {
            eps,
            segments: segs,
            fsd_cross_attention: fsd_attn,
            text_segments: text_segs,
            obtained_segments: obt_segs,
        })
    }

    /// Noise predictions, one matrix per input.
    pub fn predict_noise(&self, params: &ParamStore, inputs: &[StageInput]) -> Result<Vec<Array2<f64>>> {
        let mut g = Graph::new(params);
        let out = self.forward(&mut g, inputs, None)?;
        let eps = g.value(out.eps);
        let mut res = Vec::with_capacity(inputs.len());
        let mut r0 = 0;
        for n in out.segments {
            res.push(eps.slice(ndarray::s![r0..r0 + n, ..]).to_owned());
            r0 += n;
        }
        Ok(res)
    }

    /// Head-averaged attention of every text token over the obtained frames in the last
    /// semantics-decoder block (`n_text x n_obtained`, rows sum to 1).
    pub fn semantics_attention(&self, params: &ParamStore, input: &StageInput) -> Result<Array2<f64>> {
        if input.obtained.nrows() == 0 {
            return Err(PmgError::InsufficientSamples("no obtained frames to attend to".into()));
        }
        let mut g = Graph::new(params);
        let out = self.forward(&mut g, std::slice::from_ref(input), None)?;
        let probs = g.attention_probs(out.fsd_cross_attention).expect("attention node");
        let mut avg = Array2::zeros(probs[0].dim());
        for p in probs {
            avg += p;
        }
        Ok(avg / probs.len() as f64)
    }

    /// Attention profile of text token `word` (0-based) over ranges of obtained frames.
    pub fn word_attention_profile(
        &self,
        params: &ParamStore,
        input: &StageInput,
        word: usize,
        parts: &[(usize, usize)],
    ) -> Result<Vec<f64>> {
        let attn = self.semantics_attention(params, input)?;
        if word >= attn.nrows() {
            return Err(PmgError::InvalidPosition {
                position: word,
                len: attn.nrows(),
            });
        }
        attention_profile(&attn.row(word).to_vec(), parts)
    }
}

fn encoder_layer(g: &mut Graph, layer: &EncoderLayer, x: Var, segs: &[usize], drop: &mut Option<Dropout>) -> Var {
    let h = layer.norm1.forward(g, x);
    let a = layer.attn.forward(g, h, h, segs, segs).out;
    let a = dropout(g, a, drop);
    let x = g.add(x, a);
    let h = layer.norm2.forward(g, x);
    let f = layer.ffn.forward(g, h);
    let f = dropout(g, f, drop);
    g.add(x, f)
}

fn dropout(g: &mut Graph, x: Var, drop: &mut Option<Dropout>) -> Var {
    match drop {
        Some(Dropout { rate, rng }) if *rate > 0.0 => {
            let keep = 1.0 - *rate;
            let dim = g.value(x).dim();
            let mask = Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
            let m = g.input(mask);
            g.mul(x, m)
        }
        _ => x,
    }
}

fn sinusoid_table(rows: usize, d: usize) -> Array2<f64> {
    let mut t = Array2::zeros((rows, d));
    for (i, mut row) in t.rows_mut().into_iter().enumerate() {
        row.assign(&ndarray::Array1::from(sinusoid(i as f64, d)));
    }
    t
}

/// Average attention of one word over frame ranges: for each inclusive 1-based range
/// `(l, r)` returns `sum_{k=l..=r} a_k / (r - l + 1)`.
pub fn attention_profile(weights: &[f64], parts: &[(usize, usize)]) -> Result<Vec<f64>> {
    parts
        .iter()
        .map(|&(l, r)| {
            if l == 0 || l > r || r > weights.len() {
                return Err(PmgError::InvalidPosition {
                    position: if l == 0 || l > r { l } else { r },
                    len: weights.len(),
                });
            }
            Ok(weights[l - 1..r].iter().sum::<f64>() / (r - l + 1) as f64)
        })
        .collect()
}
