//! Training loop with per-sample stage sampling, zero-frame compatibility,
//! pseudo-frame replacement by the EMA model, and text dropout.

use ndarray::{s, Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::diffusion::{DiffusionSchedule, Sampler};
use crate::error::{PmgError, Result};
use crate::generator::{Dropout, Generator, StageInput};
use crate::motion::MotionSequence;
use crate::nn::{clip_grad_norm, ema_update, standard_normal, Adam, AdamConfig, ParamStore};
use crate::normalize::Normalizer;
use crate::partition::{plan_stages, StagePlan};
use crate::sampler::{progressive_sample, Denoiser};
use crate::text::TextPrompt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Stage count K.
    pub stages: usize,
    /// Maximum number of given frames N_f.
    pub max_given: usize,
    /// Pseudo-frame replacement probability.
    pub tau: f64,
    /// Text replacement probability.
    pub eta: f64,
    /// Zero-given-frame probability.
    pub zeta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    /// Fast-sampler steps used by the EMA model for replacement.
    pub replacement_steps: usize,
    /// Guidance scale used by the EMA model for replacement.
    pub guidance: f64,
    pub steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            max_given: 4,
            tau: 0.3,
            eta: 0.2,
            zeta: 0.001,
            lr: 1e-4,
            batch_size: 64,
            ema_decay: 0.995,
            replacement_steps: 5,
            guidance: 2.0,
            steps: 10_000,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("tau", self.tau), ("eta", self.eta), ("zeta", self.zeta)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PmgError::Config(format!("train.{name} must lie in [0, 1]")));
            }
        }
        if self.stages == 0 || self.batch_size == 0 || self.replacement_steps == 0 {
            return Err(PmgError::Config(
                "train.stages, train.batch_size and train.replacement_steps must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.ema_decay) || self.guidance < 0.0 {
            return Err(PmgError::Config(
                "train.lr must be positive, train.ema_decay in [0, 1), train.guidance non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One corpus sample prepared for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub text: Vec<u32>,
    /// Normalized full features.
    pub x0: Array2<f64>,
    /// Normalized keyframe view of every frame: keyframe channels kept, others zero.
    pub partial: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub samples: Vec<TrainSample>,
    pub normalizer: Normalizer,
}

impl TrainingData {
    pub fn new(corpus: &[(TextPrompt, MotionSequence)], normalizer: Normalizer) -> Result<Self> {
        if corpus.is_empty() {
            return Err(PmgError::InsufficientSamples("training corpus is empty".into()));
        }
        let samples = corpus
            .iter()
            .enumerate()
            .map(|(i, (text, motion))| {
                if motion.len() < 2 {
                    return Err(PmgError::InvalidMotion(format!("sample {i} has fewer than 2 frames")));
                }
                if motion.features.ncols() != normalizer.dim() {
                    return Err(PmgError::Shape(format!("sample {i} feature width differs from normalizer")));
                }
                let x0 = normalizer.normalize(&motion.features);
                let mask = motion.layout().keyframe_mask();
                let mut partial = x0.clone();
                for mut row in partial.rows_mut() {
                    for (v, m) in row.iter_mut().zip(&mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                }
                Ok(TrainSample {
                    text: text.tokens.clone(),
                    x0,
                    partial,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples, normalizer })
    }
}

/// Conditions sampled for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditions {
    pub k: usize,
    pub n_given: usize,
    pub plan: StagePlan,
    pub text_dropped: bool,
}

/// Samples the stage, given frames and text condition for a motion of `len` frames.
///
/// `n_f` is uniform on `1..=min(N_f, len - 1)` and zeroed with probability `zeta`.
/// The stage is drawn uniformly among the nonempty stages of the resulting plan.
pub fn sample_conditions(len: usize, rng: &mut impl Rng, cfg: &TrainConfig) -> Result<Conditions> {
    let max_given = cfg.max_given.min(len - 1);
    let mut n_given = if max_given == 0 { 0 } else { rng.random_range(1..=max_given) };
    if rng.random::<f64>() < cfg.zeta {
        n_given = 0;
    }
    let given: Vec<usize> = sample_indices(rng, len, n_given).into_iter().map(|i| i + 1).collect();
    let plan = plan_stages(len, &given, cfg.stages)?;
    let nonempty: Vec<usize> = (1..=plan.stages).filter(|&k| !plan.groups[k - 1].is_empty()).collect();
    let k = nonempty[rng.random_range(0..nonempty.len())];
    let text_dropped = rng.random::<f64>() < cfg.eta;
    Ok(Conditions {
        k,
        n_given,
        plan,
        text_dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub k: usize,
    pub n_given: usize,
    pub t: usize,
    pub replaced: bool,
    pub text_dropped: bool,
    /// Largest absolute difference between the obtained generated-stage inputs and
    /// ground truth; `None` when no earlier stage contributed frames.
    pub obtained_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub ema_updated: bool,
    pub samples: Vec<SampleRecord>,
}

/// A prepared batch: network inputs, target noise and the audit records.
pub struct Batch {
    pub inputs: Vec<StageInput>,
    pub targets: Vec<Array2<f64>>,
    pub records: Vec<SampleRecord>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub adam: Adam,
    pub schedule: DiffusionSchedule,
    /// Number of completed optimization steps.
    pub step: u64,
    pub seed: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, generator: Generator, params: ParamStore, schedule: DiffusionSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..Default::default()
            },
            &params,
        );
        Ok(Self {
            config,
            generator,
            ema: params.clone(),
            params,
            adam,
            schedule,
            step: 0,
            seed,
        })
    }

    /// Random stream of optimization step `step`; independent of earlier steps so that
    /// resuming reproduces training exactly.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }

    /// Builds the batch of the next step without updating anything.
    pub fn prepare_batch(&self, data: &TrainingData, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let cfg = &self.config;
        let clip = data.normalizer.clip_bounds();
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        let mut records = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let index = rng.random_range(0..data.samples.len());
            let sample = &data.samples[index];
            let len = sample.x0.nrows();
            let cond = sample_conditions(len, rng, cfg)?;
            let plan = &cond.plan;
            let k = cond.k;

            // Obtained context: given frames in keyframe form, earlier stages in full.
            let mut buffer = sample.x0.clone();
            for &p in &plan.given {
                buffer.row_mut(p - 1).assign(&sample.partial.row(p - 1));
            }
            let replaced = k > 1 && rng.random::<f64>() < cfg.tau;
            if replaced {
                let den = Denoiser {
                    generator: &self.generator,
                    params: &self.ema,
                    schedule: &self.schedule,
                    clip: clip.as_deref(),
                };
                progressive_sample(
                    den,
                    plan,
                    &sample.text,
                    &mut buffer,
                    cfg.guidance,
                    Sampler::Fast {
                        steps: cfg.replacement_steps,
                    },
                    rng,
                    k - 1,
                    &|| false,
                )?;
            }
            let text = if cond.text_dropped { Vec::new() } else { sample.text.clone() };

            let positions = plan.groups[k - 1].clone();
            let obtained_positions = plan.obtained_positions(k);
            let rows: Vec<usize> = obtained_positions.iter().map(|p| p - 1).collect();
            let obtained = buffer.select(Axis(0), &rows);
            let obtained_given: Vec<bool> = obtained_positions
                .iter()
                .map(|p| plan.given.binary_search(p).is_ok())
                .collect();
            let generated_inputs = obtained_given.iter().any(|g| !g);
            let obtained_delta = generated_inputs.then(|| {
                obtained_positions
                    .iter()
                    .zip(obtained.rows())
                    .filter(|(p, _)| plan.given.binary_search(p).is_err())
                    .flat_map(|(p, row)| {
                        row.iter()
                            .zip(sample.x0.row(p - 1))
                            .map(|(a, b)| (a - b).abs())
                            .collect::<Vec<_>>()
                    })
                    .fold(0.0, f64::max)
            });

            let t = rng.random_range(1..=self.schedule.steps());
            let x0 = sample.x0.select(Axis(0), &positions.iter().map(|p| p - 1).collect::<Vec<_>>());
            let eps = standard_normal(rng, x0.nrows(), x0.ncols());
            let x_t = self.schedule.add_noise(&x0, t, &eps)?;
            inputs.push(StageInput {
                x_t,
                positions,
                t,
                text,
                obtained,
                obtained_positions,
                obtained_given,
            });
            targets.push(eps);
            records.push(SampleRecord {
                index,
                k,
                n_given: cond.n_given,
                t,
                replaced,
                text_dropped: cond.text_dropped,
                obtained_delta,
            });
        }
        Ok(Batch {
            inputs,
            targets,
            records,
        })
    }

    /// One optimization step: loss over the generating frames only, Adam update, EMA
    /// update. Parameters are left untouched if the loss is not finite.
    pub fn train_step(&mut self, data: &TrainingData) -> Result<TrainStepRecord> {
        let mut rng = self.step_rng(self.step);
        let batch = self.prepare_batch(data, &mut rng)?;
        let step = self.step + 1;
        let (loss, mut grads) = {
            let drop = (self.generator.config.dropout > 0.0).then(|| Dropout {
                rate: self.generator.config.dropout,
                rng: &mut rng,
            });
            let mut g = Graph::new(&self.params);
            let out = self.generator.forward(&mut g, &batch.inputs, drop)?;
            let views: Vec<_> = batch.targets.iter().map(|t| t.view()).collect();
            let target = ndarray::concatenate(Axis(0), &views).expect("same width");
            let weights = vec![1.0; target.nrows()];
            let l = g.mse(out.eps, target, &weights);
            let loss = g.value(l)[[0, 0]];
            if !loss.is_finite() {
                return Err(PmgError::NonFiniteLoss { step, loss });
            }
            (loss, g.backward(l))
        };
        let grad_norm = if self.config.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, self.config.grad_clip)
        } else {
            clip_grad_norm(&mut grads, f64::INFINITY)
        };
        self.adam.update(&mut self.params, &grads);
        ema_update(&mut self.ema, &self.params, self.config.ema_decay);
        self.step = step;
        Ok(TrainStepRecord {
            step,
            loss,
            grad_norm,
            ema_updated: true,
            samples: batch.records,
        })
    }

    /// Runs until `config.steps` steps have completed, reporting every step.
    pub fn fit(&mut self, data: &TrainingData, mut callback: impl FnMut(&TrainStepRecord)) -> Result<()> {
        while self.step < self.config.steps {
            let rec = self.train_step(data)?;
            callback(&rec);
        }
        Ok(())
    }
}

/// Mean squared error between predicted and target noise over all rows and channels.
pub fn noise_loss(pred: &[Array2<f64>], target: &[Array2<f64>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(target) {
        total += (p - t).mapv(|v| v * v).sum();
        n += p.len();
    }
    total / n as f64
}

/// Rows of `m` at 1-based positions.
pub fn rows_at(m: &Array2<f64>, positions: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((positions.len(), m.ncols()));
    for (i, &p) in positions.iter().enumerate() {
        out.slice_mut(s![i, ..]).assign(&m.row(p - 1));
    }
    out
}
