//! Versioned JSON checkpoints with base64-encoded little-endian `f64` tensors.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::PmgConfig;
use crate::diffusion::DiffusionSchedule;
use crate::error::{PmgError, Result};
use crate::eval::motionclip::{Evaluator, EvaluatorConfig, MotionClip};
use crate::generator::Generator;
use crate::motion::Skeleton;
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::normalize::Normalizer;
use crate::sampler::Denoiser;
use crate::text::Vocabulary;
use crate::trainer::Trainer;

pub const CHECKPOINT_FORMAT: &str = "pmg-ckpt-v1";
pub const EVALUATOR_FORMAT: &str = "pmg-eval-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub names: Vec<String>,
    pub shapes: Vec<[usize; 2]>,
    /// Concatenated row-major little-endian `f64` values.
    pub data: String,
}

impl TensorBlob {
    pub fn encode(names: &[String], values: &[Array2<f64>]) -> Self {
        let mut bytes = Vec::with_capacity(values.iter().map(|v| v.len() * 8).sum());
        for v in values {
            for x in v.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        Self {
            names: names.to_vec(),
            shapes: values.iter().map(|v| [v.nrows(), v.ncols()]).collect(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<Array2<f64>>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| PmgError::Checkpoint(format!("tensor data is not base64: {e}")))?;
        let total: usize = self.shapes.iter().map(|[r, c]| r * c).sum();
        if bytes.len() != total * 8 || self.names.len() != self.shapes.len() {
            return Err(PmgError::Checkpoint("tensor data length does not match shapes".into()));
        }
        let mut vals = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        Ok(self
            .shapes
            .iter()
            .map(|&[r, c]| Array2::from_shape_fn((r, c), |_| vals.next().expect("length checked")))
            .collect())
    }

    /// Loads the blob into a store of identical layout.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.names != store.names() {
            return Err(PmgError::Checkpoint("parameter names do not match the configured architecture".into()));
        }
        store.set_values(self.decode()?).map_err(PmgError::Checkpoint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: TensorBlob,
    pub v: TensorBlob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: PmgConfig,
    pub vocabulary: Vocabulary,
    pub skeleton: Skeleton,
    pub fps: u32,
    pub normalizer: Normalizer,
    pub schedule: String,
    pub step: u64,
    pub seed: u64,
    pub params: TensorBlob,
    pub ema: TensorBlob,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn from_trainer(
        trainer: &Trainer,
        config: PmgConfig,
        vocabulary: Vocabulary,
        skeleton: Skeleton,
        fps: u32,
        normalizer: Normalizer,
    ) -> Self {
        let names = trainer.params.names();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            config,
            vocabulary,
            skeleton,
            fps,
            normalizer,
            schedule: trainer.schedule.fingerprint(),
            step: trainer.step,
            seed: trainer.seed,
            params: TensorBlob::encode(names, trainer.params.values()),
            ema: TensorBlob::encode(names, trainer.ema.values()),
            adam: Some(AdamState {
                step: trainer.adam.step,
                m: TensorBlob::encode(names, &trainer.adam.m),
                v: TensorBlob::encode(names, &trainer.adam.v),
            }),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let ckpt: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| PmgError::Checkpoint(format!("at `{}`: {}", e.path(), e.inner())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(PmgError::Checkpoint(format!(
                "unsupported format `{}`, expected `{CHECKPOINT_FORMAT}`",
                ckpt.format
            )));
        }
        ckpt.config.validate()?;
        let schedule = DiffusionSchedule::new(ckpt.config.diffusion)?;
        if schedule.fingerprint() != ckpt.schedule {
            return Err(PmgError::Checkpoint(format!(
                "schedule mismatch: checkpoint says `{}`, config gives `{}`",
                ckpt.schedule,
                schedule.fingerprint()
            )));
        }
        if ckpt.normalizer.dim() != ckpt.config.generator.feature_dim
            || ckpt.skeleton.layout().dim() != ckpt.config.generator.feature_dim
        {
            return Err(PmgError::Checkpoint("feature width disagrees with the skeleton".into()));
        }
        if ckpt.vocabulary.len() != ckpt.config.generator.vocab_size {
            return Err(PmgError::Checkpoint("vocabulary size disagrees with the generator".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the trainer state so that training resumes exactly.
    pub fn trainer(&self) -> Result<Trainer> {
        let schedule = DiffusionSchedule::new(self.config.diffusion)?;
        let (generator, mut params) = Generator::new(self.config.generator, self.seed)?;
        self.params.load_into(&mut params)?;
        let mut trainer = Trainer::new(self.config.train, generator, params, schedule, self.seed)?;
        self.ema.load_into(&mut trainer.ema)?;
        if let Some(adam) = &self.adam {
            let mut state = Adam::new(
                AdamConfig {
                    lr: self.config.train.lr,
                    ..Default::default()
                },
                &trainer.params,
            );
            state.step = adam.step;
            state.m = adam.m.decode()?;
            state.v = adam.v.decode()?;
            if state.m.len() != trainer.params.len() || state.v.len() != trainer.params.len() {
                return Err(PmgError::Checkpoint("optimizer state does not match parameters".into()));
            }
            trainer.adam = state;
        }
        trainer.step = self.step;
        Ok(trainer)
    }
}

/// Everything needed for inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: PmgConfig,
    pub generator: Generator,
    pub params: ParamStore,
    pub normalizer: Normalizer,
    pub schedule: DiffusionSchedule,
    pub skeleton: Skeleton,
    pub vocab: Vocabulary,
    pub fps: u32,
    pub step: u64,
    pub clip: Option<Vec<f64>>,
}

impl Model {
    /// Uses the EMA weights when `ema` is set, the raw weights otherwise.
    pub fn from_checkpoint(ckpt: &Checkpoint, ema: bool) -> Result<Self> {
        let (generator, mut params) = Generator::new(ckpt.config.generator, ckpt.seed)?;
        if ema {
            ckpt.ema.load_into(&mut params)?;
        } else {
            ckpt.params.load_into(&mut params)?;
        }
        Ok(Self {
            config: ckpt.config,
            generator,
            params,
            normalizer: ckpt.normalizer.clone(),
            schedule: DiffusionSchedule::new(ckpt.config.diffusion)?,
            skeleton: ckpt.skeleton.clone(),
            vocab: ckpt.vocabulary.clone(),
            fps: ckpt.fps,
            step: ckpt.step,
            clip: ckpt.normalizer.clip_bounds(),
        })
    }

    pub fn denoiser(&self) -> Denoiser<'_> {
        Denoiser {
            generator: &self.generator,
            params: &self.params,
            schedule: &self.schedule,
            clip: self.clip.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorCheckpoint {
    pub format: String,
    pub config: EvaluatorConfig,
    pub vocab_size: usize,
    pub skeleton: Skeleton,
    pub seed: u64,
    pub normalizer: Normalizer,
    pub params: TensorBlob,
}

impl EvaluatorCheckpoint {
    pub fn new(ev: &Evaluator, skeleton: Skeleton, seed: u64) -> Self {
        Self {
            format: EVALUATOR_FORMAT.into(),
            config: ev.net.config,
            vocab_size: ev.net.vocab_size,
            skeleton,
            seed,
            normalizer: ev.normalizer.clone(),
            params: TensorBlob::encode(ev.params.names(), ev.params.values()),
        }
    }

    pub fn evaluator(&self) -> Result<Evaluator> {
        if self.format != EVALUATOR_FORMAT {
            return Err(PmgError::Checkpoint(format!(
                "unsupported format `{}`, expected `{EVALUATOR_FORMAT}`",
                self.format
            )));
        }
        let (net, mut params) = MotionClip::new(self.config, self.vocab_size, &self.skeleton.layout(), self.seed)?;
        self.params.load_into(&mut params)?;
        Ok(Evaluator {
            net,
            params,
            normalizer: self.normalizer.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| PmgError::Checkpoint(format!("at `{}`: {}", e.path(), e.inner())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn blobs_round_trip_bit_exactly() {
        let names = vec!["a".to_string(), "b".to_string()];
        let vals = vec![array![[1.0 / 3.0, -0.0], [f64::MIN_POSITIVE, 1e300]], array![[std::f64::consts::PI]]];
        let blob = TensorBlob::encode(&names, &vals);
        let back = blob.decode().unwrap();
        for (a, b) in vals.iter().zip(&back) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
