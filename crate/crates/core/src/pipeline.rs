//! Glue between a corpus, a configuration and a trained model.

use crate::checkpoint::{Checkpoint, Model};
use crate::config::PmgConfig;
use crate::diffusion::DiffusionSchedule;
use crate::error::{PmgError, Result};
use crate::generator::Generator;
use crate::motion::{MotionSequence, Skeleton};
use crate::normalize::Normalizer;
use crate::text::{TextPrompt, Vocabulary};
use crate::trainer::{Trainer, TrainingData};

/// A fresh trainer and its prepared data. The normalizer is fitted on `corpus`.
pub struct TrainingRun {
    pub config: PmgConfig,
    pub trainer: Trainer,
    pub data: TrainingData,
    pub vocabulary: Vocabulary,
    pub skeleton: Skeleton,
    pub fps: u32,
}

impl TrainingRun {
    pub fn new(config: PmgConfig, vocabulary: Vocabulary, corpus: &[(TextPrompt, MotionSequence)], seed: u64) -> Result<Self> {
        config.validate()?;
        let first = corpus
            .first()
            .ok_or_else(|| PmgError::InsufficientSamples("training corpus is empty".into()))?;
        if vocabulary.len() != config.generator.vocab_size {
            return Err(PmgError::Config(format!(
                "generator.vocab_size is {} but the vocabulary has {} words",
                config.generator.vocab_size,
                vocabulary.len()
            )));
        }
        let skeleton = first.1.skeleton.clone();
        let fps = first.1.fps;
        if let Some((i, _)) = corpus
            .iter()
            .enumerate()
            .find(|(_, (_, m))| m.skeleton != skeleton || m.len() > config.generator.max_len)
        {
            return Err(PmgError::InvalidMotion(format!(
                "sample {i} uses a different skeleton or exceeds generator.max_len"
            )));
        }
        let normalizer = Normalizer::fit(corpus.iter().map(|(_, m)| m))?;
        let data = TrainingData::new(corpus, normalizer)?;
        let schedule = DiffusionSchedule::new(config.diffusion)?;
        let (generator, params) = Generator::new(config.generator, seed)?;
        let trainer = Trainer::new(config.train, generator, params, schedule, seed)?;
        Ok(Self {
            config,
            trainer,
            data,
            vocabulary,
            skeleton,
            fps,
        })
    }

    /// Continues from a checkpoint; the corpus only supplies training data.
    pub fn resume(ckpt: &Checkpoint, corpus: &[(TextPrompt, MotionSequence)]) -> Result<Self> {
        Ok(Self {
            config: ckpt.config,
            trainer: ckpt.trainer()?,
            data: TrainingData::new(corpus, ckpt.normalizer.clone())?,
            vocabulary: ckpt.vocabulary.clone(),
            skeleton: ckpt.skeleton.clone(),
            fps: ckpt.fps,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_trainer(
            &self.trainer,
            self.config,
            self.vocabulary.clone(),
            self.skeleton.clone(),
            self.fps,
            self.data.normalizer.clone(),
        )
    }

    /// Inference model built from the EMA weights.
    pub fn model(&self) -> Result<Model> {
        Model::from_checkpoint(&self.checkpoint(), true)
    }
}
