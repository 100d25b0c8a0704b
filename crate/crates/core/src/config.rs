//! TOML configuration shared by the command-line tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{make_corpus_with, CorpusConfig, CorpusSample};
use crate::diffusion::{DiffusionSchedule, Sampler, ScheduleConfig};
use crate::error::{PmgError, Result};
use crate::eval::{EvalSuiteConfig, EvaluatorConfig};
use crate::generator::GeneratorConfig;
use crate::motion::MotionSequence;
use crate::text::TextPrompt;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub seed: u64,
    pub samples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub fps: u32,
    /// Held-out evaluation set, drawn from its own seed.
    pub test_seed: u64,
    pub test_samples: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            seed: 0,
            samples: 2000,
            min_len: c.min_len,
            max_len: c.max_len,
            fps: c.fps,
            test_seed: 1,
            test_samples: 128,
        }
    }
}

impl CorpusSection {
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            min_len: self.min_len,
            max_len: self.max_len,
            fps: self.fps,
        }
    }

    pub fn train_set(&self) -> Vec<(TextPrompt, MotionSequence)> {
        pairs(make_corpus_with(self.seed, self.samples, &self.corpus_config()))
    }

    pub fn test_set(&self) -> Vec<(TextPrompt, MotionSequence)> {
        pairs(make_corpus_with(self.test_seed, self.test_samples, &self.corpus_config()))
    }
}

fn pairs(samples: Vec<CorpusSample>) -> Vec<(TextPrompt, MotionSequence)> {
    samples.into_iter().map(|s| (s.text, s.motion)).collect()
}

/// Inference defaults used when a request leaves a knob unset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub stages: usize,
    pub guidance: f64,
    pub sampler: Sampler,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            guidance: 2.0,
            sampler: Sampler::Fast { steps: 10 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PmgConfig {
    pub diffusion: ScheduleConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSection,
    pub eval: EvaluatorConfig,
    pub suite: EvalSuiteConfig,
    pub sampling: SamplingConfig,
}

impl PmgConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PmgError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        DiffusionSchedule::new(self.diffusion)?;
        self.generator.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.corpus.min_len < 2 || self.corpus.min_len > self.corpus.max_len {
            return Err(PmgError::Config("corpus lengths must satisfy 2 <= min_len <= max_len".into()));
        }
        if self.corpus.test_seed == self.corpus.seed {
            return Err(PmgError::Config("corpus.test_seed must differ from corpus.seed".into()));
        }
        if self.corpus.max_len > self.generator.max_len || self.corpus.max_len > self.eval.max_len {
            return Err(PmgError::Config("corpus.max_len exceeds a model's max_len".into()));
        }
        Ok(())
    }
}
