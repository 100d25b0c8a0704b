//! Progressive keyframe- and text-conditioned motion diffusion.
//!
//! Frames are generated in stages ordered by their distance to the nearest given
//! keyframe; each stage is denoised by a transformer conditioned on the text and on
//! every frame obtained so far.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod generator;
pub mod motion;
pub mod nn;
pub mod normalize;
pub mod partition;
pub mod pipeline;
pub mod sampler;
pub mod text;
pub mod trainer;

pub use checkpoint::{Checkpoint, EvaluatorCheckpoint, Model};
pub use config::PmgConfig;
pub use corpus::{make_corpus, CorpusSample};
pub use diffusion::{cfg_combine, DiffusionSchedule, Sampler, ScheduleConfig};
pub use error::{PmgError, Result};
pub use generator::{attention_profile, Generator, GeneratorConfig, StageInput};
pub use motion::{
    decode_motion_file, encode_motion_file, forward_kinematics, FeatureLayout, KeyframeSpec, MotionSequence,
    Skeleton,
};
pub use normalize::Normalizer;
pub use partition::{plan_stages, StagePlan};
pub use pipeline::TrainingRun;
pub use sampler::{generate, inpaint, GenerationProvenance, GenerationRequest, InpaintRequest};
pub use text::{TextPrompt, Vocabulary};
pub use trainer::{TrainConfig, TrainStepRecord, Trainer, TrainingData};
