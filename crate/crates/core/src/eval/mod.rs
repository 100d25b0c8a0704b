//! Evaluator network, metrics and the generation evaluation suite.

pub mod metrics;
pub mod motionclip;
pub mod suite;

pub use metrics::{ave_ape, diversity, fid, fid_from_moments, mm_dist, multimodality, r_precision};
pub use motionclip::{train_motionclip, Evaluator, EvaluatorConfig, MotionClip};
pub use suite::{evaluate, EvalReport, EvalSuiteConfig};
