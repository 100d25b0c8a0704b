//! Generates motions for a held-out set and scores them with the evaluator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Model;
use crate::diffusion::Sampler;
use crate::error::{PmgError, Result};
use crate::eval::metrics::{ave_ape, diversity, fid, l2_normalize_rows, mm_dist, multimodality, r_precision};
use crate::eval::motionclip::Evaluator;
use crate::motion::{KeyframeSpec, MotionSequence};
use crate::sampler::{generate, GenerationRequest};
use crate::text::TextPrompt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSuiteConfig {
    /// Ground-truth frames handed to the generator as keyframes.
    pub n_given: usize,
    pub stages: usize,
    pub guidance: f64,
    pub sampler: Sampler,
    pub pool_size: usize,
    pub repeats: usize,
    /// Disjoint pairs for diversity; clamped to half the sample count.
    pub diversity_pairs: usize,
    /// Texts used for multimodality (0 disables it).
    pub mm_texts: usize,
    pub mm_repeats: usize,
    pub seed: u64,
}

impl Default for EvalSuiteConfig {
    fn default() -> Self {
        Self {
            n_given: 2,
            stages: 3,
            guidance: 2.0,
            sampler: Sampler::Fast { steps: 10 },
            pool_size: 32,
            repeats: 20,
            diversity_pairs: 100,
            mm_texts: 10,
            mm_repeats: 10,
            seed: 0,
        }
    }
}

/// Columns follow the usual text-to-motion table layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "R-Top1")]
    pub r_top1: f64,
    #[serde(rename = "R-Top2")]
    pub r_top2: f64,
    #[serde(rename = "R-Top3")]
    pub r_top3: f64,
    #[serde(rename = "FID")]
    pub fid: f64,
    #[serde(rename = "MM-Dist")]
    pub mm_dist: f64,
    #[serde(rename = "Diversity")]
    pub diversity: f64,
    #[serde(rename = "MM.")]
    pub multimodality: Option<f64>,
    #[serde(rename = "AVE_root")]
    pub ave_root: f64,
    #[serde(rename = "APE")]
    pub ape: f64,
    pub samples: usize,
}

/// Deterministic keyframe positions for test sample `index`.
pub fn keyframe_positions(len: usize, n_given: usize, seed: u64, index: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut pos: Vec<usize> = rand::seq::index::sample(&mut rng, len, n_given.min(len - 1))
        .into_iter()
        .map(|i| i + 1)
        .collect();
    pos.sort_unstable();
    pos
}

fn generation_seed(seed: u64, index: usize, repeat: usize) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add((index as u64) << 16)
        .wrapping_add(repeat as u64)
}

fn generate_for(model: &Model, text: &TextPrompt, truth: &MotionSequence, cfg: &EvalSuiteConfig, index: usize, repeat: usize) -> Result<MotionSequence> {
    let keyframes = keyframe_positions(truth.len(), cfg.n_given, cfg.seed, index)
        .into_iter()
        .map(|p| KeyframeSpec::from_motion(truth, p))
        .collect::<Result<Vec<_>>>()?;
    let mut req = GenerationRequest::new(text.clone(), keyframes, truth.len());
    req.stages = cfg.stages;
    req.guidance = cfg.guidance;
    req.sampler = cfg.sampler;
    req.seed = generation_seed(cfg.seed, index, repeat);
    Ok(generate(model, &req)?.0)
}

pub fn evaluate(model: &Model, evaluator: &Evaluator, test: &[(TextPrompt, MotionSequence)], cfg: &EvalSuiteConfig) -> Result<EvalReport> {
    if test.len() < cfg.pool_size.max(2) {
        return Err(PmgError::InsufficientSamples(format!(
            "evaluation needs at least {} samples, got {}",
            cfg.pool_size.max(2),
            test.len()
        )));
    }
    let generated = test
        .iter()
        .enumerate()
        .map(|(i, (text, truth))| generate_for(model, text, truth, cfg, i, 0))
        .collect::<Result<Vec<_>>>()?;
    let texts: Vec<Vec<u32>> = test.iter().map(|(t, _)| t.tokens.clone()).collect();
    let real: Vec<&MotionSequence> = test.iter().map(|(_, m)| m).collect();
    let gen_refs: Vec<&MotionSequence> = generated.iter().collect();

    let gen_emb = evaluator.embed_motions(&gen_refs)?;
    let real_emb = evaluator.embed_motions(&real)?;
    let text_emb = evaluator.embed_texts(&texts)?;
    let gen_unit = l2_normalize_rows(&gen_emb);
    let text_unit = l2_normalize_rows(&text_emb);

    let r = r_precision(&gen_unit, &text_unit, cfg.pool_size, 3, cfg.repeats, cfg.seed)?;
    let fid_value = fid(&gen_emb, &real_emb)?;
    let mm = mm_dist(&gen_unit, &text_unit)?;
    let pairs = cfg.diversity_pairs.min(generated.len() / 2);
    let div = diversity(&gen_unit, pairs, cfg.seed)?;

    let multimodality_value = if cfg.mm_texts > 0 && cfg.mm_repeats >= 2 {
        let mut groups = Vec::new();
        for (i, (text, truth)) in test.iter().enumerate().take(cfg.mm_texts) {
            let runs = (0..cfg.mm_repeats)
                .map(|r| generate_for(model, text, truth, cfg, i, r + 1))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&MotionSequence> = runs.iter().collect();
            groups.push(l2_normalize_rows(&evaluator.embed_motions(&refs)?));
        }
        Some(multimodality(&groups)?)
    } else {
        None
    };

    let mut ave_root = 0.0;
    let mut ape = 0.0;
    let all_joints: Vec<usize> = (0..model.skeleton.num_joints()).collect();
    for (g, t) in generated.iter().zip(&real) {
        ave_root += ave_ape(g, t, &[0])?.0;
        ape += ave_ape(g, t, &all_joints)?.1;
    }
    let n = generated.len() as f64;
    Ok(EvalReport {
        r_top1: r[0],
        r_top2: r[1],
        r_top3: r[2],
        fid: fid_value,
        mm_dist: mm,
        diversity: div,
        multimodality: multimodality_value,
        ave_root: ave_root / n,
        ape: ape / n,
        samples: generated.len(),
    })
}

/// Retrieval precision of real motions against their own texts, for reference.
pub fn real_retrieval(evaluator: &Evaluator, test: &[(TextPrompt, MotionSequence)], cfg: &EvalSuiteConfig) -> Result<Vec<f64>> {
    let real: Vec<&MotionSequence> = test.iter().map(|(_, m)| m).collect();
    let texts: Vec<Vec<u32>> = test.iter().map(|(t, _)| t.tokens.clone()).collect();
    let m = l2_normalize_rows(&evaluator.embed_motions(&real)?);
    let t = l2_normalize_rows(&evaluator.embed_texts(&texts)?);
    r_precision(&m, &t, cfg.pool_size, 3, cfg.repeats, cfg.seed)
}
