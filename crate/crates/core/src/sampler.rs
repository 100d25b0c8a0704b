//! Progressive multi-stage generation and temporal inpainting.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Model;
use crate::diffusion::{cfg_combine, DiffusionSchedule, Sampler};
use crate::error::{PmgError, Result};
use crate::generator::{Generator, StageInput};
use crate::motion::{anchor_root, recompute_derived_at, KeyframeSpec, MotionSequence};
use crate::nn::{standard_normal, ParamStore};
use crate::partition::{plan_stages, StagePlan};
use crate::text::TextPrompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub text: TextPrompt,
    pub keyframes: Vec<KeyframeSpec>,
    pub length: usize,
    pub stages: usize,
    pub guidance: f64,
    pub sampler: Sampler,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(text: TextPrompt, keyframes: Vec<KeyframeSpec>, length: usize) -> Self {
        Self {
            text,
            keyframes,
            length,
            stages: 3,
            guidance: 2.0,
            sampler: Sampler::Fast { steps: 10 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    pub positions: Vec<usize>,
    pub obtained: usize,
    pub timesteps: Vec<usize>,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationProvenance {
    pub plan: StagePlan,
    pub stages: Vec<StageTrace>,
    pub sampler: String,
    pub seed: u64,
    pub guidance: f64,
    pub schedule: String,
    /// Per-frame origin: `given`, `stage-k`, or `kept` for inpainting.
    pub origin: Vec<String>,
    pub notes: Vec<String>,
    /// Assembled features before derived channels were recomputed.
    pub raw_features: Vec<Vec<f64>>,
}

/// Borrowed network state needed to denoise.
#[derive(Clone, Copy)]
pub struct Denoiser<'a> {
    pub generator: &'a Generator,
    pub params: &'a ParamStore,
    pub schedule: &'a DiffusionSchedule,
    /// Per-channel bound on predicted clean samples, in normalized space.
    pub clip: Option<&'a [f64]>,
}

/// Runs stages `1..=until_stage` of `plan`, writing generated rows into `buffer`
/// (normalized space, `len x d_m`). Rows at given positions must already be filled.
/// `abort` is polled between diffusion steps.
#[allow(clippy::too_many_arguments)]
pub fn progressive_sample(
    den: Denoiser,
    plan: &StagePlan,
    text: &[u32],
    buffer: &mut Array2<f64>,
    guidance: f64,
    sampler: Sampler,
    rng: &mut ChaCha8Rng,
    until_stage: usize,
    abort: &dyn Fn() -> bool,
) -> Result<Vec<StageTrace>> {
    let dm = buffer.ncols();
    let timesteps = den.schedule.timesteps(sampler);
    let use_uncond = guidance != 0.0 && !text.is_empty();
    let mut traces = Vec::new();
    let mut completed = 0;
    for k in 1..=until_stage.min(plan.stages) {
        let positions = plan.groups[k - 1].clone();
        let obtained_positions = plan.obtained_positions(k);
        if positions.is_empty() {
            traces.push(StageTrace {
                stage: k,
                positions,
                obtained: obtained_positions.len(),
                timesteps: Vec::new(),
                skipped: true,
            });
            completed += 1;
            continue;
        }
        let obtained = buffer.select(Axis(0), &obtained_positions.iter().map(|p| p - 1).collect::<Vec<_>>());
        let obtained_given: Vec<bool> = obtained_positions
            .iter()
            .map(|p| plan.given.binary_search(p).is_ok())
            .collect();
        let mut x = standard_normal(rng, positions.len(), dm);
        for (i, &t) in timesteps.iter().enumerate() {
            if abort() {
                return Err(PmgError::Aborted {
                    completed_stages: completed,
                });
            }
            let cond = StageInput {
                x_t: x.clone(),
                positions: positions.clone(),
                t,
                text: text.to_vec(),
                obtained: obtained.clone(),
                obtained_positions: obtained_positions.clone(),
                obtained_given: obtained_given.clone(),
            };
            let eps = if use_uncond {
                let mut uncond = cond.clone();
                uncond.text.clear();
                let out = den.generator.predict_noise(den.params, &[cond, uncond])?;
                cfg_combine(&out[0], &out[1], guidance)
            } else {
                den.generator
                    .predict_noise(den.params, &[cond])?
                    .pop()
                    .expect("one output")
            };
            let eps = match den.clip {
                Some(bound) => den.schedule.clamp_eps(&x, t, &eps, bound)?,
                None => eps,
            };
            x = match sampler {
                Sampler::Ancestral => {
                    let z = if t > 1 {
                        standard_normal(rng, x.nrows(), dm)
                    } else {
                        Array2::zeros(x.dim())
                    };
                    den.schedule.ancestral_step(&x, t, &eps, &z)?
                }
                Sampler::Fast { .. } => {
                    let next = timesteps.get(i + 1).copied().unwrap_or(0);
                    den.schedule.fast_step(&x, t, next, &eps)?
                }
            };
        }
        for (row, &p) in x.rows().into_iter().zip(&positions) {
            buffer.row_mut(p - 1).assign(&row);
        }
        traces.push(StageTrace {
            stage: k,
            positions,
            obtained: obtained_positions.len(),
            timesteps: timesteps.clone(),
            skipped: false,
        });
        completed += 1;
    }
    Ok(traces)
}

fn never() -> bool {
    false
}

/// Frames whose joint velocities were not sampled (the first frame and given frames),
/// indexed from 0. Sampled velocities are kept: each stage already saw its neighbours.
fn unsampled_velocity_frames(plan: &StagePlan) -> Vec<bool> {
    (0..plan.len).map(|i| i == 0 || plan.stage_of(i + 1) == 0).collect()
}

/// Generates a motion of `request.length` frames through all planned stages.
pub fn generate(model: &Model, request: &GenerationRequest) -> Result<(MotionSequence, GenerationProvenance)> {
    generate_with_abort(model, request, &never)
}

pub fn generate_with_abort(
    model: &Model,
    request: &GenerationRequest,
    abort: &dyn Fn() -> bool,
) -> Result<(MotionSequence, GenerationProvenance)> {
    let layout = model.skeleton.layout();
    let len = request.length;
    if len == 0 || len > model.generator.config.max_len {
        return Err(PmgError::schema(
            "length",
            format!("must lie in 1..={}", model.generator.config.max_len),
        ));
    }
    if !(request.guidance >= 0.0 && request.guidance.is_finite()) {
        return Err(PmgError::schema("guidance", "must be finite and non-negative"));
    }
    if let Sampler::Fast { steps } = request.sampler {
        if steps == 0 || steps > model.schedule.steps() {
            return Err(PmgError::schema("sampler.steps", format!("must lie in 1..={}", model.schedule.steps())));
        }
    }
    request.text.validate(model.vocab.len())?;
    for (i, kf) in request.keyframes.iter().enumerate() {
        kf.validate(&layout, len).map_err(|e| match e {
            PmgError::InvalidPosition { .. } => {
                PmgError::schema(format!("keyframes[{i}].position"), format!("must lie in 1..={len}"))
            }
            PmgError::Schema { field, reason } => PmgError::schema(format!("keyframes[{i}].{field}"), reason),
            other => other,
        })?;
    }
    let positions: Vec<usize> = request.keyframes.iter().map(|k| k.position).collect();
    let plan = plan_stages(len, &positions, request.stages)?;

    let mask = layout.keyframe_mask();
    let mut buffer = Array2::zeros((len, layout.dim()));
    for kf in &request.keyframes {
        let row = model.normalizer.normalize_partial(&kf.partial_features(&layout), &mask);
        buffer.row_mut(kf.position - 1).assign(&ndarray::Array1::from(row));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let traces = progressive_sample(
        model.denoiser(),
        &plan,
        &request.text.tokens,
        &mut buffer,
        request.guidance,
        request.sampler,
        &mut rng,
        plan.stages,
        abort,
    )?;

    let mut features = model.normalizer.denormalize(&buffer);
    for kf in &request.keyframes {
        for (c, v) in kf.given_values(&layout) {
            features[[kf.position - 1, c]] = v;
        }
    }
    let raw_features = features.rows().into_iter().map(|r| r.to_vec()).collect();
    let anchors: Vec<usize> = plan.given.iter().map(|p| p - 1).collect();
    anchor_root(&mut features, &layout, &anchors);
    recompute_derived_at(&mut features, &layout, &unsampled_velocity_frames(&plan));

    let mut notes = Vec::new();
    if plan.is_zero_frame() && request.stages > 1 {
        notes.push(format!(
            "no keyframes: {} requested stages collapsed into one text-only stage",
            request.stages
        ));
    }
    for t in traces.iter().filter(|t| t.skipped) {
        notes.push(format!("stage {} is empty and was skipped", t.stage));
    }
    notes.push("root trajectory integrated from generated root velocities and pinned at given frames; joint velocities recomputed only at given frames".into());
    let origin = (1..=len)
        .map(|p| match plan.stage_of(p) {
            0 => "given".to_string(),
            k => format!("stage-{k}"),
        })
        .collect();
    let motion = MotionSequence::new(features, model.fps, model.skeleton.clone())?;
    Ok((
        motion,
        GenerationProvenance {
            plan,
            stages: traces,
            sampler: request.sampler.id(),
            seed: request.seed,
            guidance: request.guidance,
            schedule: model.schedule.fingerprint(),
            origin,
            notes,
            raw_features,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub text: TextPrompt,
    /// `true` marks frames to keep.
    pub keep: Vec<bool>,
    pub stages: usize,
    pub guidance: f64,
    pub sampler: Sampler,
    pub seed: u64,
}

/// Regenerates the frames not marked in `keep`, conditioning on the kept frames with
/// all of their channels. Kept frames are copied into the output unchanged.
pub fn inpaint(
    model: &Model,
    motion: &MotionSequence,
    request: &InpaintRequest,
    abort: &dyn Fn() -> bool,
) -> Result<(MotionSequence, GenerationProvenance)> {
    let len = motion.len();
    if request.keep.len() != len {
        return Err(PmgError::schema(
            "keep",
            format!("expected {len} entries, got {}", request.keep.len()),
        ));
    }
    if motion.features.ncols() != model.skeleton.layout().dim() {
        return Err(PmgError::schema("motion.frames", "feature width does not match the model"));
    }
    let kept: Vec<usize> = (1..=len).filter(|&p| request.keep[p - 1]).collect();
    if kept.len() == len {
        let plan = StagePlan {
            stages: 0,
            requested_stages: request.stages,
            len,
            given: kept,
            groups: Vec::new(),
            dis: vec![0; len],
            max_dis: 0,
        };
        return Ok((
            motion.clone(),
            GenerationProvenance {
                plan,
                stages: Vec::new(),
                sampler: request.sampler.id(),
                seed: request.seed,
                guidance: request.guidance,
                schedule: model.schedule.fingerprint(),
                origin: vec!["kept".into(); len],
                notes: vec!["every frame kept; input returned unchanged".into()],
                raw_features: motion.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            },
        ));
    }
    if kept.is_empty() {
        let mut req = GenerationRequest::new(request.text.clone(), Vec::new(), len);
        req.stages = request.stages;
        req.guidance = request.guidance;
        req.sampler = request.sampler;
        req.seed = request.seed;
        return generate_with_abort(model, &req, abort);
    }
    request.text.validate(model.vocab.len())?;
    let plan = plan_stages(len, &kept, request.stages)?;
    let mut buffer = model.normalizer.normalize(&motion.features);
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let traces = progressive_sample(
        model.denoiser(),
        &plan,
        &request.text.tokens,
        &mut buffer,
        request.guidance,
        request.sampler,
        &mut rng,
        plan.stages,
        abort,
    )?;
    let mut features = model.normalizer.denormalize(&buffer);
    let raw_features = features.rows().into_iter().map(|r| r.to_vec()).collect();
    for &p in &kept {
        features.row_mut(p - 1).assign(&motion.features.row(p - 1));
    }
    let anchors: Vec<usize> = kept.iter().map(|p| p - 1).collect();
    anchor_root(&mut features, &motion.layout(), &anchors);
    recompute_derived_at(&mut features, &motion.layout(), &unsampled_velocity_frames(&plan));
    for &p in &kept {
        features.row_mut(p - 1).assign(&motion.features.row(p - 1));
    }
    let origin = (1..=len)
        .map(|p| match plan.stage_of(p) {
            0 => "kept".to_string(),
            k => format!("stage-{k}"),
        })
        .collect();
    let out = MotionSequence::new(features, motion.fps, motion.skeleton.clone())?;
    Ok((
        out,
        GenerationProvenance {
            plan,
            stages: traces,
            sampler: request.sampler.id(),
            seed: request.seed,
            guidance: request.guidance,
            schedule: model.schedule.fingerprint(),
            origin,
            notes: vec!["kept frames copied verbatim; root pinned at kept frames; generated frames keep their sampled joint velocities".into()],
            raw_features,
        },
    ))
}
