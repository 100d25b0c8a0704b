//! Implementations behind the `pmg` subcommands.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;

use pmg_core::corpus::{corpus_vocabulary, make_corpus_with, read_corpus, write_corpus};
use pmg_core::eval::suite::real_retrieval;
use pmg_core::eval::{evaluate, train_motionclip, EvalReport, EvalSuiteConfig};
use pmg_core::motion::motion_to_json;
use pmg_core::{
    generate, Checkpoint, EvaluatorCheckpoint, GenerationProvenance, Model, MotionSequence, PmgConfig, Sampler,
    TextPrompt, TrainStepRecord, TrainingRun,
};

use crate::api::GenerateBody;

pub type Pairs = Vec<(TextPrompt, MotionSequence)>;

/// Reads a corpus directory, or renders the configured procedural corpus.
pub fn training_corpus(config: &PmgConfig, dir: Option<&Path>) -> anyhow::Result<Pairs> {
    match dir {
        Some(d) => Ok(read_corpus(d, &corpus_vocabulary())
            .with_context(|| format!("reading corpus {}", d.display()))?
            .into_iter()
            .map(|(_, t, m)| (t, m))
            .collect()),
        None => Ok(config.corpus.train_set()),
    }
}

pub fn write_procedural_corpus(config: &PmgConfig, seed: u64, samples: usize, out: &Path) -> anyhow::Result<usize> {
    let corpus = make_corpus_with(seed, samples, &config.corpus.corpus_config());
    write_corpus(out, &corpus, Some(seed))?;
    Ok(corpus.len())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub step: u64,
    pub loss: f64,
    /// Per batch sample.
    pub k: Vec<usize>,
    pub replaced: Vec<bool>,
    pub text_dropped: Vec<bool>,
}

impl From<&TrainStepRecord> for TrainLogLine {
    fn from(r: &TrainStepRecord) -> Self {
        Self {
            step: r.step,
            loss: r.loss,
            k: r.samples.iter().map(|s| s.k).collect(),
            replaced: r.samples.iter().map(|s| s.replaced).collect(),
            text_dropped: r.samples.iter().map(|s| s.text_dropped).collect(),
        }
    }
}

pub struct TrainOptions<'a> {
    pub seed: u64,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    /// Save every this many steps as well as at the end; 0 saves only at the end.
    pub checkpoint_every: u64,
}

/// Trains (or resumes) a generator, writing one NDJSON line per step to `log`.
pub fn train(config: PmgConfig, corpus: &[(TextPrompt, MotionSequence)], opts: &TrainOptions, log: &mut dyn Write) -> anyhow::Result<Checkpoint> {
    let mut run = match opts.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let mut run = TrainingRun::resume(&ckpt, corpus)?;
            run.trainer.config.steps = config.train.steps;
            run.config.train.steps = config.train.steps;
            run
        }
        None => TrainingRun::new(config, corpus_vocabulary(), corpus, opts.seed)?,
    };
    let data = run.data.clone();
    while run.trainer.step < run.trainer.config.steps {
        let rec = run.trainer.train_step(&data)?;
        serde_json::to_writer(&mut *log, &TrainLogLine::from(&rec))?;
        log.write_all(b"\n")?;
        if opts.checkpoint_every > 0 && rec.step % opts.checkpoint_every == 0 {
            run.checkpoint().save(opts.out)?;
        }
    }
    let ckpt = run.checkpoint();
    ckpt.save(opts.out)?;
    Ok(ckpt)
}

pub fn train_evaluator(config: &PmgConfig, corpus: &[(TextPrompt, MotionSequence)], seed: u64, out: &Path, log: &mut dyn Write) -> anyhow::Result<EvaluatorCheckpoint> {
    let pairs: Vec<_> = corpus
        .iter()
        .filter(|(t, _)| !t.is_empty())
        .map(|(t, m)| (t.tokens.clone(), m))
        .collect();
    let Some((_, first)) = corpus.first() else {
        bail!("empty corpus");
    };
    let mut io_err = None;
    let ev = train_motionclip(&pairs, corpus_vocabulary().len(), config.eval, seed, |e| {
        if let Err(err) = writeln!(log, "{}", json!({"epoch": e.epoch, "loss": e.mean_loss})) {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let ckpt = EvaluatorCheckpoint::new(&ev, first.skeleton.clone(), seed);
    ckpt.save(out)?;
    Ok(ckpt)
}

pub fn load_model(path: &Path) -> anyhow::Result<Model> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Model::from_checkpoint(&ckpt, true)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateOutput {
    pub motion: serde_json::Value,
    pub provenance: GenerationProvenance,
}

pub fn generate_from_body(model: &Model, body: GenerateBody) -> anyhow::Result<GenerateOutput> {
    let req = body
        .into_request(model, &model.config.sampling)
        .map_err(|e| anyhow::anyhow!("{}: {}", e.field, e.message))?;
    let (motion, provenance) = generate(model, &req)?;
    Ok(GenerateOutput {
        motion: motion_to_json(&motion),
        provenance,
    })
}

pub const SUITES: [&str; 4] = ["standard", "text-only", "single-stage", "ancestral"];

/// Named evaluation presets layered over the configured suite.
pub fn suite(name: &str, base: &EvalSuiteConfig) -> anyhow::Result<EvalSuiteConfig> {
    let mut cfg = *base;
    match name {
        "standard" => {}
        "text-only" => cfg.n_given = 0,
        "single-stage" => cfg.stages = 1,
        "ancestral" => cfg.sampler = Sampler::Ancestral,
        other => bail!("unknown suite `{other}`, expected one of {}", SUITES.join(", ")),
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub suite: String,
    pub seed: u64,
    pub step: u64,
    pub settings: EvalSuiteConfig,
    pub report: EvalReport,
    /// Retrieval precision of the real test motions, for reference.
    pub real_r_precision: Vec<f64>,
}

pub fn eval(model: &Model, evaluator: &EvaluatorCheckpoint, suite_name: &str, seed: u64) -> anyhow::Result<EvalOutput> {
    let mut settings = suite(suite_name, &model.config.suite)?;
    settings.seed = seed;
    let ev = evaluator.evaluator()?;
    let test = model.config.corpus.test_set();
    let report = evaluate(model, &ev, &test, &settings)?;
    Ok(EvalOutput {
        suite: suite_name.into(),
        seed,
        step: model.step,
        settings,
        report,
        real_r_precision: real_retrieval(&ev, &test, &settings)?,
    })
}
