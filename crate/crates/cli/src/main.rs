use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};

use pmg_cli::api::GenerateBody;
use pmg_cli::commands::{self, TrainOptions};
use pmg_cli::service::{self, ServiceConfig};
use pmg_cli::sweep::{self, ModelSource, SweepSpec};
use pmg_core::{decode_motion_file, EvaluatorCheckpoint, KeyframeSpec, PmgConfig};

#[derive(Parser)]
#[command(name = "pmg", version, about = "Progressive text- and keyframe-conditioned motion generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural corpus as motion files plus a manifest.
    Corpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a generator; writes one JSON line per step.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory; defaults to the configured procedural corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Training log file; defaults to stdout.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Train the retrieval evaluator used by `eval` and `sweep`.
    TrainEvaluator {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Generate one motion.
    Generate {
        #[arg(long, env = "PMG_CHECKPOINT")]
        ckpt: PathBuf,
        /// JSON request with the same schema as `POST /generate`.
        #[arg(long, conflicts_with_all = ["text", "length"])]
        request: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        length: Option<usize>,
        /// Motion file to take keyframes from.
        #[arg(long)]
        keyframes_from: Option<PathBuf>,
        /// 1-based frame positions, comma separated.
        #[arg(long, value_delimiter = ',')]
        positions: Vec<usize>,
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a generator on the held-out set.
    Eval {
        #[arg(long, env = "PMG_CHECKPOINT")]
        ckpt: PathBuf,
        #[arg(long)]
        evaluator: PathBuf,
        #[arg(long, default_value = "standard")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a one-axis ablation; writes `<out>.json` and `<out>.csv`.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<PmgConfig> {
    match path {
        Some(p) => PmgConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(PmgConfig::default()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.flush()?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match Cli::parse().command {
        Command::Corpus { config, seed, samples, out } => {
            let cfg = load_config(config.as_deref())?;
            let n = commands::write_procedural_corpus(
                &cfg,
                seed.unwrap_or(cfg.corpus.seed),
                samples.unwrap_or(cfg.corpus.samples),
                &out,
            )?;
            tracing::info!(samples = n, dir = %out.display(), "corpus written");
        }
        Command::Train { config, seed, out, corpus, log, resume, checkpoint_every } => {
            let cfg = load_config(config.as_deref())?;
            let data = commands::training_corpus(&cfg, corpus.as_deref())?;
            let mut sink: Box<dyn Write> = match log {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(BufWriter::new(std::io::stdout().lock())),
            };
            let opts = TrainOptions {
                seed,
                out: &out,
                resume: resume.as_deref(),
                checkpoint_every,
            };
            let ckpt = commands::train(cfg, &data, &opts, &mut sink)?;
            sink.flush()?;
            tracing::info!(step = ckpt.step, path = %out.display(), "checkpoint saved");
        }
        Command::TrainEvaluator { config, seed, out, corpus } => {
            let cfg = load_config(config.as_deref())?;
            let data = commands::training_corpus(&cfg, corpus.as_deref())?;
            commands::train_evaluator(&cfg, &data, seed, &out, &mut std::io::stderr())?;
        }
        Command::Generate {
            ckpt,
            request,
            text,
            length,
            keyframes_from,
            positions,
            stages,
            guidance,
            seed,
            out,
        } => {
            let model = commands::load_model(&ckpt)?;
            let body = match request {
                Some(p) => pmg_cli::api::parse_body(&std::fs::read(&p)?)
                    .map_err(|e| anyhow::anyhow!("{}: {}: {}", p.display(), e.field, e.message))?,
                None => {
                    let keyframes = match &keyframes_from {
                        Some(p) => {
                            let motion = decode_motion_file(&std::fs::read(p)?)?;
                            positions
                                .iter()
                                .map(|&i| KeyframeSpec::from_motion(&motion, i))
                                .collect::<Result<Vec<_>, _>>()?
                        }
                        None if positions.is_empty() => Vec::new(),
                        None => anyhow::bail!("--positions needs --keyframes-from"),
                    };
                    GenerateBody {
                        text: text.unwrap_or_default(),
                        keyframes,
                        length: length.context("--length is required without --request")?,
                        stages,
                        guidance,
                        sampler: None,
                        seed,
                    }
                }
            };
            write_json(&out, &commands::generate_from_body(&model, body)?)?;
        }
        Command::Eval { ckpt, evaluator, suite, seed, report } => {
            let model = commands::load_model(&ckpt)?;
            let ev = EvaluatorCheckpoint::load(&evaluator)?;
            write_json(&report, &commands::eval(&model, &ev, &suite, seed)?)?;
        }
        Command::Sweep { spec, out } => {
            let spec: SweepSpec = toml::from_str(&std::fs::read_to_string(&spec)?)?;
            spec.validate()?;
            let cfg = load_config(spec.config.as_deref())?;
            let ev = EvaluatorCheckpoint::load(&spec.evaluator)?.evaluator()?;
            let test = cfg.corpus.test_set();
            let progress = |r: &sweep::SweepRow| {
                tracing::info!(axis = %r.axis, value = r.value, seed = r.seed, fid = r.report.fid, "row done")
            };
            let rows = if spec.axis.needs_training() {
                let corpus = cfg.corpus.train_set();
                sweep::run_sweep(spec.axis, &spec.values, &spec.seeds, &cfg, ModelSource::Train(&corpus), &ev, &test, progress)?
            } else {
                let model = commands::load_model(spec.checkpoint.as_deref().expect("validated"))?;
                let mut base = cfg;
                base.suite = model.config.suite;
                sweep::run_sweep(spec.axis, &spec.values, &spec.seeds, &base, ModelSource::Trained(&model), &ev, &test, progress)?
            };
            write_json(&out.with_extension("json"), &rows)?;
            sweep::write_csv(&rows, File::create(out.with_extension("csv"))?)?;
        }
        Command::Serve { config, bind, checkpoint } => {
            let mut cfg = ServiceConfig::load(config.as_deref())?;
            if let Some(b) = bind {
                cfg.bind = b;
            }
            if let Some(c) = checkpoint {
                cfg.checkpoint = c;
            }
            let ckpt = pmg_core::Checkpoint::load(&cfg.checkpoint)
                .with_context(|| format!("loading {}", cfg.checkpoint.display()))?;
            let model = pmg_core::Model::from_checkpoint(&ckpt, cfg.ema)?;
            tokio::runtime::Runtime::new()?.block_on(service::serve(cfg, model))?;
        }
    }
    Ok(())
}
