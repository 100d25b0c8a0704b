//! One-axis ablation sweeps over training or inference settings.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};

use pmg_core::corpus::corpus_vocabulary;
use pmg_core::eval::{evaluate, EvalReport, EvalSuiteConfig, Evaluator};
use pmg_core::{Model, MotionSequence, PmgConfig, TextPrompt, TrainingRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Stage count at inference.
    K,
    #[serde(rename = "tau")]
    Tau,
    #[serde(rename = "eta")]
    Eta,
    /// Guidance scale.
    #[serde(rename = "s")]
    S,
    #[serde(rename = "n_given_frames")]
    NGivenFrames,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "K",
            SweepAxis::Tau => "tau",
            SweepAxis::Eta => "eta",
            SweepAxis::S => "s",
            SweepAxis::NGivenFrames => "n_given_frames",
        }
    }

    /// Training-time axes need one model per value and seed.
    pub fn needs_training(self) -> bool {
        matches!(self, SweepAxis::Tau | SweepAxis::Eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Base configuration; defaults when absent.
    #[serde(default)]
    pub config: Option<PathBuf>,
    /// Trained generator, required for inference-time axes.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub evaluator: PathBuf,
}

impl SweepSpec {
    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(!self.values.is_empty(), "sweep needs at least one value");
        ensure!(!self.seeds.is_empty(), "sweep needs at least one seed");
        for &v in &self.values {
            let ok = match self.axis {
                SweepAxis::K => v >= 1.0 && v.fract() == 0.0,
                SweepAxis::NGivenFrames => v >= 0.0 && v.fract() == 0.0,
                SweepAxis::Tau | SweepAxis::Eta => (0.0..=1.0).contains(&v),
                SweepAxis::S => v >= 0.0 && v.is_finite(),
            };
            ensure!(ok, "value {v} is outside the range of axis {}", self.axis.name());
        }
        if !self.axis.needs_training() && self.checkpoint.is_none() {
            bail!("axis {} needs a trained checkpoint", self.axis.name());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub report: EvalReport,
}

/// Where sweep models come from.
pub enum ModelSource<'a> {
    Trained(&'a Model),
    /// Train one model per value and seed on this corpus with the base budget.
    Train(&'a [(TextPrompt, MotionSequence)]),
}

fn suite_for(axis: SweepAxis, value: f64, seed: u64, base: &EvalSuiteConfig) -> EvalSuiteConfig {
    let mut cfg = *base;
    cfg.seed = seed;
    match axis {
        SweepAxis::K => cfg.stages = value as usize,
        SweepAxis::S => cfg.guidance = value,
        SweepAxis::NGivenFrames => cfg.n_given = value as usize,
        SweepAxis::Tau | SweepAxis::Eta => {}
    }
    cfg
}

/// One row per value per seed, in value-major order.
pub fn run_sweep(
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    base: &PmgConfig,
    source: ModelSource<'_>,
    evaluator: &Evaluator,
    test: &[(TextPrompt, MotionSequence)],
    mut progress: impl FnMut(&SweepRow),
) -> anyhow::Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        for &seed in seeds {
            let suite = suite_for(axis, value, seed, &base.suite);
            let report = match &source {
                ModelSource::Trained(model) => {
                    ensure!(!axis.needs_training(), "axis {} needs training", axis.name());
                    evaluate(model, evaluator, test, &suite)?
                }
                ModelSource::Train(corpus) => {
                    let mut cfg = *base;
                    match axis {
                        SweepAxis::Tau => cfg.train.tau = value,
                        SweepAxis::Eta => cfg.train.eta = value,
                        _ => {}
                    }
                    let mut run = TrainingRun::new(cfg, corpus_vocabulary(), corpus, seed)?;
                    let data = run.data.clone();
                    run.trainer.fit(&data, |_| {})?;
                    evaluate(&run.model()?, evaluator, test, &suite)?
                }
            };
            let row = SweepRow {
                axis: axis.name().into(),
                value,
                seed,
                report,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: [&str; 13] = [
    "axis",
    "value",
    "seed",
    "R-Top1",
    "R-Top2",
    "R-Top3",
    "FID",
    "MM-Dist",
    "Diversity",
    "MM.",
    "AVE_root",
    "APE",
    "samples",
];

pub fn write_csv(rows: &[SweepRow], out: impl Write) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let p = &r.report;
        w.write_record([
            r.axis.clone(),
            r.value.to_string(),
            r.seed.to_string(),
            p.r_top1.to_string(),
            p.r_top2.to_string(),
            p.r_top3.to_string(),
            p.fid.to_string(),
            p.mm_dist.to_string(),
            p.diversity.to_string(),
            p.multimodality.map(|v| v.to_string()).unwrap_or_default(),
            p.ave_root.to_string(),
            p.ape.to_string(),
            p.samples.to_string(),
        ])?;
    }
    w.flush().context("flushing csv")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parses_and_checks_ranges() {
        let spec: SweepSpec = toml::from_str(
            "axis = \"K\"\nvalues = [1, 2, 3]\nseeds = [0]\ncheckpoint = \"m.ckpt\"\nevaluator = \"e.ckpt\"\n",
        )
        .unwrap();
        assert_eq!(spec.axis, SweepAxis::K);
        spec.validate().unwrap();
        let mut bad = spec.clone();
        bad.values = vec![1.5];
        assert!(bad.validate().is_err());
        bad.values = vec![2.0];
        bad.checkpoint = None;
        assert!(bad.validate().is_err());
        bad.axis = SweepAxis::Tau;
        bad.values = vec![1.2];
        assert!(bad.validate().is_err());
        bad.values = vec![0.5];
        bad.validate().unwrap();
    }

    #[test]
    fn suites_vary_one_knob() {
        let base = EvalSuiteConfig::default();
        assert_eq!(suite_for(SweepAxis::K, 1.0, 3, &base).stages, 1);
        assert_eq!(suite_for(SweepAxis::S, 0.0, 3, &base).guidance, 0.0);
        let g = suite_for(SweepAxis::NGivenFrames, 0.0, 3, &base);
        assert_eq!((g.n_given, g.seed, g.stages), (0, 3, base.stages));
    }
}
