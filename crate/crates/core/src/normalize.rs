use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{PmgError, Result};
use crate::motion::MotionSequence;

/// Channels whose corpus standard deviation falls below this are left unscaled.
pub const MIN_STD: f64 = 1e-8;

/// Slack applied to the fitted range when clamping predicted clean samples.
pub const CLIP_MARGIN: f64 = 1.25;

/// Per-channel affine normalization fitted on a training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Largest absolute normalized value seen per channel; empty when unknown.
    #[serde(default)]
    pub max_abs: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            max_abs: Vec::new(),
        }
    }

    /// Two-pass mean and population standard deviation over all frames, plus the
    /// normalized range.
    pub fn fit<'a>(motions: impl IntoIterator<Item = &'a MotionSequence> + Clone) -> Result<Self> {
        let mut sum: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for m in motions.clone() {
            let s = sum.get_or_insert_with(|| vec![0.0; m.features.ncols()]);
            if m.features.ncols() != s.len() {
                return Err(PmgError::Shape("motions disagree on feature width".into()));
            }
            for row in m.features.rows() {
                for (acc, v) in s.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            count += m.len();
        }
        let sum = sum.ok_or_else(|| PmgError::InsufficientSamples("empty corpus".into()))?;
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; mean.len()];
        for m in motions.clone() {
            for row in m.features.rows() {
                for ((acc, v), mu) in sq.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
        }
        let std: Vec<f64> = sq
            .iter()
            .map(|q| {
                let sd = (q / n).sqrt();
                if sd < MIN_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        let mut max_abs = vec![0.0f64; mean.len()];
        for m in motions {
            for row in m.features.rows() {
                for (c, v) in row.iter().enumerate() {
                    max_abs[c] = max_abs[c].max(((v - mean[c]) / std[c]).abs());
                }
            }
        }
        Ok(Self { mean, std, max_abs })
    }

    /// Per-channel clamp for predicted clean samples in normalized space.
    pub fn clip_bounds(&self) -> Option<Vec<f64>> {
        (self.max_abs.len() == self.dim()).then(|| self.max_abs.iter().map(|m| m * CLIP_MARGIN).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }

    /// Normalizes the provided channels of a partial frame; absent channels become 0,
    /// i.e. the corpus mean.
    pub fn normalize_partial(&self, row: &[f64], mask: &[bool]) -> Vec<f64> {
        row.iter()
            .zip(mask)
            .enumerate()
            .map(|(c, (v, m))| if *m { (v - self.mean[c]) / self.std[c] } else { 0.0 })
            .collect()
    }
}
