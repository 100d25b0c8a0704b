//! Linear-beta noise schedule, forward noising, and the two reverse samplers used
//! for generation: the ancestral sampler and a deterministic strided sampler.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PmgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub fast_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            fast_steps: 10,
        }
    }
}

/// Tables are indexed by the diffusion step `t` directly; index 0 is the clean data
/// (`alpha_bar[0] = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub config: ScheduleConfig,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub posterior_variances: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t_max = config.steps;
        if t_max < 2 {
            return Err(PmgError::Config("diffusion.T must be at least 2".into()));
        }
        if !(config.beta_start > 0.0
            && config.beta_end < 1.0
            && config.beta_start <= config.beta_end)
        {
            return Err(PmgError::Config(
                "betas must satisfy 0 < beta_start <= beta_end < 1".into(),
            ));
        }
        if config.fast_steps == 0 || config.fast_steps > t_max {
            return Err(PmgError::Config(format!(
                "diffusion.fast_steps must lie in 1..={t_max}"
            )));
        }
        let mut betas = vec![0.0; t_max + 1];
        for (t, b) in betas.iter_mut().enumerate().skip(1) {
            *b = config.beta_start
                + (config.beta_end - config.beta_start) * (t - 1) as f64 / (t_max - 1) as f64;
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        let mut posterior_variances = vec![0.0; t_max + 1];
        for t in 1..=t_max {
            posterior_variances[t] =
                (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t];
        }
        Ok(Self {
            config,
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
        })
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "linear:T={}:beta_start={:e}:beta_end={:e}",
            self.config.steps, self.config.beta_start, self.config.beta_end
        )
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.config.steps {
            return Err(PmgError::StepOutOfRange {
                t,
                max: self.config.steps,
            });
        }
        Ok(())
    }

    /// Samples `x_t ~ q(x_t | x_0)` as `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn add_noise(&self, x0: &Array2<f64>, t: usize, eps: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_step(t)?;
        same_shape(x0, eps)?;
        let a = self.alpha_bars[t].sqrt();
        let b = (1.0 - self.alpha_bars[t]).sqrt();
        Ok(x0 * a + eps * b)
    }

    /// One step of the ancestral sampler with the posterior variance fixed to
    /// `beta_tilde_t`. No noise is injected at `t = 1`.
    pub fn ancestral_step(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        eps_hat: &Array2<f64>,
        z: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if t == 0 {
            return Err(PmgError::StepOutOfRange {
                t,
                max: self.config.steps,
            });
        }
        self.check_step(t)?;
        same_shape(x_t, eps_hat)?;
        let coef = self.betas[t] / (1.0 - self.alpha_bars[t]).sqrt();
        let mut mean = (x_t - &(eps_hat * coef)) / self.alphas[t].sqrt();
        if t > 1 {
            same_shape(x_t, z)?;
            mean.scaled_add(self.posterior_variances[t].sqrt(), z);
        }
        Ok(mean)
    }

    /// Deterministic jump from `t_cur` to `t_prev < t_cur` through the implied clean
    /// sample. Returns that clean estimate when `t_prev = 0`.
    pub fn fast_step(
        &self,
        x_t: &Array2<f64>,
        t_cur: usize,
        t_prev: usize,
        eps_hat: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_step(t_cur)?;
        if t_prev >= t_cur {
            return Err(PmgError::Config(format!(
                "fast_step requires t_prev < t_cur, got {t_prev} >= {t_cur}"
            )));
        }
        same_shape(x_t, eps_hat)?;
        let x0 = self.predict_x0(x_t, t_cur, eps_hat);
        if t_prev == 0 {
            return Ok(x0);
        }
        let a = self.alpha_bars[t_prev];
        Ok(x0 * a.sqrt() + eps_hat * (1.0 - a).sqrt())
    }

    /// Noise estimate consistent with the clean estimate clamped to `±bound` per column.
    pub fn clamp_eps(&self, x_t: &Array2<f64>, t: usize, eps_hat: &Array2<f64>, bound: &[f64]) -> Result<Array2<f64>> {
        self.check_step(t)?;
        same_shape(x_t, eps_hat)?;
        if bound.len() != x_t.ncols() {
            return Err(PmgError::Shape(format!(
                "clip bound has {} channels, sample has {}",
                bound.len(),
                x_t.ncols()
            )));
        }
        let a = self.alpha_bars[t];
        let mut x0 = self.predict_x0(x_t, t, eps_hat);
        for mut row in x0.rows_mut() {
            for (v, b) in row.iter_mut().zip(bound) {
                *v = v.clamp(-b, *b);
            }
        }
        Ok((x_t - &(x0 * a.sqrt())) / (1.0 - a).sqrt())
    }

    pub fn predict_x0(&self, x_t: &Array2<f64>, t: usize, eps_hat: &Array2<f64>) -> Array2<f64> {
        let a = self.alpha_bars[t];
        (x_t - &(eps_hat * (1.0 - a).sqrt())) / a.sqrt()
    }

    /// Visited steps of the strided sampler, e.g. `[1000, 900, ..., 100]` for
    /// `T = 1000` and ten steps; the final jump goes to 0.
    pub fn fast_timesteps(&self, steps: usize) -> Vec<usize> {
        let t_max = self.config.steps;
        let steps = steps.clamp(1, t_max);
        let mut out: Vec<usize> = (0..steps).map(|i| (steps - i) * t_max / steps).collect();
        out.dedup();
        out
    }

    pub fn timesteps(&self, sampler: Sampler) -> Vec<usize> {
        match sampler {
            Sampler::Ancestral => (1..=self.config.steps).rev().collect(),
            Sampler::Fast { steps } => self.fast_timesteps(steps),
        }
    }
}

/// Reverse sampler choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampler {
    Ancestral,
    /// Deterministic strided sampler standing in for a multistep solver.
    Fast { steps: usize },
}

impl Sampler {
    pub fn id(&self) -> String {
        match self {
            Sampler::Ancestral => "ddpm-ancestral".into(),
            Sampler::Fast { steps } => format!("strided-deterministic-{steps}"),
        }
    }
}

/// Classifier-free guidance: `(1 + s) eps_cond - s eps_uncond`.
///
/// Evaluated as `eps_cond + s (eps_cond - eps_uncond)` so that equal branches return
/// `eps_cond` exactly for every `s`.
pub fn cfg_combine(eps_cond: &Array2<f64>, eps_uncond: &Array2<f64>, s: f64) -> Array2<f64> {
    let mut out = eps_cond - eps_uncond;
    out.mapv_inplace(|d| d * s);
    out + eps_cond
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(PmgError::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::new(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = sched();
        assert_eq!(s.betas[1], 1e-4);
        assert!((s.betas[1000] - 0.02).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.betas[t] > 0.0 && s.betas[t] < 1.0);
            assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
            if t > 1 {
                assert!(s.betas[t] >= s.betas[t - 1]);
            }
        }
        assert_eq!(s.posterior_variances[1], 0.0);
    }

    #[test]
    fn add_noise_edge_cases() {
        let s = sched();
        let x0 = array![[1.0, -2.0], [0.5, 3.0]];
        let eps = array![[0.3, 0.1], [-1.0, 2.0]];
        assert_eq!(s.add_noise(&x0, 0, &eps).unwrap(), x0);
        let zero = Array2::zeros((2, 2));
        let ray = s.add_noise(&x0, 500, &zero).unwrap();
        assert_eq!(ray, &x0 * s.alpha_bars[500].sqrt());
        // abar_T by an independent product over 1 - beta_t
        let abar_t: f64 = (1..=1000)
            .map(|t| 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0))
            .product();
        let at_t = s.add_noise(&zero, 1000, &eps).unwrap();
        for (a, e) in at_t.iter().zip(eps.iter()) {
            assert!((a - (1.0 - abar_t).sqrt() * e).abs() < 1e-12);
        }
        assert!(s.add_noise(&x0, 1001, &eps).is_err());
    }

    #[test]
    fn cfg_identities() {
        let c = array![[1.0]];
        let u = array![[0.5]];
        assert_eq!(cfg_combine(&c, &u, 2.0), array![[2.0]]);
        let c = array![[0.123456789, -7.5], [1e-300, 3.0]];
        let u = array![[9.0, 2.0], [-4.0, 1.0]];
        assert_eq!(cfg_combine(&c, &u, 0.0), c);
        for s in [0.0, 1.0, 2.0, 3.5, 5.0] {
            assert_eq!(cfg_combine(&c, &c, s), c);
        }
    }

    #[test]
    fn final_ancestral_step_is_deterministic() {
        let s = sched();
        let x = array![[0.2, -0.1]];
        let eps = array![[0.05, 0.3]];
        let a = s.ancestral_step(&x, 1, &eps, &array![[10.0, -10.0]]).unwrap();
        let b = s.ancestral_step(&x, 1, &eps, &array![[0.0, 0.0]]).unwrap();
        assert_eq!(a, b);
        assert!(s.ancestral_step(&x, 0, &eps, &eps).is_err());
    }

    #[test]
    fn ancestral_mean_matches_closed_form_posterior() {
        // With the true noise, the deterministic part of the step equals the posterior
        // mean  sqrt(abar_{t-1}) beta_t / (1 - abar_t) x0 + sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) x_t.
        let s = sched();
        let x0 = array![[0.7, -1.3, 2.0]];
        let eps = array![[0.4, 0.9, -0.2]];
        let zero = Array2::zeros((1, 3));
        for t in [2usize, 10, 250, 999] {
            let xt = s.add_noise(&x0, t, &eps).unwrap();
            let got = s.ancestral_step(&xt, t, &eps, &zero).unwrap();
            let ab = s.alpha_bars[t];
            let ab_prev = s.alpha_bars[t - 1];
            let c0 = ab_prev.sqrt() * s.betas[t] / (1.0 - ab);
            let ct = s.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let want = &x0 * c0 + &xt * ct;
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-10, "t={t}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn fast_step_inverts_add_noise() {
        let s = sched();
        let x0 = array![[0.7, -1.3], [2.0, 0.01]];
        let eps = array![[0.4, 0.9], [-0.2, 1.5]];
        let xt = s.add_noise(&x0, 700, &eps).unwrap();
        let back = s.fast_step(&xt, 700, 0, &eps).unwrap();
        for (a, b) in back.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mid = s.fast_step(&xt, 700, 300, &eps).unwrap();
        let expect = s.add_noise(&x0, 300, &eps).unwrap();
        for (a, b) in mid.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(s.fast_step(&xt, 300, 300, &eps).is_err());
    }

    #[test]
    fn fast_timesteps_are_uniform() {
        let s = sched();
        assert_eq!(
            s.fast_timesteps(10),
            vec![1000, 900, 800, 700, 600, 500, 400, 300, 200, 100]
        );
        assert_eq!(s.fast_timesteps(1), vec![1000]);
        assert_eq!(s.timesteps(Sampler::Ancestral).len(), 1000);
    }
}
