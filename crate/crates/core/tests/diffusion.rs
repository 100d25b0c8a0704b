use ndarray::{Array2, Axis};
use pmg_core::diffusion::{cfg_combine, DiffusionSchedule, ScheduleConfig};
use pmg_core::nn::standard_normal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schedule() -> DiffusionSchedule {
    DiffusionSchedule::new(ScheduleConfig::default()).unwrap()
}

#[test]
fn alpha_bar_matches_running_product() {
    let s = schedule();
    let mut prod = 1.0;
    for t in 1..=1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
        prod *= 1.0 - beta;
        assert!((s.alpha_bars[t] - prod).abs() < 1e-14, "t={t}");
    }
    // x0 = 0 at t = T leaves only the scaled noise.
    let eps = Array2::from_elem((1, 3), 1.0);
    let xt = s.add_noise(&Array2::zeros((1, 3)), 1000, &eps).unwrap();
    assert!((xt[[0, 0]] - (1.0 - prod).sqrt()).abs() < 1e-14);
}

#[test]
fn add_noise_marginal_moments() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    for _ in 0..20 {
        let x0v: f64 = rng.random_range(-2.0..2.0);
        let t = rng.random_range(1..=1000);
        let x0 = Array2::from_elem((n, 1), x0v);
        let eps = standard_normal(&mut rng, n, 1);
        let xt = s.add_noise(&x0, t, &eps).unwrap();
        let ab = s.alpha_bars[t];
        let mean = xt.mean().unwrap();
        let var = xt.var_axis(Axis(0), 1.0)[0];
        let se_mean = ((1.0 - ab) / n as f64).sqrt();
        let se_var = (1.0 - ab) * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - ab.sqrt() * x0v).abs() < 3.0 * se_mean, "t={t} mean {mean}");
        assert!((var - (1.0 - ab)).abs() < 3.0 * se_var, "t={t} var {var}");
    }
}

/// Optimal noise predictor for x0 ~ N(mu, sigma): s * (a^2 sigma + s^2 I)^-1 (x_t - a mu).
fn gaussian_eps(x: &Array2<f64>, ab: f64, mu: [f64; 2], sigma: [[f64; 2]; 2]) -> Array2<f64> {
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let c = [
        [ab * sigma[0][0] + s * s, ab * sigma[0][1]],
        [ab * sigma[1][0], ab * sigma[1][1] + s * s],
    ];
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let inv = [[c[1][1] / det, -c[0][1] / det], [-c[1][0] / det, c[0][0] / det]];
    let mut out = Array2::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let d = [row[0] - a * mu[0], row[1] - a * mu[1]];
        out[[i, 0]] = s * (inv[0][0] * d[0] + inv[0][1] * d[1]);
        out[[i, 1]] = s * (inv[1][0] * d[0] + inv[1][1] * d[1]);
    }
    out
}

#[test]
fn ancestral_sampling_with_optimal_predictor_recovers_gaussian() {
    let s = schedule();
    let mu = [1.5, -0.5];
    let sigma = [[0.5, 0.1], [0.1, 0.3]];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let mut x = standard_normal(&mut rng, n, 2);
    for t in (1..=1000).rev() {
        let eps = gaussian_eps(&x, s.alpha_bars[t], mu, sigma);
        let z = standard_normal(&mut rng, n, 2);
        x = s.ancestral_step(&x, t, &eps, &z).unwrap();
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let var = x.var_axis(Axis(0), 1.0);
    for c in 0..2 {
        assert!((mean[c] - mu[c]).abs() < 0.05 * mu[c].abs(), "mean {mean}");
        assert!((var[c] - sigma[c][c]).abs() < 0.1 * sigma[c][c], "var {var}");
    }
}

#[test]
fn fast_step_inverts_add_noise_on_a_noiseless_ray() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = standard_normal(&mut rng, 4, 3);
    let eps = standard_normal(&mut rng, 4, 3);
    for t in [1, 37, 500, 1000] {
        let xt = s.add_noise(&x0, t, &eps).unwrap();
        let back = s.fast_step(&xt, t, 0, &eps).unwrap();
        let err = (&back - &x0).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(err < 1e-9, "t={t} err {err}");
        if t > 1 {
            let prev = s.fast_step(&xt, t, t / 2, &eps).unwrap();
            let expect = s.add_noise(&x0, t / 2, &eps).unwrap();
            assert!((&prev - &expect).mapv(f64::abs).sum() < 1e-9);
        }
    }
    assert!(s.fast_step(&x0, 10, 10, &eps).is_err());
}

#[test]
fn ancestral_step_mean_matches_closed_form_posterior() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = standard_normal(&mut rng, 2, 4);
    let eps = standard_normal(&mut rng, 2, 4);
    let zero = Array2::zeros((2, 4));
    for t in [2, 100, 999] {
        let xt = s.add_noise(&x0, t, &eps).unwrap();
        let got = s.ancestral_step(&xt, t, &eps, &zero).unwrap();
        let (ab, abp, beta) = (s.alpha_bars[t], s.alpha_bars[t - 1], s.betas[t]);
        let c0 = abp.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab);
        let expect = &x0 * c0 + &xt * ct;
        assert!((&got - &expect).mapv(f64::abs).sum() < 1e-9, "t={t}");
    }
    assert!(s.ancestral_step(&x0, 0, &eps, &zero).is_err());
}

#[test]
fn fast_schedule_strides_evenly() {
    let s = schedule();
    assert_eq!(s.fast_timesteps(10), vec![1000, 900, 800, 700, 600, 500, 400, 300, 200, 100]);
    assert_eq!(s.fast_timesteps(1), vec![1000]);
    assert_eq!(s.fast_timesteps(1000).len(), 1000);
}

#[test]
fn guidance_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = standard_normal(&mut rng, 5, 7);
    let u = standard_normal(&mut rng, 5, 7);
    let zero = cfg_combine(&c, &u, 0.0);
    assert!(zero.iter().zip(c.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    for scale in [0.0, 1.0, 2.0, 5.0] {
        let same = cfg_combine(&c, &c, scale);
        assert!(same.iter().zip(c.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "s={scale}");
    }
    let two = cfg_combine(&Array2::from_elem((1, 1), 1.0), &Array2::from_elem((1, 1), 0.5), 2.0);
    assert_eq!(two[[0, 0]], 2.0);
}
