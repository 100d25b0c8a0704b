//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero if any
//! criterion fails. Run a subset with `cargo test --test acceptance -- 3 11`.
//!
//! Criteria 6-8 train models and take most of the runtime (about an hour on one core).
//! Setting `PMG_ACCEPTANCE_CACHE=<dir>` stores the trained trend model and evaluator
//! there and reuses them on later runs.

use std::io::{Read, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{array, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use pmg_cli::service::{router, AppState, ServiceConfig};
use pmg_core::autograd::Graph;
use pmg_core::corpus::corpus_vocabulary;
use pmg_core::diffusion::{cfg_combine, DiffusionSchedule, ScheduleConfig};
use pmg_core::eval::suite::keyframe_positions;
use pmg_core::eval::{ave_ape, evaluate, fid, fid_from_moments, r_precision, train_motionclip, EvalReport, Evaluator};
use pmg_core::generator::{attention_profile, Generator, GeneratorConfig, StageInput};
use pmg_core::motion::{motion_from_json, motion_to_json};
use pmg_core::nn::{standard_normal, ParamStore};
use pmg_core::*;

struct Outcome {
    pass: bool,
    /// Soft gates report a violation without failing the run.
    soft_violation: bool,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            soft_violation: false,
            detail: detail.into(),
        }
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    (1, "partition matches brute force", partition_oracle),
    (2, "forward-process marginal moments", diffusion_marginal),
    (3, "ancestral sampling with the analytic predictor", analytic_sampler),
    (4, "guidance identities", guidance_identities),
    (5, "generator gradient check", gradient_check),
    (6, "overfit probe", overfit_probe),
    (7, "more given frames lower toy-FID", trend_given_frames),
    (8, "three stages versus one", stage_ablation),
    (9, "metric unit checks", metric_checks),
    (10, "pseudo-frame replacement", pseudo_frames),
    (11, "service determinism and inpaint identity", service_determinism),
    (12, "attention profile arithmetic", attention_arithmetic),
];

fn main() {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::check(false, format!("panicked: {msg}"))
        });
        let status = match (outcome.pass, outcome.soft_violation) {
            (true, false) => "PASS",
            (true, true) => "PASS (soft gate violated)",
            (false, _) => "FAIL",
        };
        println!(
            "criterion {id:>2} {status}: {name}: {} [{:.1}s]",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn bits(m: &Array2<f64>) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

// 1

/// Distance-to-nearest-given-frame grouping evaluated straight from its definition.
fn brute_force_groups(len: usize, given: &[usize], stages: usize) -> Vec<Vec<usize>> {
    let dis: Vec<usize> = (1..=len)
        .map(|i| given.iter().map(|&p| i.abs_diff(p)).min().unwrap())
        .collect();
    let max_dis = *dis.iter().max().unwrap();
    let mut groups = vec![Vec::new(); stages];
    for i in 1..=len {
        let d = dis[i - 1];
        if d == 0 {
            continue;
        }
        // ceil(d / max_dis * K) in exact integer arithmetic
        let k = (d * stages).div_ceil(max_dis);
        groups[k - 1].push(i);
    }
    groups
}

fn partition_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = rng.random_range(2..=200);
        let count = rng.random_range(1..=4.min(len - 1));
        let mut given = Vec::new();
        while given.len() < count {
            let p = rng.random_range(1..=len);
            if !given.contains(&p) {
                given.push(p);
            }
        }
        let stages = rng.random_range(1..=5);
        let plan = plan_stages(len, &given, stages).unwrap();
        let expect = brute_force_groups(len, &given, stages);
        let mut sorted = given.clone();
        sorted.sort_unstable();
        let same = plan.given == sorted
            && (1..=stages).all(|k| plan.stage_positions(k).unwrap() == expect[k - 1].as_slice());
        if !same {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        mismatches == 0 && secs < 5.0,
        format!("1000 instances, {mismatches} mismatches, {secs:.2}s (limit 5s)"),
    )
}

// 2

fn diffusion_marginal() -> Outcome {
    let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x0v: f64 = rng.random_range(-3.0..3.0);
        let t = rng.random_range(1..=1000);
        let eps = standard_normal(&mut rng, n, 1);
        let xt = s.add_noise(&Array2::from_elem((n, 1), x0v), t, &eps).unwrap();
        let ab = s.alpha_bars[t];
        let mean = xt.mean().unwrap();
        let var = xt.var_axis(Axis(0), 1.0)[0];
        let se_mean = ((1.0 - ab) / n as f64).sqrt();
        let se_var = (1.0 - ab) * (2.0 / (n as f64 - 1.0)).sqrt();
        worst = worst
            .max((mean - ab.sqrt() * x0v).abs() / se_mean)
            .max((var - (1.0 - ab)).abs() / se_var);
    }
    Outcome::check(worst < 3.0, format!("20 (x0, t) pairs x 10k draws, worst deviation {worst:.2} standard errors (limit 3)"))
}

// 3

fn analytic_sampler() -> Outcome {
    let start = Instant::now();
    let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
    let mu = [1.5, -0.8];
    let sigma = [[0.6, 0.2], [0.2, 0.4]];
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = standard_normal(&mut rng, n, 2);
    for t in (1..=1000).rev() {
        // x_t ~ N(a mu, a^2 Sigma + s^2 I); optimal eps = s C^-1 (x_t - a mu)
        let ab = s.alpha_bars[t];
        let (a, sd) = (ab.sqrt(), (1.0 - ab).sqrt());
        let c = [
            [ab * sigma[0][0] + sd * sd, ab * sigma[0][1]],
            [ab * sigma[1][0], ab * sigma[1][1] + sd * sd],
        ];
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let inv = [[c[1][1] / det, -c[0][1] / det], [-c[1][0] / det, c[0][0] / det]];
        let mut eps = Array2::zeros((n, 2));
        for (i, row) in x.rows().into_iter().enumerate() {
            let d = [row[0] - a * mu[0], row[1] - a * mu[1]];
            eps[[i, 0]] = sd * (inv[0][0] * d[0] + inv[0][1] * d[1]);
            eps[[i, 1]] = sd * (inv[1][0] * d[0] + inv[1][1] * d[1]);
        }
        let z = standard_normal(&mut rng, n, 2);
        x = s.ancestral_step(&x, t, &eps, &z).unwrap();
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let var = x.var_axis(Axis(0), 1.0);
    let mean_err = (0..2).map(|c| (mean[c] - mu[c]).abs() / mu[c].abs()).fold(0.0, f64::max);
    let var_err = (0..2).map(|c| (var[c] - sigma[c][c]).abs() / sigma[c][c]).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        mean_err < 0.05 && var_err < 0.10 && secs < 120.0,
        format!("mean error {:.2}% (limit 5%), variance error {:.2}% (limit 10%), {secs:.1}s", 100.0 * mean_err, 100.0 * var_err),
    )
}

// 4

fn guidance_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cond = standard_normal(&mut rng, 7, 5);
    let uncond = standard_normal(&mut rng, 7, 5);
    let zero_scale = bits(&cfg_combine(&cond, &uncond, 0.0)) == bits(&cond);
    let equal_branches = [0.0, 1.0, 2.0, 5.0]
        .iter()
        .all(|&s| bits(&cfg_combine(&cond, &cond, s)) == bits(&cond));
    Outcome::check(
        zero_scale && equal_branches,
        format!("s=0 bit-exact: {zero_scale}; equal branches bit-exact for s in {{0,1,2,5}}: {equal_branches}"),
    )
}

// 5

fn gradient_inputs() -> Vec<StageInput> {
    vec![
        StageInput {
            x_t: array![[0.3, -0.7, 1.1, 0.2], [-1.2, 0.4, 0.0, 0.9], [0.5, 0.5, -0.3, -0.8]],
            positions: vec![2, 3, 6],
            t: 417,
            text: vec![1, 4, 2],
            obtained: array![[0.8, 0.0, -0.2, 0.0], [0.1, -0.6, 0.7, 1.3]],
            obtained_positions: vec![1, 4],
            obtained_given: vec![true, false],
        },
        StageInput {
            x_t: array![[0.6, -0.1, 0.2, -0.4], [0.0, 1.0, -1.0, 0.5]],
            positions: vec![1, 2],
            t: 3,
            text: vec![],
            obtained: Array2::zeros((0, 4)),
            obtained_positions: vec![],
            obtained_given: vec![],
        },
    ]
}

fn mean_square_output(gen: &Generator, params: &ParamStore, inputs: &[StageInput]) -> f64 {
    let out = gen.predict_noise(params, inputs).unwrap();
    let count: usize = out.iter().map(|m| m.len()).sum();
    out.iter().flat_map(|m| m.iter()).map(|v| v * v).sum::<f64>() / count as f64
}

fn gradient_check() -> Outcome {
    const STEP: f64 = 1e-5;
    let cfg = GeneratorConfig {
        d: 8,
        l1: 1,
        l2: 1,
        heads: 2,
        ff_mult: 2,
        text_layers: 1,
        max_len: 8,
        vocab_size: 6,
        feature_dim: 4,
        dropout: 0.0,
    };
    let (gen, mut params) = Generator::new(cfg, 5).unwrap();
    let inputs = gradient_inputs();
    let grads = {
        let mut g = Graph::new(&params);
        let out = gen.forward(&mut g, &inputs, None).unwrap();
        let dim = g.value(out.eps).dim();
        let l = g.mse(out.eps, Array2::zeros(dim), &vec![1.0; dim.0]);
        g.backward(l)
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in 0..params.len() {
        let shape = params.value(id).dim();
        let analytic = grads.params[id].clone().unwrap_or_else(|| Array2::zeros(shape));
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = params.value(id)[[r, c]];
                params.value_mut(id)[[r, c]] = orig + STEP;
                let plus = mean_square_output(&gen, &params, &inputs);
                params.value_mut(id)[[r, c]] = orig - STEP;
                let minus = mean_square_output(&gen, &params, &inputs);
                params.value_mut(id)[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * STEP);
                let a = analytic[[r, c]];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    Outcome::check(worst < 1e-4, format!("{checked} parameters, max relative error {worst:.2e} (limit 1e-4)"))
}

// 6

fn overfit_probe() -> Outcome {
    let start = Instant::now();
    let config = PmgConfig::load(&workspace_file("configs/overfit.toml")).unwrap();
    let corpus = config.corpus.train_set();
    let mut run = TrainingRun::new(config, corpus_vocabulary(), &corpus, 0).unwrap();
    let data = run.data.clone();
    let mut losses = Vec::new();
    run.trainer.fit(&data, |r| losses.push(r.loss)).unwrap();
    let window = 50.min(losses.len());
    let initial = losses[..window].iter().sum::<f64>() / window as f64;
    let last = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    let model = run.model().unwrap();
    let joints: Vec<usize> = (0..model.skeleton.num_joints()).collect();
    let mut apes = Vec::new();
    for (i, (text, motion)) in corpus.iter().enumerate() {
        let positions = keyframe_positions(motion.len(), 2, 0, i);
        let kfs = positions
            .iter()
            .map(|&p| KeyframeSpec::from_motion(motion, p).unwrap())
            .collect();
        let mut req = GenerationRequest::new(text.clone(), kfs, motion.len());
        req.stages = 3;
        let (out, _) = generate(&model, &req).unwrap();
        apes.push(ave_ape(&out, motion, &joints).unwrap().1);
    }
    let secs = start.elapsed().as_secs_f64();
    let ratio = last / initial;
    let worst = apes.iter().cloned().fold(0.0, f64::max);
    Outcome::check(
        ratio < 0.1 && worst < 0.1 && secs < 600.0,
        format!(
            "{} steps, loss {initial:.4} -> {last:.4} ({:.1}% of initial, limit 10%), APE per motion {:?} (limit 0.1), {secs:.0}s (limit 600s)",
            losses.len(),
            100.0 * ratio,
            apes.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

// 7 and 8 share one trained model.

struct Trend {
    config: PmgConfig,
    model: Model,
    evaluator: Evaluator,
    test: Vec<(TextPrompt, MotionSequence)>,
    train_secs: f64,
}

fn trend() -> &'static Trend {
    static TREND: OnceLock<Trend> = OnceLock::new();
    TREND.get_or_init(|| {
        let start = Instant::now();
        let config = PmgConfig::load(&workspace_file("configs/trend.toml")).unwrap();
        let cache = std::env::var_os("PMG_ACCEPTANCE_CACHE").map(PathBuf::from);
        let corpus = config.corpus.train_set();
        let ckpt_path = cache.as_ref().map(|d| d.join("trend.ckpt"));
        let model = match ckpt_path.as_ref().filter(|p| p.exists()) {
            Some(p) => Model::from_checkpoint(&Checkpoint::load(p).unwrap(), true).unwrap(),
            None => {
                let mut run = TrainingRun::new(config, corpus_vocabulary(), &corpus, 0).unwrap();
                let data = run.data.clone();
                run.trainer.fit(&data, |_| {}).unwrap();
                if let Some(p) = &ckpt_path {
                    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
                    run.checkpoint().save(p).unwrap();
                }
                run.model().unwrap()
            }
        };
        let ev_path = cache.as_ref().map(|d| d.join("evaluator.json"));
        let evaluator = match ev_path.as_ref().filter(|p| p.exists()) {
            Some(p) => EvaluatorCheckpoint::load(p).unwrap().evaluator().unwrap(),
            None => {
                let pairs: Vec<_> = corpus.iter().map(|(t, m)| (t.tokens.clone(), m)).collect();
                let ev = train_motionclip(&pairs, corpus_vocabulary().len(), config.eval, 0, |_| {}).unwrap();
                if let Some(p) = &ev_path {
                    EvaluatorCheckpoint::new(&ev, Skeleton::toy(), 0).save(p).unwrap();
                }
                ev
            }
        };
        Trend {
            config,
            model,
            evaluator,
            test: config.corpus.test_set(),
            train_secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn trend_report(n_given: usize, stages: usize, seed: u64) -> EvalReport {
    let t = trend();
    let mut cfg = t.config.suite;
    cfg.n_given = n_given;
    cfg.stages = stages;
    cfg.seed = seed;
    evaluate(&t.model, &t.evaluator, &t.test, &cfg).unwrap()
}

fn trend_given_frames() -> Outcome {
    let chance3 = 3.0 / 32.0;
    let mut ok = true;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let none = trend_report(0, 3, seed);
        let two = trend_report(2, 3, seed);
        ok &= two.fid < none.fid && none.r_top1 >= chance3 && two.r_top1 >= chance3;
        rows.push(format!(
            "seed {seed}: FID {:.3} (0 given) vs {:.3} (2 given), R-Top1 {:.3} / {:.3}",
            none.fid, two.fid, none.r_top1, two.r_top1
        ));
    }
    Outcome::check(ok, format!("trained in {:.0}s; {}", trend().train_secs, rows.join("; ")))
}

fn stage_ablation() -> Outcome {
    let mut better = 0;
    let mut much_worse = 0;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let k3 = trend_report(2, 3, seed).fid;
        let k1 = trend_report(2, 1, seed).fid;
        better += usize::from(k3 <= k1);
        much_worse += usize::from(k3 > 1.2 * k1);
        rows.push(format!("seed {seed}: FID {k3:.3} (K=3) vs {k1:.3} (K=1)"));
    }
    Outcome {
        pass: much_worse < 3,
        soft_violation: better < 2,
        detail: format!("K=3 no worse on {better}/3 seeds (soft gate 2/3; hard fail only if >20% worse on all); {}", rows.join("; ")),
    }
}

// 9

fn two_frame_motion(root_x: [f64; 2]) -> MotionSequence {
    let skeleton = Skeleton::toy();
    let local: Vec<Vec<[f64; 3]>> = (0..2).map(|_| skeleton.rest_positions()[1..].to_vec()).collect();
    MotionSequence::from_positions(&[0.0, 0.0], &[[root_x[0], 0.9, 0.0], [root_x[1], 0.9, 0.0]], &local, 20, skeleton).unwrap()
}

fn metric_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut notes = Vec::new();

    let a = standard_normal(&mut rng, 500, 6);
    let self_fid = fid(&a, &a).unwrap();
    let identity = self_fid.abs() < 1e-6;
    notes.push(format!("fid(A,A) = {self_fid:.1e}"));

    let one = fid_from_moments(&array![0.0], &array![[1.0]], &array![1.0], &array![[1.0]]).unwrap();
    let analytic = one == 1.0;
    notes.push(format!("1-D N(0,1) vs N(1,1) = {one}"));

    let n = 10_000;
    let delta = [0.6, 0.8];
    let x = standard_normal(&mut rng, n, 2);
    let mut y = standard_normal(&mut rng, n, 2);
    for mut row in y.rows_mut() {
        row[0] += delta[0];
        row[1] += delta[1];
    }
    let mc = fid(&x, &y).unwrap();
    let expect = delta[0] * delta[0] + delta[1] * delta[1];
    let monte_carlo = (mc - expect).abs() / expect < 0.02;
    notes.push(format!("shifted Gaussians {mc:.4} vs {expect}"));

    let (count, pool, repeats) = (3200, 32, 5);
    let m = standard_normal(&mut rng, count, 8);
    let t = standard_normal(&mut rng, count, 8);
    let top1 = r_precision(&m, &t, pool, 1, repeats, 0).unwrap()[0];
    let p = 1.0 / pool as f64;
    let sigma = (p * (1.0 - p) / (count * repeats) as f64).sqrt();
    let chance = (top1 - p).abs() < 3.0 * sigma;
    notes.push(format!("random Top-1 {top1:.4} vs 1/32 +- {:.4}", 3.0 * sigma));

    let base = two_frame_motion([0.0, 1.0]);
    let truth = two_frame_motion([0.0, 3.0]);
    let shifted = two_frame_motion([2.0, 3.0]);
    let (ave_a, _) = ave_ape(&base, &truth, &[0, 1, 2]).unwrap();
    let (ave_b, _) = ave_ape(&shifted, &truth, &[0, 1, 2]).unwrap();
    let translation = ave_a == ave_b;
    notes.push(format!("AVE {ave_a} before and {ave_b} after translation"));

    Outcome::check(identity && analytic && monte_carlo && chance && translation, notes.join("; "))
}

// 10

fn pseudo_frames() -> Outcome {
    let mut config = PmgConfig::default();
    config.generator.d = 16;
    config.generator.l1 = 1;
    config.generator.l2 = 1;
    config.generator.heads = 2;
    config.generator.text_layers = 1;
    config.train.batch_size = 4;
    config.train.lr = 1e-3;
    config.corpus.samples = 6;
    config.corpus.min_len = 10;
    config.corpus.max_len = 16;
    let corpus = config.corpus.train_set();
    let mut notes = Vec::new();
    let mut ok = true;
    for tau in [1.0, 0.0] {
        config.train.tau = tau;
        let mut run = TrainingRun::new(config, corpus_vocabulary(), &corpus, 10).unwrap();
        let data = run.data.clone();
        let (mut checked, mut differing) = (0, 0);
        for _ in 0..100 {
            let rec = run.trainer.train_step(&data).unwrap();
            for s in rec.samples.iter().filter(|s| s.k > 1) {
                let Some(delta) = s.obtained_delta else { continue };
                checked += 1;
                differing += usize::from(delta > 0.0);
            }
        }
        ok &= checked > 0 && if tau == 1.0 { differing == checked } else { differing == 0 };
        notes.push(format!("tau={tau}: {differing}/{checked} later-stage samples differ from ground truth"));
    }
    Outcome::check(ok, format!("100 steps each; {}", notes.join("; ")))
}

// 11

fn http_post(addr: std::net::SocketAddr, path: &str, body: &Value) -> (u16, Vec<u8>) {
    let payload = serde_json::to_vec(body).unwrap();
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(120))).unwrap();
    write!(
        stream,
        "POST {path} HTTP/1.1\r\nhost: {addr}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
        payload.len()
    )
    .unwrap();
    stream.write_all(&payload).unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    let head = String::from_utf8_lossy(&raw[..split]).to_string();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    let chunked = head.to_ascii_lowercase().contains("transfer-encoding: chunked");
    let mut body = raw[split + 4..].to_vec();
    if chunked {
        body = dechunk(&body);
    }
    (status, body)
}

fn dechunk(mut data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let line_end = data.windows(2).position(|w| w == b"\r\n").unwrap();
        let size = usize::from_str_radix(std::str::from_utf8(&data[..line_end]).unwrap().trim(), 16).unwrap();
        if size == 0 {
            return out;
        }
        out.extend_from_slice(&data[line_end + 2..line_end + 2 + size]);
        data = &data[line_end + 4 + size..];
    }
}

fn service_determinism() -> Outcome {
    let mut config = PmgConfig::default();
    config.generator.d = 32;
    config.generator.l1 = 1;
    config.generator.l2 = 1;
    config.generator.text_layers = 1;
    config.train.batch_size = 8;
    config.train.lr = 1e-3;
    config.corpus.samples = 8;
    config.corpus.min_len = 16;
    config.corpus.max_len = 24;
    let corpus = config.corpus.train_set();
    let mut run = TrainingRun::new(config, corpus_vocabulary(), &corpus, 11).unwrap();
    let data = run.data.clone();
    for _ in 0..20 {
        run.trainer.train_step(&data).unwrap();
    }
    let state = AppState::new(run.model().unwrap(), &ServiceConfig::default());

    let runtime = tokio::runtime::Runtime::new().unwrap();
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    runtime.spawn(async move { axum::serve(listener, router(state)).await });

    let (text, motion) = &corpus[0];
    let keyframes: Vec<_> = [1, motion.len() / 2]
        .iter()
        .map(|&p| KeyframeSpec::from_motion(motion, p).unwrap())
        .collect();
    let body = json!({
        "text": text.raw,
        "keyframes": keyframes,
        "length": motion.len(),
        "sampler": {"kind": "fast", "steps": 10},
        "seed": 7,
    });
    let responses: Vec<_> = (0..5).map(|_| http_post(addr, "/generate", &body)).collect();
    let ok_status = responses.iter().all(|(s, _)| *s == 200);
    let identical = responses.iter().all(|(_, b)| *b == responses[0].1);

    let doc = motion_to_json(motion);
    let (status, bytes) = http_post(addr, "/inpaint", &json!({"text": text.raw, "motion": doc, "keep": vec![true; motion.len()]}));
    let returned: Value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    let identity = status == 200 && returned["motion"] == doc;
    let decoded = motion_from_json(&returned["motion"]).map(|m| bits(&m.features) == bits(&motion.features)).unwrap_or(false);

    Outcome::check(
        ok_status && identical && identity && decoded,
        format!(
            "5 POST /generate responses ({} bytes) byte-identical: {identical}; full-keep /inpaint returns the input: {}",
            responses[0].1.len(),
            identity && decoded
        ),
    )
}

// 12

fn attention_arithmetic() -> Outcome {
    let profile = attention_profile(&[0.4, 0.3, 0.2, 0.1], &[(1, 2), (3, 4)]).unwrap();
    let hand = (profile[0] - 0.35).abs() < 1e-12 && (profile[1] - 0.15).abs() < 1e-12;

    let cfg = GeneratorConfig {
        d: 16,
        l1: 2,
        l2: 1,
        heads: 4,
        ff_mult: 2,
        text_layers: 1,
        max_len: 32,
        vocab_size: 12,
        feature_dim: 5,
        dropout: 0.0,
    };
    let (gen, params) = Generator::new(cfg, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let obtained = rng.random_range(1..6);
        let new = rng.random_range(1..6);
        let positions: Vec<usize> = (1..=obtained + new).collect();
        let input = StageInput {
            x_t: standard_normal(&mut rng, new, 5),
            positions: positions[obtained..].to_vec(),
            t: rng.random_range(1..=1000),
            text: (0..rng.random_range(1..6)).map(|_| rng.random_range(0..12)).collect(),
            obtained: standard_normal(&mut rng, obtained, 5),
            obtained_positions: positions[..obtained].to_vec(),
            obtained_given: (0..obtained).map(|i| i % 2 == 0).collect(),
        };
        let attn = gen.semantics_attention(&params, &input).unwrap();
        for row in attn.rows() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
    }
    Outcome::check(
        hand && worst < 1e-6,
        format!("profile {profile:?} vs (0.35, 0.15); worst softmax row-sum error {worst:.1e} (limit 1e-6)"),
    )
}
