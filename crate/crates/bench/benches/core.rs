use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pmg_core::corpus::{corpus_vocabulary, make_corpus_with, CorpusConfig};
use pmg_core::eval::fid;
use pmg_core::nn::standard_normal;
use pmg_core::{generate, plan_stages, GenerationRequest, KeyframeSpec, PmgConfig, StageInput, TrainingRun};

fn small_run() -> TrainingRun {
    let corpus: Vec<_> = make_corpus_with(
        0,
        64,
        &CorpusConfig {
            min_len: 40,
            max_len: 64,
            fps: 20,
        },
    )
    .into_iter()
    .map(|s| (s.text, s.motion))
    .collect();
    let mut cfg = PmgConfig::default();
    cfg.generator.l1 = 2;
    cfg.generator.l2 = 2;
    cfg.train.batch_size = 16;
    TrainingRun::new(cfg, corpus_vocabulary(), &corpus, 0).unwrap()
}

fn partition(c: &mut Criterion) {
    c.bench_function("plan_stages n200 k5", |b| {
        b.iter(|| plan_stages(200, &[3, 61, 140, 199], 5).unwrap())
    });
}

fn denoiser(c: &mut Criterion) {
    let run = small_run();
    let model = run.model().unwrap();
    let d = model.skeleton.layout().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = StageInput {
        x_t: standard_normal(&mut rng, 40, d),
        positions: (1..=40).collect(),
        t: 500,
        text: vec![0, 1, 3, 4],
        obtained: standard_normal(&mut rng, 20, d),
        obtained_positions: (41..=60).collect(),
        obtained_given: vec![false; 20],
    };
    c.bench_function("predict_noise d128 40+20 frames", |b| {
        b.iter(|| model.generator.predict_noise(&model.params, std::slice::from_ref(&input)).unwrap())
    });

    let corpus = make_corpus_with(0, 1, &CorpusConfig { min_len: 40, max_len: 64, fps: 20 });
    let truth = &corpus[0].motion;
    let kfs = vec![
        KeyframeSpec::from_motion(truth, 1).unwrap(),
        KeyframeSpec::from_motion(truth, truth.len()).unwrap(),
    ];
    let mut req = GenerationRequest::new(corpus[0].text.clone(), kfs, truth.len());
    req.seed = 3;
    c.bench_function("generate fast-10 K3", |b| b.iter(|| generate(&model, &req).unwrap()));
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step bs16 d128", |b| {
        b.iter_batched(
            small_run,
            |mut run| {
                let data = run.data.clone();
                run.trainer.train_step(&data).unwrap()
            },
            BatchSize::PerIteration,
        )
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = standard_normal(&mut rng, 512, 32);
    let b = standard_normal(&mut rng, 512, 32);
    c.bench_function("fid 512x32", |bch| bch.iter(|| fid(&a, &b).unwrap()));
}

criterion_group!(benches, partition, denoiser, training, metrics);
criterion_main!(benches);
