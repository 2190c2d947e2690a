use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use maq_core::agents::{SacConfig, SacLearner};
use maq_core::dataset::{extract_all, split, MacroSample, NormStats};
use maq_core::env::{random_rollout, scripted_demo, Trajectory};
use maq_core::nn::{DenseNet, HiddenActivation, Matrix, OutputActivation};
use maq_core::seeded_rng;
use maq_core::similarity::{dtw, exact_wasserstein, features, Feature};
use maq_core::smdp::{demo_to_macro_transitions, MacroTransition};
use maq_core::vqvae::{train_vqvae, VqBatch, VqConfig};

fn demos(n: u64) -> Vec<Trajectory> {
    (1..=n).map(|s| scripted_demo(s).unwrap()).collect()
}

fn bench_similarity(c: &mut Criterion) {
    let d = demos(4);
    let norm = NormStats::compute(&d).unwrap();
    let human = features(&d[0], Feature::State, &norm).unwrap();
    let random = features(&random_rollout(3), Feature::State, &norm).unwrap();
    c.bench_function("dtw demo vs random rollout", |b| {
        b.iter(|| dtw(black_box(&human), black_box(&random)).unwrap())
    });

    let pooled = |t: &[Trajectory]| -> Vec<Vec<f64>> {
        t.iter()
            .flat_map(|x| features(x, Feature::Action, &norm).unwrap().rows().to_vec())
            .take(200)
            .collect()
    };
    let p = pooled(&d);
    let q = pooled(&[random_rollout(1), random_rollout(2), random_rollout(3), random_rollout(4)]);
    c.bench_function("exact wasserstein 200x200", |b| {
        b.iter(|| exact_wasserstein(black_box(&p), black_box(&q)).unwrap())
    });
}

fn bench_network(c: &mut Criterion) {
    let mut rng = seeded_rng(1);
    let net = DenseNet::new(&[4, 128, 128, 16], HiddenActivation::Relu, OutputActivation::Identity, &mut rng).unwrap();
    let x = Matrix::from_fn(64, 4, |r, k| ((r * 7 + k * 3) % 11) as f64 / 11.0);
    let grad = Matrix::from_fn(64, 16, |r, k| ((r + k) % 5) as f64 - 2.0);
    c.bench_function("dense forward 64x[4,128,128,16]", |b| b.iter(|| net.predict(black_box(&x)).unwrap()));
    c.bench_function("dense forward+backward 64x[4,128,128,16]", |b| {
        b.iter(|| {
            let (_, cache) = net.forward(black_box(&x)).unwrap();
            net.backward(&cache, &grad).unwrap()
        })
    });
}

fn bench_vqvae(c: &mut Criterion) {
    let train = split(&demos(25), 0).unwrap().train;
    let cfg = VqConfig { epochs: 1, ..VqConfig::default() };
    let (model, _) = train_vqvae(&train, &cfg).unwrap();
    let samples: Vec<MacroSample> = extract_all(&train, cfg.horizon);
    let picks: Vec<&MacroSample> = samples.iter().step_by(samples.len() / cfg.batch_size).take(cfg.batch_size).collect();
    let batch = VqBatch::new(&model.norm, &picks).unwrap();
    c.bench_function("vqvae objective and gradients, batch 32", |b| {
        b.iter(|| {
            let assignment = model.assign(&model.encode_batch(&batch).unwrap());
            model.objective(&batch, &assignment, cfg.beta).unwrap()
        })
    });
    let small = VqConfig { epochs: 1, ..cfg };
    let mut group = c.benchmark_group("vqvae");
    group.sample_size(10);
    group.bench_function("one training epoch", |b| b.iter(|| train_vqvae(black_box(&train), &small).unwrap()));
    group.finish();
}

fn bench_sac(c: &mut Criterion) {
    let train = split(&demos(25), 0).unwrap().train;
    let (model, _) = train_vqvae(&train, &VqConfig { epochs: 5, ..VqConfig::default() }).unwrap();
    let transitions: Vec<MacroTransition> = train
        .iter()
        .flat_map(|d| demo_to_macro_transitions(d, &model, 0.99).unwrap())
        .collect();
    let batch: Vec<MacroTransition> = transitions.iter().cycle().take(64).copied().collect();
    let cfg = SacConfig::default();
    let learner = SacLearner::new(16, &cfg, &mut seeded_rng(1)).unwrap();
    c.bench_function("dsac update, batch 64, K=16", |b| {
        b.iter_batched(
            || learner.clone(),
            |mut l| l.update(black_box(&batch), &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_similarity, bench_network, bench_vqvae, bench_sac);
criterion_main!(benches);
