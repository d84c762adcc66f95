use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scsd_bench::{default_samples, default_trainer, random_features};
use scsd_core::config::RunConfig;
use scsd_core::pipeline::hungarian::match_queries;
use scsd_core::pipeline::{ForwardMode, SegModel};
use scsd_core::tdst::{fft_decompose, ifft_compose};

fn bench_fft_roundtrip(c: &mut Criterion) {
    let features = random_features(64, 8, 8, 1);
    c.bench_function("fft_decompose_compose_64x8x8", |b| {
        b.iter(|| {
            let spec = fft_decompose(&features).unwrap();
            ifft_compose(&spec.amplitude, &spec.phase).unwrap()
        })
    });
}

fn bench_restyle(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let model = SegModel::new(&cfg).unwrap();
    let samples = default_samples(2);
    c.bench_function("tdst_styled_train_forward", |b| {
        b.iter(|| {
            model
                .forward(&samples[0], ForwardMode::Train { condition_index: 1 })
                .unwrap()
        })
    });
}

fn bench_eval_forward(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let model = SegModel::new(&cfg).unwrap();
    let samples = default_samples(2);
    c.bench_function("eval_forward", |b| {
        b.iter(|| model.eval_forward(&samples[0]).unwrap())
    });
}

fn bench_hungarian(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cost = Array2::from_shape_fn((20, 5), |_| rng.gen_range(-3.0..3.0));
    c.bench_function("hungarian_20x5", |b| {
        b.iter(|| match_queries(&cost).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let mut trainer = default_trainer(4);
    trainer.train_step().unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step_batch4", |b| {
        b.iter(|| trainer.train_step().unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_fft_roundtrip,
    bench_restyle,
    bench_eval_forward,
    bench_hungarian,
    bench_train_step
);
criterion_main!(benches);
