use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use localbins::config::{TrainConfig, TrainingMode};
use localbins::data::generate_corpus;
use localbins::model::DepthRange;
use localbins::par;
use localbins::tensor::{conv2d, Tensor};
use localbins::train;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn small_config() -> TrainConfig {
    TrainConfig {
        height: 32,
        width: 32,
        boxes_per_class: 20,
        training_mode: TrainingMode::QrFoveated,
        ..TrainConfig::default()
    }
}

fn bench_scenes(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_corpus");
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new(name, "16x64x64"), |b| {
            b.iter(|| generate_corpus(16, 64, 64, DepthRange::default(), 3))
        });
    }
    par::set_parallel(true);
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::from_fn(&[8, 32, 32, 32], |_| rng.random_range(-1.0..1.0));
    let k = Tensor::<f32>::from_fn(&[32, 32, 3, 3], |_| rng.random_range(-0.1..0.1));
    let mut group = c.benchmark_group("conv2d_3x3");
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new(name, "8x32x32x32"), |b| b.iter(|| conv2d(&x, &k, 1, 1).unwrap()));
    }
    par::set_parallel(true);
    group.finish();
}

fn bench_objective(c: &mut Criterion) {
    let cfg = small_config();
    let batch = generate_corpus(4, cfg.height, cfg.width, cfg.range(), 0);
    let params = train::initial_params(&cfg).unwrap();
    let mut group = c.benchmark_group("loss_and_gradients");
    group.sample_size(10).measurement_time(Duration::from_secs(10));
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new(name, "qr_foveated_32x32_b4"), |b| {
            b.iter(|| train::objective(&cfg, &params, &batch, 0, true).unwrap())
        });
    }
    par::set_parallel(true);
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let cfg = small_config();
    let corpus = generate_corpus(16, cfg.height, cfg.width, cfg.range(), 1);
    let params = train::initial_params(&cfg).unwrap();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new(name, "16x32x32"), |b| {
            b.iter(|| train::evaluate(&cfg, &params, &corpus).unwrap())
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, bench_scenes, bench_conv, bench_objective, bench_evaluate);
criterion_main!(benches);
