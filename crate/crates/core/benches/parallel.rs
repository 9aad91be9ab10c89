//! Worker-count scaling of the data-parallel stages.
//!
//! `cargo bench -p reroof-core` compares one worker against all available
//! cores; `--no-default-features` benchmarks the sequential fallback build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use reroof::changepoint::infer_all;
use reroof::data::{generate_synthetic, AugmentConfig, DatasetSplit, Image, SynthConfig};
use reroof::exec;
use reroof::pairclf::{ClassifierArch, ClassifierParams};
use reroof::rng;
use reroof::vae::{train_vae, VaeArch, VaeParams, VaeTrainConfig};

fn worker_counts() -> Vec<usize> {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    if cfg!(feature = "parallel") && n > 1 {
        vec![1, n]
    } else {
        vec![1]
    }
}

fn build() -> &'static str {
    if cfg!(feature = "parallel") {
        "rayon"
    } else {
        "sequential"
    }
}

fn dataset(buildings: usize) -> DatasetSplit {
    let cfg = SynthConfig {
        num_buildings: buildings,
        validation_fraction: 0.0,
        test_fraction: 0.5,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, 1).unwrap()
}

fn bench_synth(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("synth_20_buildings/{}", build()));
    let cfg = SynthConfig {
        num_buildings: 20,
        ..SynthConfig::default()
    };
    for w in worker_counts() {
        group.bench_with_input(BenchmarkId::new("workers", w), &w, |b, &w| {
            b.iter(|| exec::with_workers(w, || generate_synthetic(&cfg, 3).unwrap()))
        });
    }
    group.finish();
}

fn bench_encode(c: &mut Criterion) {
    let data = dataset(10);
    let images: Vec<&Image> = data.train.iter().flat_map(|s| &s.images).collect();
    let vae = VaeParams::init(VaeArch::default(), &mut rng::seeded(1)).unwrap();
    let mut group = c.benchmark_group(format!("encode_{}_images/{}", images.len(), build()));
    for w in worker_counts() {
        group.bench_with_input(BenchmarkId::new("workers", w), &w, |b, &w| {
            b.iter(|| exec::with_workers(w, || vae.encode_all(&images).unwrap()))
        });
    }
    group.finish();
}

fn bench_vae_epoch(c: &mut Criterion) {
    let data = dataset(8);
    let split = DatasetSplit {
        train: data.train.clone(),
        ..DatasetSplit::default()
    };
    let cfg = VaeTrainConfig {
        epochs: 1,
        augment: AugmentConfig::identity(),
        ..VaeTrainConfig::default()
    };
    let mut group = c.benchmark_group(format!("vae_epoch_micro_batches/{}", build()));
    group.sample_size(10);
    for w in worker_counts() {
        group.bench_with_input(BenchmarkId::new("workers", w), &w, |b, &w| {
            b.iter(|| exec::with_workers(w, || train_vae(&split, &cfg, 2).unwrap()))
        });
    }
    group.finish();
}

fn bench_inference(c: &mut Criterion) {
    let data = dataset(16);
    let vae = VaeParams::init(VaeArch::default(), &mut rng::seeded(1)).unwrap();
    let clf = ClassifierParams::init(ClassifierArch::default(), &mut rng::seeded(2)).unwrap();
    let mut group = c.benchmark_group(format!("infer_{}_buildings/{}", data.test.len(), build()));
    group.sample_size(10);
    for w in worker_counts() {
        group.bench_with_input(BenchmarkId::new("workers", w), &w, |b, &w| {
            b.iter(|| exec::with_workers(w, || infer_all(&vae, &clf, &data.test).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_synth, bench_encode, bench_vae_epoch, bench_inference);
criterion_main!(benches);
