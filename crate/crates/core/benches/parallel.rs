//! Sequential vs rayon execution of the per-sample hot paths.
//!
//! Build with `--no-default-features` to measure the pure sequential build;
//! with the default features both modes are measured side by side.

use cda_core::adapt::train_source;
use cda_core::config::{ArchConfig, TrainConfig};
use cda_core::data::{generate_synthetic, Split, SyntheticSpec};
use cda_core::dsn::domain_distances;
use cda_core::metrics::{score_model, ScoringNet};
use cda_core::networks::ModelBundle;
use cda_core::par::ExecMode;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        num_subdomains: 2,
        samples_per_subdomain: 40,
        source_train: 64,
        source_val: 8,
        ..SyntheticSpec::default()
    }
}

fn scoring(c: &mut Criterion) {
    let (source, target) = generate_synthetic(&spec()).unwrap();
    let bundle = ModelBundle::new(ArchConfig::for_input(source.shape()), 0).unwrap();
    let mut g = c.benchmark_group("score_model");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| score_model(&bundle, None, ScoringNet::Source, &target, Split::Test, 32, mode).unwrap())
        });
    }
    g.finish();
}

fn distances(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut points = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect() };
    let targets = points(200);
    let sources = points(256);
    let mut g = c.benchmark_group("domain_distances");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| domain_distances(&targets, &sources, mode)));
    }
    g.finish();
}

fn source_epoch(c: &mut Criterion) {
    let (source, _) = generate_synthetic(&spec()).unwrap();
    let arch = ArchConfig::for_input(source.shape());
    let mut g = c.benchmark_group("train_source_epoch");
    g.sample_size(10);
    for (name, mode) in MODES {
        let cfg = TrainConfig {
            epochs: 1,
            log_hashes: false,
            exec: mode,
            ..TrainConfig::desk()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_source(ModelBundle::new(arch.clone(), 0).unwrap(), &source, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, scoring, distances, source_epoch);
criterion_main!(benches);
