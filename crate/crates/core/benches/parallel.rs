//! Serial vs rayon comparison for the data-parallel hot spots: dataset
//! generation, windowed-posterior evaluation, and batch model scoring.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pkd_core::checkpoint::Checkpoint;
use pkd_core::model::{init_params, ModelSpec};
use pkd_core::oracle::Chain;
use pkd_core::par;
use pkd_core::synth::{generate, GenConfig};

fn bench_cfg() -> GenConfig {
    GenConfig {
        train_sequences: 24,
        test_sequences: 8,
        seq_len: 128,
        ..GenConfig::default_benchmark()
    }
}

fn bench_generate(c: &mut Criterion) {
    let cfg = bench_cfg();
    let mut group = c.benchmark_group("generate");
    for mode in ["serial", "rayon"] {
        group.bench_with_input(BenchmarkId::from_parameter(mode), &mode, |b, &mode| {
            b.iter(|| {
                // generate() itself uses the default pool; exercise the two
                // mapping paths explicitly on the per-sequence closure.
                let protos_cfg = cfg.clone();
                let n = cfg.train_sequences;
                let run = |i: usize| {
                    let mut one = protos_cfg.clone();
                    one.train_sequences = 1;
                    one.test_sequences = 1;
                    one.seed = i as u64;
                    generate(&one).unwrap().train.sequences.len()
                };
                let total: usize = if mode == "serial" {
                    par::map_indexed_serial(n, run).into_iter().sum()
                } else {
                    par::map_indexed_rayon(n, run).into_iter().sum()
                };
                assert_eq!(total, n);
            });
        });
    }
    group.finish();
}

fn bench_oracle(c: &mut Criterion) {
    let cfg = bench_cfg();
    let data = generate(&cfg).unwrap();
    let chain = Chain::from_config(&cfg).unwrap();
    let mut group = c.benchmark_group("oracle_posteriors");
    group.sample_size(20);
    for mode in ["serial", "rayon"] {
        group.bench_with_input(BenchmarkId::from_parameter(mode), &mode, |b, &mode| {
            b.iter(|| {
                let run = |i: usize| {
                    chain
                        .posterior_scores(&data.test.sequences[i], cfg.feature_dim, 8)
                        .len()
                };
                let n = data.test.sequences.len();
                let total: usize = if mode == "serial" {
                    par::map_indexed_serial(n, run).into_iter().sum()
                } else {
                    par::map_indexed_rayon(n, run).into_iter().sum()
                };
                assert!(total > 0);
            });
        });
    }
    group.finish();
}

fn bench_batch_scoring(c: &mut Criterion) {
    let cfg = bench_cfg();
    let data = generate(&cfg).unwrap();
    let spec = ModelSpec::student(cfg.feature_dim, cfg.num_classes);
    let ckpt = Checkpoint::new(spec, init_params(&spec, 1).unwrap());
    let mut group = c.benchmark_group("batch_scoring");
    group.sample_size(20);
    for mode in ["serial", "rayon"] {
        group.bench_with_input(BenchmarkId::from_parameter(mode), &mode, |b, &mode| {
            b.iter(|| {
                let run = |i: usize| {
                    let x = data.test.sequences[i].features_tensor(cfg.feature_dim);
                    let trace =
                        pkd_core::model::forward(&ckpt.params, &ckpt.spec, &x).unwrap();
                    trace.logits.len()
                };
                let n = data.test.sequences.len();
                let total: usize = if mode == "serial" {
                    par::map_indexed_serial(n, run).into_iter().sum()
                } else {
                    par::map_indexed_rayon(n, run).into_iter().sum()
                };
                assert!(total > 0);
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_generate, bench_oracle, bench_batch_scoring);
criterion_main!(benches);
