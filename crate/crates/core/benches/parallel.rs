use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use headlab::exec::Exec;
use headlab::experiment::{prepare, ExperimentConfig, Prepared};
use headlab::importance::{head_importance, ImportanceOptions};
use headlab::model::batch_gradients;
use headlab::train::paired_bootstrap;

const CONFIG: &str = r#"{
    "version": 1,
    "model": {"n_layers": 2, "n_heads": 4, "d_model": 32, "max_seq_len": 32, "dropout": 0.1},
    "tasks": [
        {"name": "parity", "synth": {"kind": "marker-parity", "size": 400, "seed": 1}},
        {"name": "equal", "synth": {"kind": "pair-equality", "size": 400, "seed": 2}}
    ]
}"#;

fn setup() -> Prepared {
    let cfg = ExperimentConfig::from_json(CONFIG).unwrap();
    prepare(&cfg).unwrap()
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn gradients(c: &mut Criterion) {
    let prep = setup();
    let model = prep.init_model(0).unwrap();
    let batch = &prep.tasks[1].train[..32];
    let mut g = c.benchmark_group("batch_gradients");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(batch_gradients(&model, 1, batch, Some(3), exec).unwrap()))
        });
    }
    g.finish();
}

fn importance(c: &mut Criterion) {
    let prep = setup();
    let model = prep.init_model(0).unwrap();
    let opts = ImportanceOptions { max_batches: 4, ..Default::default() };
    let mut g = c.benchmark_group("head_importance");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(head_importance(&model, 0, &prep.tasks[0].train, &opts, exec).unwrap()))
        });
    }
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let pairs: Vec<(f64, f64)> = (0..30).map(|i| (0.8 + 0.001 * i as f64, 0.79 + 0.0013 * ((i * 7) % 11) as f64)).collect();
    let mut g = c.benchmark_group("paired_bootstrap");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(paired_bootstrap(&pairs, 10_000, 5, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, gradients, importance, bootstrap);
criterion_main!(benches);
