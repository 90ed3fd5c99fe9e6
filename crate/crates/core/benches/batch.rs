//! Sequential versus rayon execution of the per-window work: one batch of
//! per-sample gradients, and a forward-only evaluation pass.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mgts_core::config::{ModelConfig, RunConfig, TrainConfig};
use mgts_core::data::sine_trend;
use mgts_core::exec::Execution;
use mgts_core::model::Model;
use mgts_core::train::{batch_gradient, evaluate, PreparedData};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (Model, PreparedData) {
    let run = RunConfig {
        model: ModelConfig {
            input_len: 96,
            horizon: 96,
            d_model: 32,
            n_blocks: 2,
            n_experts: 4,
            top_k: 2,
            ..ModelConfig::default()
        },
        train: TrainConfig::default(),
    };
    let series = sine_trend(2000, 0.05, 7);
    let data = PreparedData::new(&series, None, &run, Execution::Parallel).expect("windows");
    let model = Model::new(&run.model, &series.variable_names, &[], &[], 0).expect("model");
    (model, data)
}

fn bench_batch_gradient(c: &mut Criterion) {
    let (model, data) = setup();
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for batch in [8usize, 32] {
        let idx: Vec<usize> = (0..batch).collect();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, batch), &idx, |b, idx| {
                b.iter(|| batch_gradient(&model, &data.train, idx, exec).expect("gradient"))
            });
        }
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let (model, data) = setup();
    let windows = data.train.strided(16);
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, windows.len()), |b| {
            b.iter(|| evaluate(&model, &windows, exec).expect("metrics"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batch_gradient, bench_evaluate);
criterion_main!(benches);
