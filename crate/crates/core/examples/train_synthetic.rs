//! Trains the default-sized model on the synthetic sine-plus-trend series
//! and compares it with a last-value baseline.
//!
//! cargo run --release -p mgts-core --example train_synthetic -- [steps] [lr]

use std::time::Instant;

use mgts_core::config::{ModelConfig, RunConfig, TrainConfig};
use mgts_core::data::sine_trend;
use mgts_core::exec::Execution;
use mgts_core::metrics::Metrics;
use mgts_core::model::Model;
use mgts_core::train::{evaluate, train_with, PreparedData};

fn main() -> mgts_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1e-3);
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
        train: TrainConfig {
            initial_lr: lr,
            max_steps: Some(steps),
            eval_stride: 8,
            ..TrainConfig::default()
        },
    };
    let series = sine_trend(2000, 0.05, 7);
    let data = PreparedData::new(&series, None, &run, Execution::Parallel)?;
    let model = Model::new(&run.model, &series.variable_names, &[], &[], run.train.seed)?;
    println!("parameters: {}", model.num_parameters());
    let started = Instant::now();
    let out = train_with(model, &data, &run.train, Execution::Parallel, |e| {
        println!(
            "epoch {} lr {:.2e} train {:.4} val mse {:.4} ({:.1}s)",
            e.epoch,
            e.lr,
            e.train_loss,
            e.val_mse,
            started.elapsed().as_secs_f64()
        )
    })?;
    for s in out.log.steps.iter().step_by(10) {
        println!("step {:4} loss {:.4}", s.step, s.loss);
    }
    let test = data.test.as_ref().expect("test windows");
    let m = evaluate(&out.model, test, Execution::Parallel)?;
    let naive = Metrics::from_pairs(test.samples.iter().map(|s| (last_value(s), &s.target)).collect::<Vec<_>>().iter().map(|(a, b)| (a, *b)))?;
    println!("test mse {:.4} mae {:.4}, last-value mse {:.4}", m.mse, m.mae, naive.mse);
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn last_value(s: &mgts_core::data::WindowSample) -> mgts_core::tensor::Tensor {
    let last = s.x_enc.row(s.x_enc.rows() - 1).to_vec();
    mgts_core::tensor::Tensor::new(vec![s.target.rows(), last.len()], last.repeat(s.target.rows())).unwrap()
}
