use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mgts_core::checkpoint::Checkpoint;
use mgts_core::config::RunConfig;
use mgts_core::data::{load_csv, render_chart, windows_manifest, DatasetSplit, Part, RawSeries, WindowSample};
use mgts_core::exec::Execution;
use mgts_core::graph::{build_graph_with, GraphOptions};
use mgts_core::metrics::{metrics_csv, Metrics, RunManifest};
use mgts_core::model::Model;
use mgts_core::tensor::Tensor;
use mgts_core::text::{load_embedding_file, EventLog};
use mgts_core::train::{evaluate, train_with, PreparedData, WindowSet};
use mgts_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mgts", version, about = "Multimodal graph forecaster for multivariate time series")]
struct Cli {
    /// Run every per-window computation on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, log and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvalArgs),
    /// Forecast the steps following the end of a series.
    Forecast(ForecastArgs),
    /// Write fused node embeddings for each window of a split.
    ExportEmbeddings(ExportArgs),
    /// Write the heterogeneous graph edge list for a config.
    DumpGraph(GraphArgs),
}

#[derive(Args)]
struct DataArgs {
    /// ETT-style CSV: date column then numeric columns.
    #[arg(long)]
    data: PathBuf,
    /// Optional event log CSV with columns start_ts,end_ts,content.
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    input: DataArgs,
    /// Pre-computed text embeddings (id,v0,..).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Name written to the metrics CSV. Defaults to the data file stem.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Part {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Part::Train,
            SplitArg::Val => Part::Val,
            SplitArg::Test => Part::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    dataset: Option<String>,
    /// Write the metrics CSV here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    input: DataArgs,
    /// CSV of forecasts in original units. Printed when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Export at most this many windows.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    config: PathBuf,
    /// Number of text nodes.
    #[arg(long, default_value_t = 1)]
    texts: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a, exec),
        Command::Evaluate(a) => run_evaluate(a, exec),
        Command::Forecast(a) => run_forecast(a),
        Command::ExportEmbeddings(a) => run_export(a),
        Command::DumpGraph(a) => run_dump_graph(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))
}

fn dataset_name(explicit: Option<String>, data: &Path) -> String {
    explicit.unwrap_or_else(|| {
        data.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into())
    })
}

fn load_events(path: Option<&Path>) -> Result<Option<EventLog>> {
    path.map(EventLog::load).transpose()
}

fn print_metrics(label: &str, m: &Metrics) {
    println!("{label:<8} mse {:.6}  mae {:.6}  windows {}", m.mse, m.mae, m.windows);
}

fn run_train(args: TrainArgs, exec: Execution) -> Result<()> {
    let run = RunConfig::load(&args.config)?;
    let series = load_csv(&args.input.data)?;
    let events = load_events(args.input.events.as_deref())?;
    let imported = match &args.embeddings {
        Some(p) => load_embedding_file(p, run.model.d_model)?,
        None => Vec::new(),
    };
    let data = PreparedData::new(&series, events.as_ref(), &run, exec)?;
    let event_texts = events.as_ref().map(EventLog::contents).unwrap_or_default();
    let model = Model::new(&run.model, &series.variable_names, &event_texts, &imported, run.train.seed)?;
    println!(
        "train {} / val {} / test {} windows, {} parameters",
        data.train.len(),
        data.val.len(),
        data.test.as_ref().map_or(0, WindowSet::len),
        model.num_parameters()
    );
    let outcome = train_with(model, &data, &run.train, exec, |e| {
        println!(
            "epoch {:>3}  lr {:.3e}  train {:.6}  val mse {:.6}  val mae {:.6}",
            e.epoch, e.lr, e.train_loss, e.val_mse, e.val_mae
        );
    })?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    Checkpoint::capture(&outcome.model, &run, &data.split.mean, &data.split.std).save(args.out.join("checkpoint.json"))?;
    write(&args.out.join("train_log.json"), &to_json(&outcome.log)?)?;

    let dataset = dataset_name(args.dataset, &args.input.data);
    let mut parts = vec![(Part::Train, &data.train.samples[..]), (Part::Val, &data.val.samples[..])];
    if let Some(best) = outcome.log.best() {
        println!("best epoch {}", best.epoch);
    }
    let val = evaluate(&outcome.model, &data.val, exec)?;
    print_metrics("val", &val);
    let mut rows = Vec::new();
    if let Some(test) = &data.test {
        let m = evaluate(&outcome.model, test, exec)?;
        print_metrics("test", &m);
        rows.push((dataset.clone(), run.model.horizon, m));
        parts.push((Part::Test, &test.samples[..]));
    }
    write(&args.out.join("metrics.csv"), &metrics_csv(&rows))?;
    write(&args.out.join("windows.csv"), &windows_manifest(&parts))?;
    let manifest = RunManifest {
        seed: run.train.seed,
        config_hash: run.hash(),
        dataset,
        horizon: run.model.horizon,
    };
    write(&args.out.join("manifest.json"), &to_json(&manifest)?)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn check_columns(ckpt: &Checkpoint, series: &RawSeries) -> Result<()> {
    if series.variable_names != ckpt.variable_names {
        return Err(Error::Format(format!(
            "data columns {:?} do not match the checkpoint's {:?}",
            series.variable_names, ckpt.variable_names
        )));
    }
    Ok(())
}

/// Rebuilds the training-time split using the checkpoint's ratios and statistics.
fn checkpoint_split(ckpt: &Checkpoint, series: &RawSeries) -> Result<DatasetSplit> {
    check_columns(ckpt, series)?;
    let train = &ckpt.config.train;
    let mut split = DatasetSplit::by_ratio(series, train.train_ratio, train.val_ratio)?;
    if let Some(f) = train.few_shot_fraction {
        split = split.with_few_shot(f)?;
    }
    split.mean = ckpt.mean.clone();
    split.std = ckpt.std.clone();
    Ok(split)
}

fn checkpoint_windows(ckpt: &Checkpoint, input: &DataArgs, part: Part, exec: Execution) -> Result<WindowSet> {
    let series = load_csv(&input.data)?;
    let events = load_events(input.events.as_deref())?;
    let split = checkpoint_split(ckpt, &series)?;
    let data = PreparedData::with_split(&series, events.as_ref(), &ckpt.config, split, exec)?;
    match part {
        Part::Train => Ok(data.train),
        Part::Val => Ok(data.val),
        Part::Test => data
            .test
            .ok_or_else(|| Error::EmptySplit("test range too short for one window".into())),
    }
}

fn run_evaluate(args: EvalArgs, exec: Execution) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.restore()?;
    let part = Part::from(args.split);
    let set = checkpoint_windows(&ckpt, &args.input, part, exec)?;
    let m = evaluate(&model, &set, exec)?;
    print_metrics(part.as_str(), &m);
    if let Some(out) = args.out {
        let dataset = dataset_name(args.dataset, &args.input.data);
        write(&out, &metrics_csv(&[(dataset, model.config.horizon, m)]))?;
    }
    Ok(())
}

fn run_forecast(args: ForecastArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.restore()?;
    let series = load_csv(&args.input.data)?;
    check_columns(&ckpt, &series)?;
    let cfg = &model.config;
    let (len, vars) = (cfg.input_len, model.num_vars());
    if series.len() < len {
        return Err(Error::Format(format!("forecast needs {len} rows, data has {}", series.len())));
    }
    let start = series.len() - len;
    let mut x = Vec::with_capacity(len * vars);
    for r in start..series.len() {
        for (v, value) in series.values.row(r).iter().enumerate() {
            x.push((value - ckpt.mean[v]) / ckpt.std[v]);
        }
    }
    let x_enc = Tensor::new(vec![len, vars], x)?;
    let window = WindowSample {
        chart: render_chart(&x_enc, cfg.chart_height, cfg.patch_count())?,
        target: Tensor::zeros(&[cfg.horizon, vars]),
        x_enc,
        start_index: 0,
        series_index: start,
    };
    let events = match load_events(args.input.events.as_deref())? {
        Some(log) => log.overlapping(&series.timestamps[start], &series.timestamps[series.len() - 1]),
        None => Vec::new(),
    };
    let result = model.predict(&window, &events)?;
    let mut csv = String::from("step");
    for name in &model.variable_names {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for h in 0..cfg.horizon {
        csv.push_str(&(h + 1).to_string());
        for (v, z) in result.fused.row(h).iter().enumerate() {
            csv.push_str(&format!(",{}", z * ckpt.std[v] + ckpt.mean[v]));
        }
        csv.push('\n');
    }
    let weights: Vec<String> = result.weights.data().iter().map(|w| format!("{w:.4}")).collect();
    eprintln!("head weights [{}]", weights.join(", "));
    match args.out {
        Some(out) => write(&out, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run_export(args: ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.restore()?;
    let set = checkpoint_windows(&ckpt, &args.input, args.split.into(), Execution::Parallel)?;
    let count = args.limit.unwrap_or(set.len()).min(set.len());
    let mut csv = String::from("window,modality,index");
    for i in 0..model.config.d_model {
        csv.push_str(&format!(",v{i}"));
    }
    csv.push('\n');
    for w in 0..count {
        for (modality, index, values) in model.node_embeddings(&set.samples[w], &set.events[w])? {
            csv.push_str(&format!("{},{},{index}", set.samples[w].start_index, modality.as_str()));
            for v in values {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
    }
    write(&args.out, &csv)?;
    println!("exported {count} windows to {}", args.out.display());
    Ok(())
}

fn run_dump_graph(args: GraphArgs) -> Result<()> {
    let run = RunConfig::load(&args.config)?;
    let m = &run.model;
    let graph = build_graph_with(
        m.patch_count(),
        args.texts,
        m.past_window,
        m.future_window,
        GraphOptions {
            cross_symmetric: m.cross_symmetric,
            text_bidirectional: m.text_bidirectional,
        },
    );
    let csv = graph.to_csv();
    match args.out {
        Some(out) => {
            write(&out, &csv)?;
            println!("{} nodes, {} edges", graph.num_nodes(), graph.num_edges());
            Ok(())
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
