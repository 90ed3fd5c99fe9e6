//! Benchmark CSV loading, train/val/test splitting, standardization and
//! windowing into supervised samples.

mod chart;
mod synthetic;

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use chart::{render_chart, Chart};
pub use synthetic::sine_trend;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tensor::Tensor;

/// A multivariate series as read from disk.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub timestamps: Vec<String>,
    /// `[N x D]` observations.
    pub values: Tensor,
    pub variable_names: Vec<String>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_vars(&self) -> usize {
        self.variable_names.len()
    }
}

/// Reads an ETT-style CSV: a header row, a date column, then numeric columns.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Format(format!(
            "expected a date column and at least one numeric column, found {} column(s)",
            headers.len()
        )));
    }
    let variable_names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let vars = variable_names.len();

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            detail: e.to_string(),
        })?;
        if record.len() != vars + 1 {
            return Err(Error::Parse {
                row,
                column: record.len(),
                detail: format!("expected {} cells, found {}", vars + 1, record.len()),
            });
        }
        timestamps.push(record[0].trim().to_string());
        for col in 1..=vars {
            let cell = record[col].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: col,
                detail: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: col,
                    detail: format!("non-finite cell {cell:?}"),
                });
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }
    Ok(RawSeries {
        values: Tensor::new(vec![timestamps.len(), vars], values)?,
        timestamps,
        variable_names,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }
}

impl std::str::FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Chronological split with standardization statistics from the train range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DatasetSplit {
    /// Splits by time order: the first `train_ratio` of rows train, the next
    /// `val_ratio` validate, the remainder test.
    pub fn by_ratio(series: &RawSeries, train_ratio: f64, val_ratio: f64) -> Result<Self> {
        let valid = train_ratio > 0.0 && val_ratio >= 0.0 && train_ratio + val_ratio < 1.0;
        if !valid {
            return Err(Error::Config(format!(
                "split ratios train={train_ratio} val={val_ratio} must be positive and sum below 1"
            )));
        }
        let n = series.len();
        let n_train = (n as f64 * train_ratio).floor() as usize;
        let n_val = (n as f64 * val_ratio).floor() as usize;
        Self::from_ranges(series, 0..n_train, n_train..n_train + n_val, n_train + n_val..n)
    }

    pub fn from_ranges(
        series: &RawSeries,
        train: Range<usize>,
        val: Range<usize>,
        test: Range<usize>,
    ) -> Result<Self> {
        let ordered = train.start <= train.end
            && train.end <= val.start
            && val.start <= val.end
            && val.end <= test.start
            && test.start <= test.end
            && test.end <= series.len();
        if !ordered || train.is_empty() {
            return Err(Error::Config(format!(
                "split ranges must be ordered and disjoint: {train:?} {val:?} {test:?} over {} rows",
                series.len()
            )));
        }
        let (mean, std) = column_stats(&series.values, train.clone());
        if let Some(v) = std.iter().position(|&s| s <= 0.0) {
            return Err(Error::Format(format!(
                "variable {} is constant over the training range",
                series.variable_names[v]
            )));
        }
        Ok(Self {
            train,
            val,
            test,
            mean,
            std,
        })
    }

    pub fn range(&self, part: Part) -> Range<usize> {
        match part {
            Part::Train => self.train.clone(),
            Part::Val => self.val.clone(),
            Part::Test => self.test.clone(),
        }
    }

    /// Restricts training to a prefix of the train range. Statistics are
    /// left as computed on the full train range.
    pub fn with_few_shot(mut self, fraction: f64) -> Result<Self> {
        self.train = few_shot_subset(self.train.clone(), fraction)?;
        Ok(self)
    }

    pub fn standardize(&self, value: f64, var: usize) -> f64 {
        (value - self.mean[var]) / self.std[var]
    }
}

/// Per-column mean and population standard deviation over `rows`.
fn column_stats(values: &Tensor, rows: Range<usize>) -> (Vec<f64>, Vec<f64>) {
    let d = values.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(values.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(values.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    (mean, std)
}

/// The first `floor(fraction * len)` steps of the training range.
pub fn few_shot_subset(train: Range<usize>, fraction: f64) -> Result<Range<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("few-shot fraction {fraction} not in (0, 1]")));
    }
    let keep = (fraction * train.len() as f64).floor() as usize;
    Ok(train.start..train.start + keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub input_len: usize,
    pub horizon: usize,
    pub stride: usize,
    pub chart_height: usize,
    pub patch_count: usize,
}

/// One supervised example in standardized units.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// `[L x D]` input window.
    pub x_enc: Tensor,
    /// `[H x D]` forecast target.
    pub target: Tensor,
    pub chart: Chart,
    /// Offset of the window within its split.
    pub start_index: usize,
    /// Row of the window's first input step in the full series.
    pub series_index: usize,
}

/// Number of windows that fit: `floor((n - L - H) / stride) + 1`.
pub fn window_count(n: usize, input_len: usize, horizon: usize, stride: usize) -> usize {
    if stride == 0 || n < input_len + horizon {
        0
    } else {
        (n - input_len - horizon) / stride + 1
    }
}

pub fn make_windows(
    series: &RawSeries,
    split: &DatasetSplit,
    part: Part,
    spec: &WindowSpec,
    exec: Execution,
) -> Result<Vec<WindowSample>> {
    if spec.stride == 0 || spec.input_len == 0 || spec.horizon == 0 {
        return Err(Error::Config(format!("invalid window spec {spec:?}")));
    }
    let range = split.range(part);
    let count = window_count(range.len(), spec.input_len, spec.horizon, spec.stride);
    if count == 0 {
        return Err(Error::EmptySplit(format!(
            "{} split has {} steps, windows need L + H = {}",
            part.as_str(),
            range.len(),
            spec.input_len + spec.horizon
        )));
    }
    let d = series.num_vars();
    let extract = |start: usize, len: usize| -> Result<Tensor> {
        let mut data = Vec::with_capacity(len * d);
        for r in start..start + len {
            for (v, &x) in series.values.row(r).iter().enumerate() {
                data.push(split.standardize(x, v));
            }
        }
        Tensor::new(vec![len, d], data)
    };
    exec.map_range(count, |w| {
        let offset = w * spec.stride;
        let start = range.start + offset;
        let x_enc = extract(start, spec.input_len)?;
        let target = extract(start + spec.input_len, spec.horizon)?;
        let chart = render_chart(&x_enc, spec.chart_height, spec.patch_count)?;
        Ok(WindowSample {
            x_enc,
            target,
            chart,
            start_index: offset,
            series_index: start,
        })
    })
    .into_iter()
    .collect()
}

/// CSV manifest of window start offsets, for reproducibility audits.
pub fn windows_manifest(windows: &[(Part, &[WindowSample])]) -> String {
    let mut out = String::from("start_index,split\n");
    for (part, samples) in windows {
        for s in samples.iter() {
            out.push_str(&format!("{},{}\n", s.start_index, part.as_str()));
        }
    }
    out
}
