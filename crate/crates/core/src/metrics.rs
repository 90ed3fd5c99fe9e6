//! Forecast error metrics and their CSV / manifest outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// `(mse, mae)` for each forecast step, averaged over windows and variables.
    pub per_step: Vec<(f64, f64)>,
    pub windows: usize,
}

/// Accumulates squared and absolute errors over `[H x D]` forecast pairs.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    horizon: usize,
    vars: usize,
    sq: Vec<f64>,
    abs: Vec<f64>,
    windows: usize,
}

impl MetricsAccumulator {
    pub fn new(horizon: usize, vars: usize) -> Self {
        Self {
            horizon,
            vars,
            sq: vec![0.0; horizon],
            abs: vec![0.0; horizon],
            windows: 0,
        }
    }

    pub fn add(&mut self, forecast: &Tensor, target: &Tensor) -> Result<()> {
        let expect = [self.horizon, self.vars];
        if forecast.shape() != expect || target.shape() != expect {
            return Err(Error::Contract(format!(
                "forecast {:?} and target {:?} must both be {expect:?}",
                forecast.shape(),
                target.shape()
            )));
        }
        for h in 0..self.horizon {
            for (a, b) in forecast.row(h).iter().zip(target.row(h)) {
                let e = a - b;
                self.sq[h] += e * e;
                self.abs[h] += e.abs();
            }
        }
        self.windows += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.windows == 0 {
            return Err(Error::EmptySplit("no windows to score".into()));
        }
        let per_cell = (self.windows * self.vars) as f64;
        let per_step: Vec<(f64, f64)> = self
            .sq
            .iter()
            .zip(&self.abs)
            .map(|(s, a)| (s / per_cell, a / per_cell))
            .collect();
        let total = per_cell * self.horizon as f64;
        let metrics = Metrics {
            mse: self.sq.iter().sum::<f64>() / total,
            mae: self.abs.iter().sum::<f64>() / total,
            per_step,
            windows: self.windows,
        };
        metrics.check_jensen()?;
        Ok(metrics)
    }
}

impl Metrics {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>) -> Result<Self> {
        let mut pairs = pairs.into_iter().peekable();
        let (h, d) = match pairs.peek() {
            Some((f, _)) => (f.rows(), f.cols()),
            None => return Err(Error::EmptySplit("no windows to score".into())),
        };
        let mut acc = MetricsAccumulator::new(h, d);
        for (f, t) in pairs {
            acc.add(f, t)?;
        }
        acc.finish()
    }

    /// `mae^2 <= mse`, with slack for rounding.
    pub fn check_jensen(&self) -> Result<()> {
        if !(self.mse >= 0.0 && self.mae >= 0.0) || self.mae * self.mae > self.mse * (1.0 + 1e-12) + 1e-300 {
            return Err(Error::Numeric(format!(
                "metrics violate mae^2 <= mse: mse={} mae={}",
                self.mse, self.mae
            )));
        }
        Ok(())
    }
}

/// CSV with one row per (dataset, horizon).
pub fn metrics_csv(rows: &[(String, usize, Metrics)]) -> String {
    let mut out = String::from("dataset,horizon,mse,mae\n");
    for (dataset, horizon, m) in rows {
        out.push_str(&format!("{dataset},{horizon},{:.10},{:.10}\n", m.mse, m.mae));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub dataset: String,
    pub horizon: usize,
}
