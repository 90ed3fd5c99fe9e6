//! Window preparation, Adam, the epoch loop with early stopping, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainConfig};
use crate::data::{make_windows, DatasetSplit, Part, RawSeries, WindowSample, WindowSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{Metrics, MetricsAccumulator};
use crate::model::Model;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::EventLog;

/// Windows of one split with the event texts overlapping each input span.
#[derive(Debug, Clone, Default)]
pub struct WindowSet {
    pub samples: Vec<WindowSample>,
    pub events: Vec<Vec<String>>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn build(
        series: &RawSeries,
        split: &DatasetSplit,
        part: Part,
        spec: &WindowSpec,
        log: Option<&EventLog>,
        exec: Execution,
    ) -> Result<Self> {
        let samples = make_windows(series, split, part, spec, exec)?;
        let events = samples
            .iter()
            .map(|s| match log {
                Some(log) if !series.timestamps.is_empty() => {
                    let first = &series.timestamps[s.series_index];
                    let last = &series.timestamps[s.series_index + spec.input_len - 1];
                    log.overlapping(first, last)
                }
                _ => Vec::new(),
            })
            .collect();
        Ok(Self { samples, events })
    }

    /// Every `stride`-th window, for cheaper monitoring passes.
    pub fn strided(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        Self {
            samples: self.samples.iter().step_by(stride).cloned().collect(),
            events: self.events.iter().step_by(stride).cloned().collect(),
        }
    }
}

/// Split, statistics and windows for a run. The test set is absent when the
/// test range is too short for a single window.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: Option<WindowSet>,
}

impl PreparedData {
    pub fn new(series: &RawSeries, log: Option<&EventLog>, run: &RunConfig, exec: Execution) -> Result<Self> {
        run.validate()?;
        let mut split = DatasetSplit::by_ratio(series, run.train.train_ratio, run.train.val_ratio)?;
        if let Some(f) = run.train.few_shot_fraction {
            split = split.with_few_shot(f)?;
        }
        Self::with_split(series, log, run, split, exec)
    }

    pub fn with_split(
        series: &RawSeries,
        log: Option<&EventLog>,
        run: &RunConfig,
        split: DatasetSplit,
        exec: Execution,
    ) -> Result<Self> {
        let spec = |stride| WindowSpec {
            input_len: run.model.input_len,
            horizon: run.model.horizon,
            stride,
            chart_height: run.model.chart_height,
            patch_count: run.model.patch_count(),
        };
        let train = WindowSet::build(series, &split, Part::Train, &spec(run.train.train_stride), log, exec)?;
        let val = WindowSet::build(series, &split, Part::Val, &spec(run.train.eval_stride), log, exec)?;
        let test = match WindowSet::build(series, &split, Part::Test, &spec(run.train.eval_stride), log, exec) {
            Ok(t) => Some(t),
            Err(Error::EmptySplit(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { split, train, val, test })
    }
}

/// Adam with per-parameter step counts. Parameters that receive no gradient
/// in a step are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: Vec<Option<AdamSlot>>,
}

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if self.state.len() < params.len() {
            self.state.resize(params.len(), None);
        }
        for (id, g) in grads {
            let p = params.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("param {:?} grad {:?}", p.shape(), g.shape())));
            }
            let slot = self.state[id.index()].get_or_insert_with(|| AdamSlot {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
                t: 0,
            });
            slot.t += 1;
            let c1 = 1.0 - self.beta1.powi(slot.t);
            let c2 = 1.0 - self.beta2.powi(slot.t);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut slot.m).zip(&mut slot.v) {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Mean loss and mean gradients over `indices`. Per-sample gradients run
/// under `exec` and are summed in index order, so the result does not depend
/// on scheduling.
pub fn batch_gradient(
    model: &Model,
    set: &WindowSet,
    indices: &[usize],
    exec: Execution,
) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    if indices.is_empty() {
        return Err(Error::EmptySplit("empty batch".into()));
    }
    let results = exec.map(indices, |&i| model.loss_and_grads(&set.samples[i], &set.events[i]));
    let mut total: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
    let mut loss = 0.0;
    for r in results {
        let (l, grads) = r?;
        loss += l;
        for (id, g) in grads {
            match &mut total[id.index()] {
                Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.into_vec()),
            }
        }
    }
    let n = indices.len() as f64;
    let grads = total
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|g| (i, g)))
        .map(|(i, g)| {
            let id = model.params.id_at(i);
            let shape = model.params.get(id).shape().to_vec();
            Tensor::new(shape, g.into_iter().map(|v| v / n).collect()).map(|t| (id, t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss / n, grads))
}

/// Scores the fused forecast over every window of `set`.
pub fn evaluate(model: &Model, set: &WindowSet, exec: Execution) -> Result<Metrics> {
    let forecasts = exec.map_range(set.len(), |i| model.predict(&set.samples[i], &set.events[i]));
    let mut acc = MetricsAccumulator::new(model.config.horizon, model.num_vars());
    for (f, s) in forecasts.into_iter().zip(&set.samples) {
        acc.add(&f?.fused, &s.target)?;
    }
    acc.finish()
}

/// Patience counter over validation scores. Lower is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records a score and reports whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        if score < self.best {
            self.best = score;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub log: TrainLog,
}

pub fn train(model: Model, data: &PreparedData, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    train_with(model, data, cfg, exec, |_| {})
}

/// Like [`train`], calling `on_epoch` after each validation pass.
pub fn train_with(
    mut model: Model,
    data: &PreparedData,
    cfg: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptySplit("training needs train and validation windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut log = TrainLog::default();
    let mut best_params = model.params.clone();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let step_cap = cfg.max_steps.unwrap_or(usize::MAX);

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            if log.steps.len() >= step_cap {
                break;
            }
            let (loss, grads) = batch_gradient(&model, &data.train, batch, exec)?;
            if grads.iter().any(|(_, g)| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite gradient at step {}", log.steps.len())));
            }
            adam.step(&mut model.params, &grads, lr)?;
            log.steps.push(StepRecord {
                step: log.steps.len(),
                epoch: epoch + 1,
                lr,
                loss,
            });
            epoch_loss += loss;
            epoch_steps += 1;
        }
        if epoch_steps == 0 {
            break;
        }
        let val = evaluate(&model, &data.val, exec)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: epoch_loss / epoch_steps as f64,
            val_mse: val.mse,
            val_mae: val.mae,
            steps: epoch_steps,
        };
        on_epoch(&record);
        log.epochs.push(record);
        if stopper.observe(val.mse) {
            best_params = model.params.clone();
            log.best_epoch = epoch + 1;
        }
        if stopper.should_stop() {
            log.stopped_early = true;
            break;
        }
        if log.steps.len() >= step_cap {
            break;
        }
    }
    model.params = best_params;
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_after_one_bad_epoch() {
        let mut s = EarlyStopping::new(1);
        let mut stopped_at = None;
        for (epoch, score) in [(1, 0.9), (2, 0.5), (3, 0.6), (4, 0.4)] {
            s.observe(score);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(3));
        assert_eq!(s.best(), 0.5);
    }

    #[test]
    fn patience_resets_on_improvement() {
        let mut s = EarlyStopping::new(2);
        for score in [1.0, 1.1, 0.9, 1.0] {
            s.observe(score);
            assert!(!s.should_stop());
        }
        s.observe(1.0);
        assert!(s.should_stop());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias correction makes the first update lr * sign(g)
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&TrainConfig::default());
        let g = Tensor::new(vec![3], vec![0.5, -4.0, 0.0]).unwrap();
        adam.step(&mut store, &[(id, g)], 0.1).unwrap();
        let w = store.get(id).data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 2.1).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![2], vec![5.0, -3.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&TrainConfig::default());
        for _ in 0..2000 {
            let g = store.get(id).map(|w| 2.0 * (w - 1.0));
            adam.step(&mut store, &[(id, g)], 0.05).unwrap();
        }
        assert!(store.get(id).data().iter().all(|w| (w - 1.0).abs() < 1e-3));
    }
}
