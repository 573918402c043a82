//! Normalisation, loss, scheduled sampling and the epoch loop.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use pmdm_tensor::{Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bind::Binder;
use crate::data::{assemble, TrafficSeries, WindowSet};
use crate::error::{Error, Result, StageExt};
use crate::metrics::{EvalReport, DEFAULT_MAPE_MASK};
use crate::model::{DecoderInput, Mode, PmDmNet, Teacher};

/// Parameter names used when a normaliser is stored in a checkpoint.
pub const NORM_MEAN: &str = "norm.mean";
pub const NORM_STD: &str = "norm.std";

/// Per-channel z-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Config(format!(
                "normaliser has {} means and {} deviations",
                mean.len(),
                std.len()
            )));
        }
        if let Some(c) = std.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Data(format!(
                "channel {c} has zero or undefined standard deviation"
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data("normaliser mean is not finite".into()));
        }
        Ok(Self { mean, std })
    }

    /// Statistics over steps `from..to` of the series.
    pub fn fit(series: &TrafficSeries, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > series.steps() {
            return Err(Error::Data(format!(
                "cannot fit a normaliser on steps {from}..{to} of {}",
                series.steps()
            )));
        }
        let c = series.channels();
        let (mut sum, mut count) = (vec![0.0; c], 0usize);
        for k in from..to {
            for (i, v) in series.step(k).iter().enumerate() {
                sum[i % c] += v;
            }
            count += series.nodes();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; c];
        for k in from..to {
            for (i, v) in series.step(k).iter().enumerate() {
                let d = v - mean[i % c];
                var[i % c] += d * d;
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        Self::new(mean, std)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.shape().last() != Some(&self.channels()) {
            return Err(Error::Config(format!(
                "normaliser has {} channels, array is {:?}",
                self.channels(),
                t.shape()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let c = self.channels();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect();
        Ok(Tensor::new(t.shape(), data)?)
    }

    pub fn denormalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let c = self.channels();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % c] + self.mean[i % c])
            .collect();
        Ok(Tensor::new(t.shape(), data)?)
    }

    /// `y · std + mean` inside the graph, so the loss sees raw units.
    pub fn denormalize_var<'g>(&self, y: Var<'g>) -> Result<Var<'g>> {
        let g = y.graph();
        let std = g.constant(Tensor::from_vec(self.std.clone()));
        let mean = g.constant(Tensor::from_vec(self.mean.clone()));
        y.mul(std).and_then(|v| v.add(mean)).stage("denormalisation")
    }

    pub fn to_tensors(&self) -> [(String, Tensor); 2] {
        [
            (NORM_MEAN.to_string(), Tensor::from_vec(self.mean.clone())),
            (NORM_STD.to_string(), Tensor::from_vec(self.std.clone())),
        ]
    }

    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .get(name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::MissingParameter(name.to_string()))
        };
        Self::new(get(NORM_MEAN)?, get(NORM_STD)?)
    }
}

/// Mean absolute error between equally shaped arrays.
pub fn mae_loss<'g>(pred: Var<'g>, truth: Var<'g>) -> Result<Var<'g>> {
    if pred.shape() != truth.shape() {
        return Err(Error::Config(format!(
            "loss inputs differ in shape: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    Ok(pred.sub(truth).stage("loss")?.abs().mean())
}

/// Inverse-sigmoid decay `c / (c + exp(iter / c))`.
pub fn scheduled_sampling_eps(iter: u64, c: f64) -> f64 {
    c / (c + (iter as f64 / c).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Upper bound on the number of epochs.
    pub epochs: usize,
    pub patience: usize,
    /// Decay constant `c` of the sampling schedule.
    pub ss_constant: f64,
    pub seed: u64,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    /// Stop once the training windows, forecast in inference mode, score an
    /// MAE at or below this value.
    pub target_train_mae: Option<f64>,
    /// Use this sampling probability instead of the schedule.
    pub fixed_eps: Option<f64>,
    /// Restore the parameters of the best validation epoch at the end.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            batch_size: 64,
            epochs: 100,
            patience: 15,
            ss_constant: 2000.0,
            seed: 0,
            grad_clip: None,
            target_train_mae: None,
            fixed_eps: None,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.ss_constant > 0.0) {
            return Err(Error::Config("ss_constant must be positive".into()));
        }
        if let Some(e) = self.fixed_eps {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("fixed_eps must lie in [0, 1], got {e}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    /// Sampling probability at the end of the epoch; `None` when the model
    /// never samples.
    pub epsilon: Option<f64>,
    pub wall_seconds: f64,
    /// Inference-mode MAE on the training windows, computed only when a
    /// training target is set.
    pub train_eval_mae: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_mae", "val_mae", "val_rmse", "epsilon", "wall_seconds"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_mae.to_string(),
                r.val_mae.to_string(),
                r.val_rmse.to_string(),
                r.epsilon.map_or_else(|| "NA".to_string(), |e| e.to_string()),
                format!("{:.3}", r.wall_seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Counters carried across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    /// Optimiser steps taken so far; drives the sampling schedule.
    pub iteration: u64,
    pub best_val_mae: f64,
    pub patience_counter: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub loss: f64,
    pub samples: usize,
    pub epsilon: Option<f64>,
    pub decoder_inputs: Vec<DecoderInput>,
}

/// Owns the parameters for the duration of training.
pub struct Trainer<'a> {
    pub model: &'a PmDmNet,
    pub store: ParamStore,
    pub normalizer: Normalizer,
    pub config: TrainConfig,
    pub state: TrainState,
    rng: ChaCha8Rng,
    eps_queries: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a PmDmNet,
        store: ParamStore,
        normalizer: Normalizer,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if normalizer.channels() != model.config.channels {
            return Err(Error::Config(format!(
                "normaliser has {} channels, model expects {}",
                normalizer.channels(),
                model.config.channels
            )));
        }
        let seed = config.seed;
        Ok(Self {
            model,
            store,
            normalizer,
            state: TrainState {
                epoch: 0,
                iteration: 0,
                best_val_mae: f64::INFINITY,
                patience_counter: 0,
                seed,
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
            config,
            eps_queries: 0,
        })
    }

    /// How many times the sampling probability has been read.
    pub fn eps_queries(&self) -> u64 {
        self.eps_queries
    }

    fn uses_sampling(&self) -> bool {
        self.model.config.mode == Mode::Recursive && !self.model.config.no_decoder
    }

    fn epsilon(&mut self) -> f64 {
        self.eps_queries += 1;
        self.config
            .fixed_eps
            .unwrap_or_else(|| scheduled_sampling_eps(self.state.iteration, self.config.ss_constant))
    }

    /// One optimiser step on the given windows. `batch` is the batch index
    /// reported if the loss is not finite.
    pub fn train_batch(&mut self, series: &TrafficSeries, starts: &[usize], batch: usize) -> Result<BatchOutcome> {
        let c = &self.model.config;
        let raw = assemble(series, starts, c.n, c.m)?;
        let inputs = self.normalizer.normalize(&raw.inputs)?;
        let targets_norm = self.normalizer.normalize(&raw.targets)?;
        let (epsilon, teacher) = if self.uses_sampling() {
            let eps = self.epsilon();
            (Some(eps), Some(Teacher::sample(&targets_norm, c.m, eps, &mut self.rng)))
        } else {
            (None, None)
        };
        let graph = Graph::new();
        let binder = Binder::new(&graph, &self.store);
        let forecast = self
            .model
            .forward(&binder, &inputs, &raw.times, teacher.as_ref())?;
        let pred = self.normalizer.denormalize_var(forecast.prediction)?;
        let loss = mae_loss(pred, graph.constant(raw.targets))?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.state.epoch,
                batch,
            });
        }
        let grads = graph.backward(loss)?;
        let mut grads = binder.gradients(&grads);
        if let Some(max_norm) = self.config.grad_clip {
            clip_global_norm(&mut grads, max_norm);
        }
        drop(binder);
        self.store.adam_step(&grads, self.config.lr)?;
        self.state.iteration += 1;
        Ok(BatchOutcome {
            loss: value,
            samples: starts.len(),
            epsilon,
            decoder_inputs: forecast.decoder_inputs,
        })
    }

    /// One pass over the shuffled training windows. Returns the
    /// sample-weighted training MAE and the last sampling probability.
    pub fn train_epoch(&mut self, series: &TrafficSeries, train: &WindowSet) -> Result<(f64, Option<f64>)> {
        let mut order = train.starts.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(
            self.state.seed.wrapping_add((self.state.epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        );
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut count, mut eps) = (0.0, 0usize, None);
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let out = self.train_batch(series, chunk, b)?;
            total += out.loss * out.samples as f64;
            count += out.samples;
            eps = out.epsilon;
        }
        Ok((total / count as f64, eps))
    }

    /// Runs epochs until patience runs out, the training target is met or
    /// the epoch limit is reached.
    pub fn fit(&mut self, series: &TrafficSeries, train: &WindowSet, val: &WindowSet) -> Result<History> {
        let clock = Instant::now();
        let mut history = History::default();
        let mut best = self.store.values();
        while self.state.epoch < self.config.epochs {
            let (train_mae, epsilon) = self.train_epoch(series, train)?;
            self.state.epoch += 1;
            let (pred, truth) = forecast_windows(self.model, &self.store, &self.normalizer, series, val, self.config.batch_size)?;
            let report = crate::metrics::pointwise_metrics(&pred, &truth, DEFAULT_MAPE_MASK)?;
            let train_eval_mae = match self.config.target_train_mae {
                Some(_) => {
                    let (p, t) = forecast_windows(self.model, &self.store, &self.normalizer, series, train, self.config.batch_size)?;
                    Some(crate::metrics::pointwise_metrics(&p, &t, DEFAULT_MAPE_MASK)?.mae)
                }
                None => None,
            };
            history.records.push(EpochRecord {
                epoch: self.state.epoch,
                train_mae,
                val_mae: report.mae,
                val_rmse: report.rmse,
                epsilon,
                wall_seconds: clock.elapsed().as_secs_f64(),
                train_eval_mae,
            });
            if report.mae < self.state.best_val_mae {
                self.state.best_val_mae = report.mae;
                self.state.patience_counter = 0;
                history.best_epoch = Some(self.state.epoch);
                best = self.store.values();
            } else {
                self.state.patience_counter += 1;
                if self.state.patience_counter >= self.config.patience {
                    break;
                }
            }
            if let (Some(target), Some(mae)) = (self.config.target_train_mae, train_eval_mae) {
                if mae <= target {
                    break;
                }
            }
        }
        if self.config.restore_best && history.best_epoch.is_some() {
            self.store.restore(&best)?;
        }
        Ok(history)
    }
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * s);
        }
    }
}

/// Denormalised forecasts and raw targets for every window, `[B, m, N, C]`.
pub fn forecast_windows(
    model: &PmDmNet,
    store: &ParamStore,
    normalizer: &Normalizer,
    series: &TrafficSeries,
    windows: &WindowSet,
    batch_size: usize,
) -> Result<(Tensor, Tensor)> {
    let c = &model.config;
    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    for chunk in windows.starts.chunks(batch_size.max(1)) {
        let raw = assemble(series, chunk, c.n, c.m)?;
        let inputs = normalizer.normalize(&raw.inputs)?;
        let y = model.predict(store, &inputs, &raw.times)?;
        preds.extend(normalizer.denormalize(&y)?.into_vec());
        truths.extend(raw.targets.into_vec());
    }
    let shape = [windows.len(), c.m, c.nodes, c.channels];
    Ok((Tensor::new(&shape, preds)?, Tensor::new(&shape, truths)?))
}

/// Full metric report over a window set.
pub fn evaluate(
    model: &PmDmNet,
    store: &ParamStore,
    normalizer: &Normalizer,
    series: &TrafficSeries,
    windows: &WindowSet,
    batch_size: usize,
) -> Result<EvalReport> {
    let (pred, truth) = forecast_windows(model, store, normalizer, series, windows, batch_size)?;
    EvalReport::compute(&pred, &truth, DEFAULT_MAPE_MASK)
}
