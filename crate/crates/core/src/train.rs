//! Mini-batch Adam on `MSE + PI_t + PI_f`, early stopping on validation
//! MSE, and grid search over configuration values.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{make_windows, split, ForecastWindow, MultivariateSeries, Scaler, SplitRatios};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{zeros_like, Mode, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub split: SplitRatios,
    /// Offset between consecutive training windows.
    pub window_stride: usize,
    /// Offset between consecutive validation and test windows.
    pub eval_stride: usize,
    /// CSV column holding timestamps; the first column when absent.
    pub timestamp_column: Option<String>,
    /// Subset of CSV columns to model; every numeric column when absent.
    pub channels: Option<Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 2024,
            adam: AdamConfig::default(),
            split: SplitRatios::ETT,
            window_stride: 1,
            eval_stride: 1,
            timestamp_column: None,
            channels: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.split.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if self.window_stride == 0 || self.eval_stride == 0 {
            return bad("window strides must be positive");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        Ok(())
    }

    /// Parses and validates a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean squared error over every entry plus both pattern-identifier losses.
pub fn total_loss(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>, pi_time: f64, pi_freq: f64) -> Result<f64> {
    Ok(crate::eval::mse(pred, target)? + pi_time + pi_freq)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub config: AdamConfig,
    step: i32,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new<T: Parameters>(params: &T, learning_rate: f64, config: AdamConfig) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, a| m.push(ArrayD::zeros(a.shape())));
        Self {
            learning_rate,
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step<T: Parameters>(&mut self, params: &mut T, grads: &T) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let mut gs = Vec::with_capacity(self.m.len());
        grads.visit("", &mut |_, g| gs.push(g.to_owned()));
        let mut slot = 0;
        let lr = self.learning_rate;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, mut p| {
            let (m, v, g) = (&mut ms[slot], &mut vs[slot], &gs[slot]);
            ndarray::Zip::from(&mut p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            slot += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MSE.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

/// Stacks windows into `[B × L × C]` inputs and `[B × H × C]` targets.
pub fn stack(windows: &[&ForecastWindow]) -> Result<(Array3<f64>, Array3<f64>)> {
    let inputs: Vec<_> = windows.iter().map(|w| w.input.view()).collect();
    let targets: Vec<_> = windows.iter().map(|w| w.target.view()).collect();
    let x = ndarray::stack(Axis(0), &inputs).map_err(|e| Error::Shape(e.to_string()))?;
    let y = ndarray::stack(Axis(0), &targets).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((x, y))
}

/// Eval-mode forecasts for every window, in order.
pub fn predict_windows(model: &Model, windows: &[ForecastWindow], batch_size: usize) -> Result<Array3<f64>> {
    if windows.is_empty() {
        return Err(Error::Empty("no windows to predict".into()));
    }
    let parts = windows
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<_> = chunk.iter().collect();
            let (x, _) = stack(&refs)?;
            model.predict(x.view())
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// MSE of eval-mode forecasts against the window targets.
pub fn evaluate_mse(model: &Model, windows: &[ForecastWindow], batch_size: usize) -> Result<f64> {
    let pred = predict_windows(model, windows, batch_size)?;
    let refs: Vec<_> = windows.iter().collect();
    let (_, y) = stack(&refs)?;
    crate::eval::mse(pred.view(), y.view())
}

/// Trains from the config's seed. Deterministic for a fixed config and data.
pub fn train(cfg: &TrainConfig, train_set: &[ForecastWindow], val_set: &[ForecastWindow]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set has no windows".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set has no windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(&mut rng, cfg.model.clone())?;
    let mut adam = Adam::new(&model, cfg.learning_rate, cfg.adam);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut mse_sum, mut n_batches) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<_> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = stack(&refs)?;
            let out = model.forward(x.view(), Mode::Train, &mut rng)?;
            let mse = crate::eval::mse(out.forecast.view(), y.view())?;
            let loss = mse + out.pi_time() + out.pi_freq();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss,
                });
            }
            let scale = 2.0 / y.len() as f64;
            let g = (&out.forecast - &y) * scale;
            let mut grad = zeros_like(&model);
            model.backward(&out, g.view(), &mut grad)?;
            adam.step(&mut model, &grad);
            model.absorb(&out);
            // A blown-up update would otherwise surface later as a confusing shape error.
            let mut finite = true;
            model.visit("", &mut |_, a| finite &= a.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: f64::NAN,
                });
            }
            loss_sum += loss;
            mse_sum += mse;
            n_batches += 1;
        }
        let val_mse = evaluate_mse(&model, val_set, cfg.batch_size)?;
        if !val_mse.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                loss: val_mse,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            train_mse: mse_sum / n_batches as f64,
            val_mse,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} train mse {:.6} val mse {:.6}",
            record.train_loss,
            record.train_mse,
            val_mse
        );
        history.push(record);
        if best.as_ref().is_none_or(|(_, _, v)| val_mse < *v) {
            best = Some((model.clone(), epoch, val_mse));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop after {epoch} epochs");
                break;
            }
        }
    }
    let (model, best_epoch, best_val_mse) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_mse,
    })
}

/// Scaled windows for the three splits plus the scaler fitted on train.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub scaler: Scaler,
    pub train: Vec<ForecastWindow>,
    pub val: Vec<ForecastWindow>,
    pub test: Vec<ForecastWindow>,
}

pub fn prepare(series: &MultivariateSeries, cfg: &TrainConfig) -> Result<PreparedData> {
    let (l, h) = (cfg.model.lookback, cfg.model.horizon);
    let (train_s, val_s, test_s) = split(series, cfg.split, l + h)?;
    let scaler = Scaler::fit(&train_s);
    let windows = |s: &MultivariateSeries, stride: usize| make_windows(&scaler.apply(s)?, l, h, stride);
    Ok(PreparedData {
        train: windows(&train_s, cfg.window_stride)?,
        val: windows(&val_s, cfg.eval_stride)?,
        test: windows(&test_s, cfg.eval_stride)?,
        scaler,
    })
}

/// Field path (dot separated, relative to the config root) to candidate values.
pub type GridSpace = BTreeMap<String, Vec<Value>>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridRow {
    /// Position of the cell in enumeration order.
    pub cell: usize,
    pub overrides: BTreeMap<String, Value>,
    pub val_mse: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best_config: TrainConfig,
    pub best: TrainOutcome,
    /// Successful cells ascending by validation MSE, then failed cells.
    pub leaderboard: Vec<GridRow>,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("grid key {path:?} does not name a config field")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config field {path:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Ok(())
}

/// Expands the cartesian product in key order (last key varies fastest).
pub fn expand_grid(base: &TrainConfig, space: &GridSpace) -> Result<Vec<(BTreeMap<String, Value>, Result<TrainConfig>)>> {
    if space.is_empty() || space.values().any(Vec::is_empty) {
        return Err(Error::Config("grid space needs at least one value per key".into()));
    }
    let base_json = serde_json::to_value(base)?;
    let mut cells = vec![BTreeMap::new()];
    for (key, values) in space {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c: BTreeMap<String, Value> = cell.clone();
                    c.insert(key.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    Ok(cells
        .into_iter()
        .map(|overrides| {
            let cfg = (|| {
                let mut json = base_json.clone();
                for (k, v) in &overrides {
                    set_path(&mut json, k, v.clone())?;
                }
                let cfg: TrainConfig = serde_json::from_value(json)?;
                cfg.validate()?;
                Ok(cfg)
            })();
            (overrides, cfg)
        })
        .collect())
}

/// Trains every cell (at most `budget` of them) and ranks by validation MSE.
pub fn grid_search(base: &TrainConfig, space: &GridSpace, budget: Option<usize>, data: &PreparedData) -> Result<GridResult> {
    let mut cells = expand_grid(base, space)?;
    if let Some(b) = budget {
        cells.truncate(b.max(1));
    }
    let runs: Vec<(GridRow, Option<(TrainConfig, TrainOutcome)>)> = cells
        .into_par_iter()
        .enumerate()
        .map(|(cell, (overrides, cfg))| {
            let result = cfg.and_then(|cfg| train(&cfg, &data.train, &data.val).map(|o| (cfg, o)));
            match result {
                Ok((cfg, outcome)) => {
                    log::info!("grid cell {cell}: val mse {:.6}", outcome.best_val_mse);
                    let row = GridRow {
                        cell,
                        overrides,
                        val_mse: Some(outcome.best_val_mse),
                        best_epoch: Some(outcome.best_epoch),
                        error: None,
                    };
                    (row, Some((cfg, outcome)))
                }
                Err(e) => {
                    log::warn!("grid cell {cell} failed: {e}");
                    let row = GridRow {
                        cell,
                        overrides,
                        val_mse: None,
                        best_epoch: None,
                        error: Some(e.to_string()),
                    };
                    (row, None)
                }
            }
        })
        .collect();
    let mut best: Option<(TrainConfig, TrainOutcome)> = None;
    let mut leaderboard = Vec::with_capacity(runs.len());
    for (row, run) in runs {
        if let Some((cfg, outcome)) = run {
            if best.as_ref().is_none_or(|(_, b)| outcome.best_val_mse < b.best_val_mse) {
                best = Some((cfg, outcome));
            }
        }
        leaderboard.push(row);
    }
    leaderboard.sort_by(|a, b| match (a.val_mse, b.val_mse) {
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.cell.cmp(&b.cell)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cell.cmp(&b.cell),
    });
    let (best_config, best) = best.ok_or_else(|| {
        Error::Config(format!(
            "every grid cell failed; first error: {}",
            leaderboard[0].error.as_deref().unwrap_or("unknown")
        ))
    })?;
    Ok(GridResult {
        best_config,
        best,
        leaderboard,
    })
}
