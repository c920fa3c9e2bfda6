//! Forecast metrics, expert-routing diagnostics and result tables.

use std::fmt::Write as _;

use ndarray::{Array3, ArrayView, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::data::{ForecastWindow, Scaler};
use crate::drift::{patch_distance_matrix, Domain};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::{predict_windows, stack};

fn check_same<D: Dimension>(a: &ArrayView<'_, f64, D>, b: &ArrayView<'_, f64, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("no values to score".into()));
    }
    Ok(())
}

/// Mean squared error over every entry.
pub fn mse<D: Dimension>(pred: ArrayView<'_, f64, D>, target: ArrayView<'_, f64, D>) -> Result<f64> {
    check_same(&pred, &target)?;
    let sum: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Mean absolute error over every entry.
pub fn mae<D: Dimension>(pred: ArrayView<'_, f64, D>, target: ArrayView<'_, f64, D>) -> Result<f64> {
    check_same(&pred, &target)?;
    let sum: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Percentage improvement of `model` over the mean of `baselines`.
pub fn imp(model: f64, baselines: &[f64]) -> Result<f64> {
    if baselines.is_empty() {
        return Err(Error::Empty("no baseline scores".into()));
    }
    let avg = baselines.iter().sum::<f64>() / baselines.len() as f64;
    if !(avg > 0.0) {
        return Err(Error::Config(format!("baseline average must be positive, got {avg}")));
    }
    Ok((avg - model) / avg * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

impl Metrics {
    pub fn of(pred: &Array3<f64>, target: &Array3<f64>) -> Result<Self> {
        Ok(Self {
            mse: mse(pred.view(), target.view())?,
            mae: mae(pred.view(), target.view())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_windows: usize,
    /// Errors on the scaled data.
    pub normalized: Metrics,
    /// Errors in original units, when a scaler was supplied.
    pub denormalized: Option<Metrics>,
}

fn unscale(values: &mut Array3<f64>, scaler: &Scaler) -> Result<()> {
    if values.len_of(Axis(2)) != scaler.n_channels() {
        return Err(Error::Shape(format!(
            "scaler has {} channels, data has {}",
            scaler.n_channels(),
            values.len_of(Axis(2))
        )));
    }
    for mut lane in values.lanes_mut(Axis(2)) {
        for (c, v) in lane.iter_mut().enumerate() {
            *v = *v * scaler.std[c] + scaler.mean[c];
        }
    }
    Ok(())
}

/// Scores eval-mode forecasts of every window.
pub fn evaluate(model: &Model, windows: &[ForecastWindow], batch_size: usize, scaler: Option<&Scaler>) -> Result<EvalReport> {
    let mut pred = predict_windows(model, windows, batch_size)?;
    let refs: Vec<_> = windows.iter().collect();
    let (_, mut target) = stack(&refs)?;
    let normalized = Metrics::of(&pred, &target)?;
    let denormalized = scaler
        .map(|s| {
            unscale(&mut pred, s)?;
            unscale(&mut target, s)?;
            Metrics::of(&pred, &target)
        })
        .transpose()?;
    Ok(EvalReport {
        n_windows: windows.len(),
        normalized,
        denormalized,
    })
}

/// Argmax routing of one branch over a set of windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRouting {
    pub branch: String,
    pub n_tokens: usize,
    /// Fraction of tokens whose highest score selects each expert.
    pub shares: Vec<f64>,
    /// Mean patch Wasserstein distance between patches routed to the same expert.
    pub intra_distance: Option<f64>,
    /// Same, for patches routed to different experts.
    pub inter_distance: Option<f64>,
    /// Expert index per token in `(window, channel, patch)` order.
    #[serde(skip)]
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub n_windows: usize,
    pub n_channels: usize,
    pub n_patches: usize,
    pub time: Option<BranchRouting>,
    pub freq: Option<BranchRouting>,
}

fn argmax_row(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

fn branch_routing(
    name: &str,
    assignments: Vec<usize>,
    n_experts: usize,
    windows: &[ForecastWindow],
    n_patches: usize,
    domain: Domain,
    model: &Model,
) -> Result<BranchRouting> {
    let mut counts = vec![0usize; n_experts];
    for &a in &assignments {
        counts[a] += 1;
    }
    let n = assignments.len();
    let shares = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let (p, s) = (model.config.patch_len, model.config.stride);
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    let n_channels = windows[0].input.ncols();
    for (w, window) in windows.iter().enumerate() {
        for (c, col) in window.input.axis_iter(Axis(1)).enumerate() {
            let dist = patch_distance_matrix(col, p, s, domain)?;
            let base = (w * n_channels + c) * n_patches;
            for i in 0..n_patches {
                for j in i + 1..n_patches {
                    let d = dist.distances[[i, j]];
                    let slot = if assignments[base + i] == assignments[base + j] {
                        &mut intra
                    } else {
                        &mut inter
                    };
                    slot.0 += d;
                    slot.1 += 1;
                }
            }
        }
    }
    let mean = |(sum, k): (f64, usize)| (k > 0).then(|| sum / k as f64);
    Ok(BranchRouting {
        branch: name.to_string(),
        n_tokens: n,
        shares,
        intra_distance: mean(intra),
        inter_distance: mean(inter),
        assignments,
    })
}

/// Per-branch expert shares and intra/inter-cluster patch drift, using the
/// highest-scoring expert of each token regardless of the trained `k`.
pub fn routing_report(model: &Model, windows: &[ForecastWindow], batch_size: usize) -> Result<RoutingReport> {
    if windows.is_empty() {
        return Err(Error::Empty("no windows to route".into()));
    }
    let mut time = Vec::new();
    let mut freq = Vec::new();
    let mut widths = (0, 0);
    let mut rng = crate::encoder::inference_rng();
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let (x, _) = stack(&refs)?;
        let out = model.forward(x.view(), crate::nn::Mode::Eval, &mut rng)?;
        for (branch, sink, width) in [(&out.time, &mut time, &mut widths.0), (&out.freq, &mut freq, &mut widths.1)] {
            if let Some(scores) = branch.as_ref().and_then(|b| b.scores.as_ref()) {
                *width = scores.ncols();
                sink.extend(scores.rows().into_iter().map(argmax_row));
            }
        }
    }
    let n_patches = model.n_patches();
    let build = |name, a: Vec<usize>, k, domain| {
        (!a.is_empty())
            .then(|| branch_routing(name, a, k, windows, n_patches, domain, model))
            .transpose()
    };
    Ok(RoutingReport {
        n_windows: windows.len(),
        n_channels: windows[0].input.ncols(),
        n_patches,
        time: build("time", time, widths.0, Domain::Time)?,
        freq: build("frequency", freq, widths.1, Domain::Frequency)?,
    })
}

/// Share of tokens that follow the dominant expert of their label:
/// `Σ_label max_expert count(label, expert) / n`.
pub fn purity(labels: &[usize], assignments: &[usize]) -> Result<f64> {
    if labels.len() != assignments.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} assignments",
            labels.len(),
            assignments.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("no tokens".into()));
    }
    let mut counts = std::collections::BTreeMap::<(usize, usize), usize>::new();
    for (&l, &a) in labels.iter().zip(assignments) {
        *counts.entry((l, a)).or_default() += 1;
    }
    let mut best = std::collections::BTreeMap::<usize, usize>::new();
    for ((l, _), c) in counts {
        let e = best.entry(l).or_default();
        *e = (*e).max(c);
    }
    Ok(best.values().sum::<usize>() as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "MSE")]
    pub mse: f64,
    #[serde(rename = "MAE")]
    pub mae: f64,
    #[serde(rename = "IMP")]
    pub imp: Option<f64>,
}

/// Rows sorted by `(dataset, H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<ResultRow>,
}

pub fn report_table(mut rows: Vec<ResultRow>) -> ReportTable {
    rows.sort_by(|a, b| a.dataset.cmp(&b.dataset).then(a.horizon.cmp(&b.horizon)));
    ReportTable { rows }
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>5}  {:>8}  {:>8}  {:>7}\n", "dataset", "H", "MSE", "MAE", "IMP");
        for r in &self.rows {
            let imp = r.imp.map_or("-".to_string(), |v| format!("{v:.1}%"));
            let _ = writeln!(
                out,
                "{:<width$}  {:>5}  {:>8.3}  {:>8.3}  {:>7}",
                r.dataset, r.horizon, r.mse, r.mae, imp
            );
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(["dataset", "H", "MSE", "MAE", "IMP"])
                .map_err(|e| Error::Shape(e.to_string()))?;
        }
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Shape(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Shape(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .enumerate()
            .map(|(i, row)| {
                row.map_err(|e| Error::Parse {
                    row: i + 1,
                    column: String::new(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<ResultRow>>>()?;
        Ok(Self { rows })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows)?)
    }
}
