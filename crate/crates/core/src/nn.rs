//! Dense building blocks with explicit forward caches and hand-written
//! backward passes. Activations are row-major `[tokens × features]`.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Walks named parameter arrays in a fixed order.
///
/// The order is the contract that the optimizer and checkpoint rely on:
/// `visit` and `visit_mut` must yield the same names in the same sequence.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));

    /// Non-trainable state (running statistics). Empty by default.
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {}
    fn visit_buffers_mut(
        &mut self,
        _prefix: &str,
        _f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>),
    ) {
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Same structure as `params`, every entry zero. Used as a gradient buffer.
pub fn zeros_like<T: Parameters + Clone>(params: &T) -> T {
    let mut out = params.clone();
    out.visit_mut("", &mut |_, mut a| a.fill(0.0));
    out
}

/// Flattened copies of every parameter, in visiting order.
pub fn flatten<T: Parameters>(params: &T) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    params.visit("", &mut |name, a| out.push((name.to_string(), a.to_owned())));
    out
}

pub(crate) fn gaussian<R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std is positive");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

/// Affine map `y = x·W + b`, `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, std: f64) -> Self {
        Self {
            weight: gaussian(rng, (d_in, d_out), std),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.d_in() {
            return Err(Error::Shape(format!(
                "linear layer expects {} input features, got {}",
                self.d_in(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        grad_out: ArrayView2<'_, f64>,
        grad: &mut Linear,
    ) -> Array2<f64> {
        grad.weight += &x.t().dot(&grad_out);
        grad.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight.t())
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

/// Normalization flavour used after each residual sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Layer,
    Batch,
}

/// Whether a forward pass is part of training (batch statistics, dropout) or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Layer or batch normalization with learnable scale and shift.
///
/// Layer normalization standardizes every token over its features; batch
/// normalization standardizes every feature over all tokens in the batch and
/// keeps running statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub kind: NormKind,
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    normalized: Array2<f64>,
    /// Per-token (layer) or per-feature (batch) inverse standard deviation.
    inv_std: Array1<f64>,
    /// Batch mean and variance when running statistics should be updated.
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
    affine_only: bool,
}

impl Norm {
    pub fn new(kind: NormKind, dim: usize) -> Self {
        Self {
            kind,
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, mode: Mode) -> (Array2<f64>, NormCache) {
        let (normalized, inv_std, batch_stats, affine_only) = match (self.kind, mode) {
            (NormKind::Layer, _) => {
                let mean = x.mean_axis(Axis(1)).expect("non-empty features");
                let centered = &x - &mean.view().insert_axis(Axis(1));
                let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).unwrap();
                let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
                let normalized = centered * &inv_std.view().insert_axis(Axis(1));
                (normalized, inv_std, None, false)
            }
            (NormKind::Batch, Mode::Train) => {
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = &x - &mean;
                let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
                let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
                let normalized = centered * &inv_std;
                (normalized, inv_std, Some((mean, var)), false)
            }
            (NormKind::Batch, Mode::Eval) => {
                let inv_std = self.running_var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
                let normalized = (&x - &self.running_mean) * &inv_std;
                (normalized, inv_std, None, true)
            }
        };
        let y = &normalized * &self.scale + &self.shift;
        (
            y,
            NormCache {
                normalized,
                inv_std,
                batch_stats,
                affine_only,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &NormCache,
        grad_out: ArrayView2<'_, f64>,
        grad: &mut Norm,
    ) -> Array2<f64> {
        grad.scale += &(&grad_out * &cache.normalized).sum_axis(Axis(0));
        grad.shift += &grad_out.sum_axis(Axis(0));
        let g_hat = &grad_out * &self.scale;
        if cache.affine_only {
            return g_hat * &cache.inv_std;
        }
        let reduce = match self.kind {
            NormKind::Layer => Axis(1),
            NormKind::Batch => Axis(0),
        };
        let mean_g = g_hat.mean_axis(reduce).unwrap();
        let mean_gx = (&g_hat * &cache.normalized).mean_axis(reduce).unwrap();
        match self.kind {
            NormKind::Layer => {
                let mean_g = mean_g.insert_axis(Axis(1));
                let mean_gx = mean_gx.insert_axis(Axis(1));
                let inv = cache.inv_std.view().insert_axis(Axis(1));
                (&g_hat - &mean_g - &cache.normalized * &mean_gx) * &inv
            }
            NormKind::Batch => {
                (&g_hat - &mean_g - &cache.normalized * &mean_gx) * &cache.inv_std
            }
        }
    }

    /// Folds the batch statistics of a training pass into the running estimates.
    pub fn absorb(&mut self, cache: &NormCache) {
        if let Some((mean, var)) = &cache.batch_stats {
            Zip::from(&mut self.running_mean)
                .and(mean)
                .for_each(|r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
            Zip::from(&mut self.running_var)
                .and(var)
                .for_each(|r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
        }
    }
}

impl Parameters for Norm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "scale"), self.scale.view().into_dyn());
        f(&join(prefix, "shift"), self.shift.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "scale"), self.scale.view_mut().into_dyn());
        f(&join(prefix, "shift"), self.shift.view_mut().into_dyn());
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        if self.kind == NormKind::Batch {
            f(&join(prefix, "running_mean"), self.running_mean.view().into_dyn());
            f(&join(prefix, "running_var"), self.running_var.view().into_dyn());
        }
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        if self.kind == NormKind::Batch {
            f(&join(prefix, "running_mean"), self.running_mean.view_mut().into_dyn());
            f(&join(prefix, "running_var"), self.running_var.view_mut().into_dyn());
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Position-wise feed-forward block `Linear → GELU → Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl FeedForward {
    pub fn new<R: Rng>(rng: &mut R, d_model: usize, d_ff: usize, std: f64) -> Self {
        Self {
            up: Linear::new(rng, d_model, d_ff, std),
            down: Linear::new(rng, d_ff, d_model, std),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.up.forward(x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(act.view());
        (y, FeedForwardCache { pre, act })
    }

    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        cache: &FeedForwardCache,
        grad_out: ArrayView2<'_, f64>,
        grad: &mut FeedForward,
    ) -> Array2<f64> {
        let g_act = self.down.backward(cache.act.view(), grad_out, &mut grad.down);
        let g_pre = g_act * &cache.pre.mapv(gelu_grad);
        self.up.backward(x, g_pre.view(), &mut grad.up)
    }
}

impl Parameters for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

/// Inverted-dropout mask (`0` or `1/(1-p)`), or `None` when inactive.
pub fn dropout_mask<R: Rng>(
    rng: &mut R,
    shape: (usize, usize),
    rate: f64,
    mode: Mode,
) -> Option<Array2<f64>> {
    if mode == Mode::Eval || rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

pub(crate) fn apply_mask(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

/// Numerically stable softmax of one slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central finite differences over any `Parameters` implementor.
    use super::*;

    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs()).max(1e-5);
        (analytic - numeric).abs() / denom
    }

    /// Compares the analytic gradient with central differences on every
    /// entry (or a strided subset when `stride > 1`). Returns the max relative error.
    pub fn check_params<T, F>(params: &T, analytic: &T, stride: usize, eps: f64, loss: F) -> f64
    where
        T: Parameters + Clone,
        F: Fn(&T) -> f64,
    {
        let grads = flatten(analytic);
        let mut worst: f64 = 0.0;
        for (slot, (name, g)) in grads.iter().enumerate() {
            for idx in (0..g.len()).step_by(stride.max(1)) {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    let mut seen = 0;
                    p.visit_mut("", &mut |_, mut a| {
                        if seen == slot {
                            let v = a.iter_mut().nth(idx).unwrap();
                            *v += delta;
                        }
                        seen += 1;
                    });
                    loss(&p)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let analytic = *g.iter().nth(idx).unwrap();
                let err = relative_error(analytic, numeric);
                if err > worst {
                    worst = err;
                }
                if err > 1e-4 {
                    eprintln!("{name}[{idx}]: analytic {analytic} numeric {numeric}");
                }
            }
        }
        worst
    }

    pub fn check_input<F>(x: &Array2<f64>, analytic: &Array2<f64>, eps: f64, loss: F) -> f64
    where
        F: Fn(&Array2<f64>) -> f64,
    {
        let mut worst: f64 = 0.0;
        for idx in 0..x.len() {
            let eval = |delta: f64| {
                let mut p = x.clone();
                *p.iter_mut().nth(idx).unwrap() += delta;
                loss(&p)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = *analytic.iter().nth(idx).unwrap();
            let err = relative_error(a, numeric);
            if err > 1e-4 {
                eprintln!("input[{idx}]: analytic {a} numeric {numeric}");
            }
            worst = worst.max(err);
        }
        worst
    }
}
