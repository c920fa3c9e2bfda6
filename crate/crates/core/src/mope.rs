//! Mixture of pattern experts: top-k gating over subspace affinities,
//! sparse expert evaluation and weighted aggregation, followed by branch
//! merging and the linear forecasting head.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fft::ifft2_real;
use crate::nn::{join, softmax_in_place, Linear, Parameters};

/// Sparse per-token routing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingWeights {
    /// `[M × K]`; each row has at most `k` non-zero entries summing to one.
    pub weights: Array2<f64>,
    /// Selected expert indices per token, best first.
    pub selected: Vec<Vec<usize>>,
    pub k: usize,
}

/// Keeps the `k` largest scores of every row (lowest index wins ties) and
/// softmax-normalizes them; every other weight is zero.
pub fn gate(scores: ArrayView2<'_, f64>, k: usize) -> Result<GatingWeights> {
    let n_experts = scores.ncols();
    if k == 0 || k > n_experts {
        return Err(Error::Config(format!(
            "top-k must be in 1..={n_experts}, got {k}"
        )));
    }
    let mut weights = Array2::zeros(scores.dim());
    let mut selected = Vec::with_capacity(scores.nrows());
    for (row, mut out) in scores.rows().into_iter().zip(weights.rows_mut()) {
        let mut order: Vec<usize> = (0..n_experts).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(k);
        let mut logits: Vec<f64> = order.iter().map(|&j| row[j]).collect();
        softmax_in_place(&mut logits);
        for (&j, w) in order.iter().zip(&logits) {
            out[j] = *w;
        }
        selected.push(order);
    }
    Ok(GatingWeights {
        weights,
        selected,
        k,
    })
}

/// Gradient w.r.t. the scores given the gradient w.r.t. the gating weights.
pub fn gate_backward(gating: &GatingWeights, grad_weights: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut g_scores = Array2::zeros(grad_weights.dim());
    for (i, sel) in gating.selected.iter().enumerate() {
        let inner: f64 = sel
            .iter()
            .map(|&j| grad_weights[[i, j]] * gating.weights[[i, j]])
            .sum();
        for &j in sel {
            g_scores[[i, j]] = gating.weights[[i, j]] * (grad_weights[[i, j]] - inner);
        }
    }
    g_scores
}

/// One expert: `Linear → ReLU → Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub hidden: Linear,
    pub output: Linear,
}

impl Expert {
    pub fn new<R: Rng>(rng: &mut R, d_model: usize, d_hidden: usize, std: f64) -> Self {
        Self {
            hidden: Linear::new(rng, d_model, d_hidden, std),
            output: Linear::new(rng, d_hidden, d_model, std),
        }
    }

    fn forward_cached(&self, z: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let pre = self.hidden.forward(z);
        let act = pre.mapv(|v| v.max(0.0));
        (self.output.forward(act.view()), pre)
    }

    fn backward(
        &self,
        z: ArrayView2<'_, f64>,
        pre: &Array2<f64>,
        grad_out: ArrayView2<'_, f64>,
        grad: &mut Expert,
    ) -> Array2<f64> {
        let act = pre.mapv(|v| v.max(0.0));
        let g_act = self.output.backward(act.view(), grad_out, &mut grad.output);
        let g_pre = g_act * &pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.hidden.backward(z, g_pre.view(), &mut grad.hidden)
    }
}

impl Parameters for Expert {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Applies one expert to `[M × D_h]` tokens.
pub fn expert_forward(z: ArrayView2<'_, f64>, params: &Expert) -> Result<Array2<f64>> {
    params.hidden.check_input(z)?;
    Ok(params.forward_cached(z).0)
}

/// The `K` experts of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub experts: Vec<Expert>,
}

impl ExpertBank {
    pub fn new<R: Rng>(rng: &mut R, n_experts: usize, d_model: usize, d_hidden: usize) -> Self {
        Self {
            experts: (0..n_experts)
                .map(|_| Expert::new(rng, d_model, d_hidden, 0.02))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }
}

impl Parameters for ExpertBank {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("expert{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("expert{i}")), f);
        }
    }
}

/// Per-expert state saved for the backward pass.
#[derive(Debug, Clone)]
struct Routed {
    tokens: Vec<usize>,
    inputs: Array2<f64>,
    pre: Array2<f64>,
    outputs: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AggregateCache {
    routed: Vec<Option<Routed>>,
    /// Number of tokens each expert was evaluated on.
    pub calls: Vec<usize>,
}

/// `h_i = Σ_k w_ik·E_k(z_i)`, evaluating each expert only on the tokens routed to it.
pub fn aggregate_cached(
    gating: &GatingWeights,
    z: ArrayView2<'_, f64>,
    bank: &ExpertBank,
) -> Result<(Array2<f64>, AggregateCache)> {
    let (m, d) = z.dim();
    if gating.weights.dim() != (m, bank.len()) {
        return Err(Error::Shape(format!(
            "gating is {:?}, expected [{m} x {}]",
            gating.weights.dim(),
            bank.len()
        )));
    }
    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); bank.len()];
    for (i, sel) in gating.selected.iter().enumerate() {
        for &j in sel {
            if gating.weights[[i, j]] != 0.0 {
                per_expert[j].push(i);
            }
        }
    }
    let mut h = Array2::zeros((m, d));
    let mut routed = Vec::with_capacity(bank.len());
    let mut calls = Vec::with_capacity(bank.len());
    for (j, (expert, tokens)) in bank.experts.iter().zip(per_expert).enumerate() {
        calls.push(tokens.len());
        if tokens.is_empty() {
            routed.push(None);
            continue;
        }
        expert.hidden.check_input(z)?;
        let inputs = z.select(Axis(0), &tokens);
        let (outputs, pre) = expert.forward_cached(inputs.view());
        for (row, &i) in tokens.iter().enumerate() {
            h.row_mut(i).scaled_add(gating.weights[[i, j]], &outputs.row(row));
        }
        routed.push(Some(Routed {
            tokens,
            inputs,
            pre,
            outputs,
        }));
    }
    Ok((h, AggregateCache { routed, calls }))
}

/// Weighted sum of the selected experts' outputs.
pub fn aggregate(gating: &GatingWeights, z: ArrayView2<'_, f64>, bank: &ExpertBank) -> Result<Array2<f64>> {
    aggregate_cached(gating, z, bank).map(|(h, _)| h)
}

/// Returns `(∂/∂z, ∂/∂weights)` and accumulates expert gradients.
pub fn aggregate_backward(
    gating: &GatingWeights,
    cache: &AggregateCache,
    bank: &ExpertBank,
    grad_h: ArrayView2<'_, f64>,
    grad: &mut ExpertBank,
) -> (Array2<f64>, Array2<f64>) {
    let mut g_z = Array2::zeros(grad_h.dim());
    let mut g_w = Array2::zeros(gating.weights.dim());
    for (j, slot) in cache.routed.iter().enumerate() {
        let Some(r) = slot else { continue };
        let mut g_out = Array2::zeros(r.outputs.dim());
        for (row, &i) in r.tokens.iter().enumerate() {
            g_w[[i, j]] = grad_h.row(i).dot(&r.outputs.row(row));
            g_out.row_mut(row).scaled_add(gating.weights[[i, j]], &grad_h.row(i));
        }
        let g_in = bank.experts[j].backward(r.inputs.view(), &r.pre, g_out.view(), &mut grad.experts[j]);
        for (row, &i) in r.tokens.iter().enumerate() {
            let mut dst = g_z.row_mut(i);
            dst += &g_in.row(row);
        }
    }
    (g_z, g_w)
}

/// Inverse 2-D transform of every `[N × D]` block, real part kept.
pub fn inverse_fourier_rows(x: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut out = Array3::zeros(x.dim());
    for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
        dst.assign(&ifft2_real(src));
    }
    out
}

/// `[h_t ‖ Re(iFFT2(h_f))]` along the feature axis, for `[C × N × D_h]` inputs.
pub fn combine_branches(h_t: ArrayView3<'_, f64>, h_f: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    if h_t.dim() != h_f.dim() {
        return Err(Error::Shape(format!(
            "branch outputs differ: {:?} vs {:?}",
            h_t.dim(),
            h_f.dim()
        )));
    }
    let back = inverse_fourier_rows(h_f);
    ndarray::concatenate(Axis(2), &[h_t, back.view()]).map_err(|e| Error::Shape(e.to_string()))
}

/// Flattens each `[N × D]` block and maps it to `H` values: `[R × N × D] → [R × H]`.
pub fn head_forward(h: ArrayView3<'_, f64>, head: &Linear) -> Result<Array2<f64>> {
    let (r, n, d) = h.dim();
    if n * d != head.d_in() {
        return Err(Error::Shape(format!(
            "head expects {} flattened features, got {n} x {d}",
            head.d_in()
        )));
    }
    let flat = h.to_shape((r, n * d)).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(head.forward(flat.view()))
}

pub fn head_backward(h: ArrayView3<'_, f64>, head: &Linear, grad_out: ArrayView2<'_, f64>, grad: &mut Linear) -> Array3<f64> {
    let (r, n, d) = h.dim();
    let flat = h.to_shape((r, n * d)).expect("validated in forward");
    head.backward(flat.view(), grad_out, grad)
        .into_shape_with_order((r, n, d))
        .unwrap()
}

/// Forecast `[H × C]` from one window's merged features `[C × N × 2·D_h]`.
pub fn head(h: ArrayView3<'_, f64>, head: &Linear) -> Result<Array2<f64>> {
    Ok(head_forward(h, head)?.reversed_axes())
}
