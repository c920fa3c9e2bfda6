//! The full forecaster: patch embedding, the two branch encoders, routing,
//! the expert mixtures, branch merge and the forecasting head.
//!
//! Batches are `[B × L × C]` inputs and `[B × H × C]` forecasts. Channels are
//! folded into the batch (`row = b·C + c`) and never mixed.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderCache, EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::mope::{
    aggregate_backward, aggregate_cached, gate, gate_backward, head_backward, head_forward,
    inverse_fourier_rows, AggregateCache, ExpertBank, GatingWeights,
};
use crate::nn::{join, Linear, Mode, NormKind, Parameters};
use crate::patching::{patch_count, segment_rows, PatchEmbedding};
use crate::pattern::{init_bases, pi_backward, pi_loss, KlReduction, PiOutput, PiWeights, SubspaceBases};

/// How a branch turns encoded tokens into gating scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RouterKind {
    /// Subspace affinities from the pattern identifier.
    #[default]
    Pattern,
    /// A learned linear gate `z·W + b`, no clustering loss.
    Linear,
    /// No experts: the encoder output goes straight to the head.
    None,
}

const INSTANCE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width; `None` means `2·d_model`.
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub norm: NormKind,
    pub time_branch: bool,
    pub freq_branch: bool,
    pub router: RouterKind,
    pub k_time: usize,
    pub k_freq: usize,
    pub top_k: usize,
    /// Expert hidden width; `None` means `d_model`.
    pub expert_hidden: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    /// Affinity smoothing; `None` means the block width `d_model / K`.
    pub eta: Option<f64>,
    pub kl_reduction: KlReduction,
    pub instance_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            patch_len: 16,
            stride: 8,
            d_model: 512,
            n_layers: 2,
            n_heads: 8,
            d_ff: None,
            dropout: 0.0,
            norm: NormKind::Layer,
            time_branch: true,
            freq_branch: true,
            router: RouterKind::Pattern,
            k_time: 4,
            k_freq: 4,
            top_k: 2,
            expert_hidden: None,
            alpha: 1e-3,
            beta: 0.1,
            eta: None,
            kl_reduction: KlReduction::Mean,
            instance_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> Result<usize> {
        patch_count(self.lookback, self.patch_len, self.stride)
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(2 * self.d_model)
    }

    pub fn expert_hidden(&self) -> usize {
        self.expert_hidden.unwrap_or(self.d_model)
    }

    /// Width of the merged features fed to the head.
    pub fn merged_width(&self) -> usize {
        self.d_model * (self.time_branch as usize + self.freq_branch as usize)
    }

    fn n_experts(&self, kind: EncoderKind) -> usize {
        match kind {
            EncoderKind::Time => self.k_time,
            EncoderKind::Frequency => self.k_freq,
        }
    }

    pub fn eta_for(&self, n_subspaces: usize) -> f64 {
        self.eta
            .unwrap_or((self.d_model / n_subspaces.max(1)) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        self.n_patches()?;
        if self.d_model == 0 || self.n_layers == 0 {
            return bad("d_model and n_layers must be positive".into());
        }
        if !self.time_branch && !self.freq_branch {
            return bad("at least one of time_branch / freq_branch must be enabled".into());
        }
        if self.time_branch && (self.n_heads == 0 || self.d_model % self.n_heads != 0) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff() == 0 || self.expert_hidden() == 0 {
            return bad("d_ff and expert_hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative".into());
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0) {
                return bad(format!("eta must be positive, got {eta}"));
            }
        }
        if self.router != RouterKind::None {
            for (kind, on) in [(EncoderKind::Time, self.time_branch), (EncoderKind::Frequency, self.freq_branch)] {
                if !on {
                    continue;
                }
                let k = self.n_experts(kind);
                if k == 0 {
                    return bad("expert counts must be positive".into());
                }
                if self.router == RouterKind::Pattern && self.d_model % k != 0 {
                    return bad(format!("d_model {} is not divisible by K = {k}", self.d_model));
                }
                if self.top_k == 0 || self.top_k > k {
                    return bad(format!("top_k must be in 1..={k}, got {}", self.top_k));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Router {
    Pattern(SubspaceBases),
    Linear(Linear),
    None,
}

/// One domain branch: encoder, router and experts.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub encoder: Encoder,
    pub router: Router,
    pub experts: Option<ExpertBank>,
}

impl Branch {
    fn new<R: Rng>(rng: &mut R, kind: EncoderKind, cfg: &ModelConfig) -> Result<Self> {
        let enc_cfg = EncoderConfig {
            d_model: cfg.d_model,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_ff: cfg.d_ff(),
            dropout: cfg.dropout,
            norm: cfg.norm,
        };
        let encoder = Encoder::new(rng, kind, &enc_cfg)?;
        let k = cfg.n_experts(kind);
        let router = match cfg.router {
            RouterKind::Pattern => Router::Pattern(init_bases(rng, cfg.d_model, k)?),
            RouterKind::Linear => Router::Linear(Linear::new(rng, cfg.d_model, k, 0.02)),
            RouterKind::None => Router::None,
        };
        let experts = match cfg.router {
            RouterKind::None => None,
            _ => Some(ExpertBank::new(rng, k, cfg.d_model, cfg.expert_hidden())),
        };
        Ok(Self {
            encoder,
            router,
            experts,
        })
    }
}

impl Parameters for Branch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        match &self.router {
            Router::Pattern(b) => b.visit(&join(prefix, "bases"), f),
            Router::Linear(l) => l.visit(&join(prefix, "gate"), f),
            Router::None => {}
        }
        if let Some(e) = &self.experts {
            e.visit(&join(prefix, "experts"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        match &mut self.router {
            Router::Pattern(b) => b.visit_mut(&join(prefix, "bases"), f),
            Router::Linear(l) => l.visit_mut(&join(prefix, "gate"), f),
            Router::None => {}
        }
        if let Some(e) = &mut self.experts {
            e.visit_mut(&join(prefix, "experts"), f);
        }
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.encoder.visit_buffers(&join(prefix, "encoder"), f);
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.encoder.visit_buffers_mut(&join(prefix, "encoder"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embedding: PatchEmbedding,
    pub time: Option<Branch>,
    pub freq: Option<Branch>,
    pub head: Linear,
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.embedding.visit(&join(prefix, "embedding"), f);
        if let Some(b) = &self.time {
            b.visit(&join(prefix, "time"), f);
        }
        if let Some(b) = &self.freq {
            b.visit(&join(prefix, "freq"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.embedding.visit_mut(&join(prefix, "embedding"), f);
        if let Some(b) = &mut self.time {
            b.visit_mut(&join(prefix, "time"), f);
        }
        if let Some(b) = &mut self.freq {
            b.visit_mut(&join(prefix, "freq"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        if let Some(b) = &self.time {
            b.visit_buffers(&join(prefix, "time"), f);
        }
        if let Some(b) = &self.freq {
            b.visit_buffers(&join(prefix, "freq"), f);
        }
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        if let Some(b) = &mut self.time {
            b.visit_buffers_mut(&join(prefix, "time"), f);
        }
        if let Some(b) = &mut self.freq {
            b.visit_buffers_mut(&join(prefix, "freq"), f);
        }
    }
}

/// Routing state of one branch for one forward pass.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// Pattern-identifier loss terms, pattern router only.
    pub pi: Option<PiOutput>,
    /// Gating scores `[M × K]` (affinities or linear logits).
    pub scores: Option<Array2<f64>>,
    pub gating: Option<GatingWeights>,
    /// Tokens evaluated by each expert.
    pub calls: Vec<usize>,
    encoder: EncoderCache,
    tokens: Array2<f64>,
    aggregate: Option<AggregateCache>,
    mixed: Array3<f64>,
}

impl BranchOutput {
    pub fn pi_loss(&self) -> f64 {
        self.pi.as_ref().map_or(0.0, |p| p.loss)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B × H × C]`.
    pub forecast: Array3<f64>,
    pub time: Option<BranchOutput>,
    pub freq: Option<BranchOutput>,
    patches: Array3<f64>,
    merged: Array3<f64>,
    scale: Option<(Array1<f64>, Array1<f64>)>,
    batch: (usize, usize),
}

impl ForwardOutput {
    pub fn pi_time(&self) -> f64 {
        self.time.as_ref().map_or(0.0, BranchOutput::pi_loss)
    }

    pub fn pi_freq(&self) -> f64 {
        self.freq.as_ref().map_or(0.0, BranchOutput::pi_loss)
    }
}

impl Model {
    pub fn new<R: Rng>(rng: &mut R, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_patches()?;
        let embedding = PatchEmbedding::new(rng, config.patch_len, n, config.d_model);
        let time = config
            .time_branch
            .then(|| Branch::new(rng, EncoderKind::Time, &config))
            .transpose()?;
        let freq = config
            .freq_branch
            .then(|| Branch::new(rng, EncoderKind::Frequency, &config))
            .transpose()?;
        let fan_in = n * config.merged_width();
        let head = Linear::new(rng, fan_in, config.horizon, 1.0 / (fan_in as f64).sqrt());
        Ok(Self {
            config,
            embedding,
            time,
            freq,
            head,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.embedding.positions.nrows()
    }

    fn check_input(&self, x: ArrayView3<'_, f64>) -> Result<()> {
        let (b, l, c) = x.dim();
        if b == 0 || c == 0 || l != self.config.lookback {
            return Err(Error::Shape(format!(
                "expected input [B x {} x C] with B, C > 0, got {:?}",
                self.config.lookback,
                x.dim()
            )));
        }
        Ok(())
    }

    pub fn forward<R: Rng>(&self, x: ArrayView3<'_, f64>, mode: Mode, rng: &mut R) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let (b, l, c) = x.dim();
        let mut rows = x
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_shape_with_order((b * c, l))
            .map_err(|e| Error::Shape(e.to_string()))?
            .to_owned();
        let scale = self.config.instance_norm.then(|| {
            let mean = rows.mean_axis(Axis(1)).expect("lookback is non-empty");
            let std = rows.var_axis(Axis(1), 0.0).mapv(|v| (v + INSTANCE_EPS).sqrt());
            rows -= &mean.view().insert_axis(Axis(1));
            rows /= &std.view().insert_axis(Axis(1));
            (mean, std)
        });
        let patches = segment_rows(rows.view(), self.config.patch_len, self.config.stride)?;
        let tokens = self.embedding.forward(patches.view())?;

        let time = self
            .time
            .as_ref()
            .map(|br| self.branch_forward(br, tokens.view(), mode, rng))
            .transpose()?;
        let freq = self
            .freq
            .as_ref()
            .map(|br| self.branch_forward(br, tokens.view(), mode, rng))
            .transpose()?;

        let mut parts = Vec::with_capacity(2);
        if let Some(t) = &time {
            parts.push(t.mixed.clone());
        }
        if let Some(f) = &freq {
            parts.push(inverse_fourier_rows(f.mixed.view()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let merged = ndarray::concatenate(Axis(2), &views).map_err(|e| Error::Shape(e.to_string()))?;

        let mut out = head_forward(merged.view(), &self.head)?;
        if let Some((mean, std)) = &scale {
            out *= &std.view().insert_axis(Axis(1));
            out += &mean.view().insert_axis(Axis(1));
        }
        let h = self.config.horizon;
        let forecast = out
            .into_shape_with_order((b, c, h))
            .map_err(|e| Error::Shape(e.to_string()))?
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .to_owned();
        Ok(ForwardOutput {
            forecast,
            time,
            freq,
            patches,
            merged,
            scale,
            batch: (b, c),
        })
    }

    fn branch_forward<R: Rng>(
        &self,
        br: &Branch,
        x: ArrayView3<'_, f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<BranchOutput> {
        let (r, n, d) = x.dim();
        let (z, encoder) = br.encoder.forward(x, mode, rng)?;
        let tokens = z
            .into_shape_with_order((r * n, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (pi, scores) = match &br.router {
            Router::Pattern(bases) => {
                let weights = self.pi_weights(bases.n_subspaces);
                let pi = pi_loss(tokens.view(), bases, &weights)?;
                let scores = pi.affinity.values.clone();
                (Some(pi), Some(scores))
            }
            Router::Linear(lin) => (None, Some(lin.forward(tokens.view()))),
            Router::None => (None, None),
        };
        let (mixed, gating, aggregate, calls) = match (&scores, &br.experts) {
            (Some(s), Some(bank)) => {
                let g = gate(s.view(), self.config.top_k)?;
                let (h, cache) = aggregate_cached(&g, tokens.view(), bank)?;
                let calls = cache.calls.clone();
                (h, Some(g), Some(cache), calls)
            }
            _ => (tokens.clone(), None, None, Vec::new()),
        };
        let mixed = mixed
            .into_shape_with_order((r, n, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(BranchOutput {
            pi,
            scores,
            gating,
            calls,
            encoder,
            tokens,
            aggregate,
            mixed,
        })
    }

    pub fn pi_weights(&self, n_subspaces: usize) -> PiWeights {
        PiWeights {
            alpha: self.config.alpha,
            beta: self.config.beta,
            eta: self.config.eta_for(n_subspaces),
            reduction: self.config.kl_reduction,
        }
    }

    /// Accumulates into `grad` the gradient of `⟨grad_forecast, forecast⟩ + PI_t + PI_f`.
    pub fn backward(&self, out: &ForwardOutput, grad_forecast: ArrayView3<'_, f64>, grad: &mut Model) -> Result<()> {
        let (b, c) = out.batch;
        let h = self.config.horizon;
        if grad_forecast.dim() != (b, h, c) {
            return Err(Error::Shape(format!(
                "forecast gradient is {:?}, expected [{b} x {h} x {c}]",
                grad_forecast.dim()
            )));
        }
        let mut g_out = grad_forecast
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_shape_with_order((b * c, h))
            .expect("standard layout")
            .to_owned();
        if let Some((_, std)) = &out.scale {
            g_out *= &std.view().insert_axis(Axis(1));
        }
        let g_merged = head_backward(out.merged.view(), &self.head, g_out.view(), &mut grad.head);
        let d = self.config.d_model;
        let mut offset = 0;
        let mut g_tokens = Array3::zeros((b * c, self.n_patches(), d));
        if let (Some(br), Some(bo), Some(gb)) = (&self.time, &out.time, &mut grad.time) {
            let g = g_merged.slice(s![.., .., offset..offset + d]);
            g_tokens += &self.branch_backward(br, bo, g, gb)?;
            offset += d;
        }
        if let (Some(br), Some(bo), Some(gb)) = (&self.freq, &out.freq, &mut grad.freq) {
            // Re(iFFT2) of a real block is a symmetric real-linear map: its adjoint is itself.
            let g = inverse_fourier_rows(g_merged.slice(s![.., .., offset..offset + d]));
            g_tokens += &self.branch_backward(br, bo, g.view(), gb)?;
        }
        self.embedding
            .backward(out.patches.view(), g_tokens.view(), &mut grad.embedding);
        Ok(())
    }

    fn branch_backward(
        &self,
        br: &Branch,
        bo: &BranchOutput,
        g_mixed: ArrayView3<'_, f64>,
        grad: &mut Branch,
    ) -> Result<Array3<f64>> {
        let (r, n, d) = g_mixed.dim();
        let g_h = g_mixed.to_shape((r * n, d)).map_err(|e| Error::Shape(e.to_string()))?;
        let mut g_z = match (&bo.gating, &bo.aggregate, &br.experts, &mut grad.experts) {
            (Some(gating), Some(cache), Some(bank), Some(gbank)) => {
                let (g_z, g_w) = aggregate_backward(gating, cache, bank, g_h.view(), gbank);
                let g_scores = gate_backward(gating, g_w.view());
                let mut g_z = g_z;
                match (&br.router, &mut grad.router) {
                    (Router::Pattern(bases), Router::Pattern(gb)) => {
                        let pi = bo.pi.as_ref().expect("pattern router records PI output");
                        let weights = self.pi_weights(bases.n_subspaces);
                        g_z += &pi_backward(
                            bo.tokens.view(),
                            bases,
                            &weights,
                            pi,
                            Some(g_scores.view()),
                            &mut gb.matrix,
                        );
                    }
                    (Router::Linear(lin), Router::Linear(gl)) => {
                        g_z += &lin.backward(bo.tokens.view(), g_scores.view(), gl);
                    }
                    _ => return Err(Error::Shape("gradient buffer has a different router".into())),
                }
                g_z
            }
            _ => g_h.to_owned(),
        };
        if g_z.nrows() != r * n {
            return Err(Error::Shape("token gradient has the wrong row count".into()));
        }
        let g_z3 = std::mem::take(&mut g_z)
            .into_shape_with_order((r, n, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(br.encoder.backward(&bo.encoder, g_z3.view(), &mut grad.encoder))
    }

    /// Folds batch-norm statistics from a training pass into the running buffers.
    pub fn absorb(&mut self, out: &ForwardOutput) {
        if let (Some(br), Some(bo)) = (&mut self.time, &out.time) {
            br.encoder.absorb(&bo.encoder);
        }
        if let (Some(br), Some(bo)) = (&mut self.freq, &out.freq) {
            br.encoder.absorb(&bo.encoder);
        }
    }

    /// Eval-mode forecast for a batch `[B × L × C] → [B × H × C]`.
    pub fn predict(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let mut rng = crate::encoder::inference_rng();
        Ok(self.forward(x, Mode::Eval, &mut rng)?.forecast)
    }

    /// Forecast for one window `[L × C] → [H × C]`.
    pub fn predict_window(&self, window: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let x = window.insert_axis(Axis(0));
        Ok(self.predict(x)?.index_axis_move(Axis(0), 0))
    }
}
