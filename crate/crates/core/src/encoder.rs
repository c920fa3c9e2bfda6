//! Dual-domain encoder.
//!
//! The time branch is a patch transformer (multi-head self-attention over the
//! `N` patch tokens of every channel). The frequency branch swaps attention
//! for a parameter-free Fourier sublayer that keeps the real part of a 2-D
//! transform over `(patch, hidden)`. Both branches wrap their mixer and a
//! feed-forward block in residual connections followed by normalization, and
//! treat channels independently with shared weights.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fft::fft2_real;
use crate::nn::{
    apply_mask, dropout_mask, gaussian, join, softmax_in_place, FeedForward, FeedForwardCache,
    Mode, Norm, NormCache, NormKind, Parameters,
};
use crate::patching::TokenTensor;

/// Scaled dot-product attention with `n_heads` heads and no projection biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    /// `[R × heads × N × N]` row-stochastic attention weights.
    pub probs: Array4<f64>,
    concat: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(rng: &mut R, d_model: usize, n_heads: usize, std: f64) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {d_model} not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            n_heads,
            w_q: gaussian(rng, (d_model, d_model), std),
            w_k: gaussian(rng, (d_model, d_model), std),
            w_v: gaussian(rng, (d_model, d_model), std),
            w_o: gaussian(rng, (d_model, d_model), std),
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    fn head_dim(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Result<(Array3<f64>, AttentionCache)> {
        let (r, n, d) = x.dim();
        if d != self.d_model() {
            return Err(Error::Shape(format!(
                "attention expects width {}, got {d}",
                self.d_model()
            )));
        }
        let flat = x.to_shape((r * n, d)).unwrap().to_owned();
        let reshape = |a: Array2<f64>| a.into_shape_with_order((r, n, d)).unwrap();
        let q = reshape(flat.dot(&self.w_q));
        let k = reshape(flat.dot(&self.w_k));
        let v = reshape(flat.dot(&self.w_v));
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = Array4::zeros((r, self.n_heads, n, n));
        let mut concat = Array3::zeros((r, n, d));
        for row in 0..r {
            for h in 0..self.n_heads {
                let cols = s![row, .., h * dk..(h + 1) * dk];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t()) * scale;
                for mut line in scores.rows_mut() {
                    softmax_in_place(line.as_slice_mut().unwrap());
                }
                concat.slice_mut(cols).assign(&scores.dot(&vh));
                probs.slice_mut(s![row, h, .., ..]).assign(&scores);
            }
        }
        let concat = concat.into_shape_with_order((r * n, d)).unwrap();
        let out = reshape(concat.dot(&self.w_o));
        Ok((
            out,
            AttentionCache {
                x: flat,
                q,
                k,
                v,
                probs,
                concat,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        grad_out: ArrayView3<'_, f64>,
        grad: &mut MultiHeadAttention,
    ) -> Array3<f64> {
        let (r, n, d) = grad_out.dim();
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let g_out = grad_out.to_shape((r * n, d)).unwrap();
        grad.w_o += &cache.concat.t().dot(&g_out);
        let g_concat = g_out
            .dot(&self.w_o.t())
            .into_shape_with_order((r, n, d))
            .unwrap();
        let mut gq = Array3::zeros((r, n, d));
        let mut gk = Array3::zeros((r, n, d));
        let mut gv = Array3::zeros((r, n, d));
        for row in 0..r {
            for h in 0..self.n_heads {
                let cols = s![row, .., h * dk..(h + 1) * dk];
                let p = cache.probs.slice(s![row, h, .., ..]);
                let go = g_concat.slice(cols);
                gv.slice_mut(cols).assign(&p.t().dot(&go));
                let gp = go.dot(&cache.v.slice(cols).t());
                let inner = (&gp * &p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let gs = (&gp - &inner) * &p * scale;
                gq.slice_mut(cols).assign(&gs.dot(&cache.k.slice(cols)));
                gk.slice_mut(cols).assign(&gs.t().dot(&cache.q.slice(cols)));
            }
        }
        let flat = |a: Array3<f64>| a.into_shape_with_order((r * n, d)).unwrap();
        let (gq, gk, gv) = (flat(gq), flat(gk), flat(gv));
        grad.w_q += &cache.x.t().dot(&gq);
        grad.w_k += &cache.x.t().dot(&gk);
        grad.w_v += &cache.x.t().dot(&gv);
        let gx = gq.dot(&self.w_q.t()) + gk.dot(&self.w_k.t()) + gv.dot(&self.w_v.t());
        gx.into_shape_with_order((r, n, d)).unwrap()
    }
}

impl Parameters for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "w_q"), self.w_q.view().into_dyn());
        f(&join(prefix, "w_k"), self.w_k.view().into_dyn());
        f(&join(prefix, "w_v"), self.w_v.view().into_dyn());
        f(&join(prefix, "w_o"), self.w_o.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "w_q"), self.w_q.view_mut().into_dyn());
        f(&join(prefix, "w_k"), self.w_k.view_mut().into_dyn());
        f(&join(prefix, "w_v"), self.w_v.view_mut().into_dyn());
        f(&join(prefix, "w_o"), self.w_o.view_mut().into_dyn());
    }
}

/// `Softmax(QKᵀ/√d_k)V` per head, concatenated and output-projected, for one `[N × D_h]` sequence.
pub fn attention(tokens: ArrayView2<'_, f64>, params: &MultiHeadAttention) -> Result<Array2<f64>> {
    let (out, _) = params.forward(tokens.insert_axis(Axis(0)))?;
    Ok(out.index_axis_move(Axis(0), 0))
}

/// Real part of the 2-D DFT over `(patch, hidden)` of one `[N × D_h]` sequence.
pub fn fourier_sublayer(tokens: ArrayView2<'_, f64>) -> Array2<f64> {
    fft2_real(tokens)
}

fn fourier_rows(x: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut out = Array3::zeros(x.dim());
    for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
        dst.assign(&fft2_real(src));
    }
    out
}

/// Token-mixing sublayer of an encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Attention(MultiHeadAttention),
    Fourier,
}

#[derive(Debug, Clone)]
enum MixerCache {
    Attention(AttentionCache),
    Fourier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub mixer: Mixer,
    pub norm_mix: Norm,
    pub ff: FeedForward,
    pub norm_ff: Norm,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    mixer: MixerCache,
    mask_mix: Option<Array2<f64>>,
    norm_mix: NormCache,
    mid: Array2<f64>,
    ff: FeedForwardCache,
    mask_ff: Option<Array2<f64>>,
    norm_ff: NormCache,
}

impl EncoderLayer {
    fn forward<R: Rng>(
        &self,
        x: ArrayView3<'_, f64>,
        dropout: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array3<f64>, LayerCache)> {
        let (r, n, d) = x.dim();
        let (mixed, mixer) = match &self.mixer {
            Mixer::Attention(attn) => {
                let (y, c) = attn.forward(x)?;
                (y, MixerCache::Attention(c))
            }
            Mixer::Fourier => (fourier_rows(x), MixerCache::Fourier),
        };
        let mixed = mixed.into_shape_with_order((r * n, d)).unwrap();
        let mask_mix = dropout_mask(rng, (r * n, d), dropout, mode);
        let sum = x.to_shape((r * n, d)).unwrap().to_owned() + apply_mask(mixed, &mask_mix);
        let (mid, norm_mix) = self.norm_mix.forward(sum.view(), mode);
        let (f, ff) = self.ff.forward(mid.view());
        let mask_ff = dropout_mask(rng, (r * n, d), dropout, mode);
        let sum = &mid + &apply_mask(f, &mask_ff);
        let (out, norm_ff) = self.norm_ff.forward(sum.view(), mode);
        Ok((
            out.into_shape_with_order((r, n, d)).unwrap(),
            LayerCache {
                mixer,
                mask_mix,
                norm_mix,
                mid,
                ff,
                mask_ff,
                norm_ff,
            },
        ))
    }

    fn backward(
        &self,
        cache: &LayerCache,
        grad_out: ArrayView3<'_, f64>,
        grad: &mut EncoderLayer,
    ) -> Array3<f64> {
        let (r, n, d) = grad_out.dim();
        let g = grad_out.to_shape((r * n, d)).unwrap();
        let g_sum = self.norm_ff.backward(&cache.norm_ff, g.view(), &mut grad.norm_ff);
        let g_f = apply_mask(g_sum.clone(), &cache.mask_ff);
        let g_mid = g_sum + self.ff.backward(cache.mid.view(), &cache.ff, g_f.view(), &mut grad.ff);
        let g_sum = self.norm_mix.backward(&cache.norm_mix, g_mid.view(), &mut grad.norm_mix);
        let g_mixed = apply_mask(g_sum.clone(), &cache.mask_mix)
            .into_shape_with_order((r, n, d))
            .unwrap();
        let g_x_mix = match (&self.mixer, &cache.mixer, &mut grad.mixer) {
            (Mixer::Attention(attn), MixerCache::Attention(c), Mixer::Attention(ga)) => {
                attn.backward(c, g_mixed.view(), ga)
            }
            // The real-part 2-D DFT is symmetric, hence self-adjoint.
            (Mixer::Fourier, MixerCache::Fourier, Mixer::Fourier) => fourier_rows(g_mixed.view()),
            _ => unreachable!("gradient buffer mirrors the layer"),
        };
        g_sum.into_shape_with_order((r, n, d)).unwrap() + g_x_mix
    }
}

impl Parameters for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        if let Mixer::Attention(a) = &self.mixer {
            a.visit(&join(prefix, "attn"), f);
        }
        self.norm_mix.visit(&join(prefix, "norm_mix"), f);
        self.ff.visit(&join(prefix, "ff"), f);
        self.norm_ff.visit(&join(prefix, "norm_ff"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        if let Mixer::Attention(a) = &mut self.mixer {
            a.visit_mut(&join(prefix, "attn"), f);
        }
        self.norm_mix.visit_mut(&join(prefix, "norm_mix"), f);
        self.ff.visit_mut(&join(prefix, "ff"), f);
        self.norm_ff.visit_mut(&join(prefix, "norm_ff"), f);
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.norm_mix.visit_buffers(&join(prefix, "norm_mix"), f);
        self.norm_ff.visit_buffers(&join(prefix, "norm_ff"), f);
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.norm_mix.visit_buffers_mut(&join(prefix, "norm_mix"), f);
        self.norm_ff.visit_buffers_mut(&join(prefix, "norm_ff"), f);
    }
}

/// Which branch an encoder implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Time,
    Frequency,
}

/// Hyperparameters shared by both encoder branches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub norm: NormKind,
}

impl EncoderConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            n_layers: 2,
            n_heads: 8.min(d_model),
            d_ff: 2 * d_model,
            dropout: 0.0,
            norm: NormKind::Layer,
        }
    }
}

/// A stack of encoder layers (the branch's parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub layers: Vec<EncoderLayer>,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    layers: Vec<LayerCache>,
}

impl EncoderCache {
    /// Attention weights of every layer (empty for the frequency branch).
    pub fn attention_probs(&self) -> Vec<&Array4<f64>> {
        self.layers
            .iter()
            .filter_map(|l| match &l.mixer {
                MixerCache::Attention(c) => Some(&c.probs),
                MixerCache::Fourier => None,
            })
            .collect()
    }
}

impl Encoder {
    /// Time branch: normalization kind is configurable. Frequency branch:
    /// always layer normalization.
    pub fn new<R: Rng>(rng: &mut R, kind: EncoderKind, cfg: &EncoderConfig) -> Result<Self> {
        if cfg.d_model == 0 || cfg.d_ff == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        let norm = match kind {
            EncoderKind::Time => cfg.norm,
            EncoderKind::Frequency => NormKind::Layer,
        };
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let mixer = match kind {
                    EncoderKind::Time => Mixer::Attention(MultiHeadAttention::new(
                        rng,
                        cfg.d_model,
                        cfg.n_heads,
                        0.02,
                    )?),
                    EncoderKind::Frequency => Mixer::Fourier,
                };
                Ok(EncoderLayer {
                    mixer,
                    norm_mix: Norm::new(norm, cfg.d_model),
                    ff: FeedForward::new(rng, cfg.d_model, cfg.d_ff, 0.02),
                    norm_ff: Norm::new(norm, cfg.d_model),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kind,
            layers,
            dropout: cfg.dropout,
        })
    }

    pub fn forward<R: Rng>(
        &self,
        x: ArrayView3<'_, f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array3<f64>, EncoderCache)> {
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(h.view(), self.dropout, mode, rng)?;
            caches.push(cache);
            h = next;
        }
        Ok((h, EncoderCache { layers: caches }))
    }

    pub fn backward(
        &self,
        cache: &EncoderCache,
        grad_out: ArrayView3<'_, f64>,
        grad: &mut Encoder,
    ) -> Array3<f64> {
        let mut g = grad_out.to_owned();
        for ((layer, c), gl) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            g = layer.backward(c, g.view(), gl);
        }
        g
    }

    pub fn absorb(&mut self, cache: &EncoderCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            layer.norm_mix.absorb(&c.norm_mix);
            layer.norm_ff.absorb(&c.norm_ff);
        }
    }
}

impl Parameters for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_buffers(&join(prefix, &format!("layer{i}")), f);
        }
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_buffers_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

fn check_kind(params: &Encoder, kind: EncoderKind) -> Result<()> {
    if params.kind != kind {
        return Err(Error::Config(format!(
            "expected a {kind:?} encoder, got {:?}",
            params.kind
        )));
    }
    Ok(())
}

// Inference never draws dropout masks; the generator only satisfies the signature.
pub(crate) fn inference_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

/// Temporal features `z_t` for `[C × N × D_h]` tokens (inference mode).
pub fn time_encode(tokens: &TokenTensor, params: &Encoder) -> Result<TokenTensor> {
    check_kind(params, EncoderKind::Time)?;
    let (z, _) = params.forward(tokens.tokens.view(), Mode::Eval, &mut inference_rng())?;
    Ok(TokenTensor { tokens: z })
}

/// Frequency features `z_f` for `[C × N × D_h]` tokens (inference mode).
pub fn freq_encode(tokens: &TokenTensor, params: &Encoder) -> Result<TokenTensor> {
    check_kind(params, EncoderKind::Frequency)?;
    let (z, _) = params.forward(tokens.tokens.view(), Mode::Eval, &mut inference_rng())?;
    Ok(TokenTensor { tokens: z })
}
