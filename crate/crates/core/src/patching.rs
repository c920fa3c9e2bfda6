//! Channel-independent patching and patch embedding.
//!
//! Each channel of an `[L × C]` lookback window is padded at the end by
//! repeating its last value `S` times and then cut into `N = ⌊(L − P)/S⌋ + 2`
//! overlapping patches of length `P`. The padding is what makes the last
//! patch whole.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{gaussian, join, Linear, Parameters};

/// Number of patches produced from a window of length `lookback`.
pub fn patch_count(lookback: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || patch_len > lookback {
        return Err(Error::Config(format!(
            "patch length must be in 1..={lookback}, got {patch_len}"
        )));
    }
    if stride == 0 || stride > patch_len {
        return Err(Error::Config(format!(
            "stride must be in 1..={patch_len}, got {stride}"
        )));
    }
    Ok((lookback - patch_len) / stride + 2)
}

/// Patches of every channel: `[C × N × P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Array3<f64>,
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchSet {
    pub fn n_patches(&self) -> usize {
        self.patches.dim().1
    }

    pub fn n_channels(&self) -> usize {
        self.patches.dim().0
    }
}

/// Patch embeddings `[C × N × D_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    pub tokens: Array3<f64>,
}

impl TokenTensor {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.tokens.dim()
    }
}

/// Cuts every row of `[R × L]` into `[R × N × P]` patches.
pub fn segment_rows(rows: ArrayView2<'_, f64>, patch_len: usize, stride: usize) -> Result<Array3<f64>> {
    let (r, lookback) = rows.dim();
    let n = patch_count(lookback, patch_len, stride)?;
    let mut out = Array3::zeros((r, n, patch_len));
    for (row, mut dst) in rows.outer_iter().zip(out.outer_iter_mut()) {
        let last = row[lookback - 1];
        for i in 0..n {
            for p in 0..patch_len {
                let t = i * stride + p;
                dst[[i, p]] = if t < lookback { row[t] } else { last };
            }
        }
    }
    Ok(out)
}

/// Segments an `[L × C]` window channel by channel.
pub fn segment(window: ArrayView2<'_, f64>, patch_len: usize, stride: usize) -> Result<PatchSet> {
    let patches = segment_rows(window.t(), patch_len, stride)?;
    Ok(PatchSet {
        patches,
        patch_len,
        stride,
    })
}

/// Linear patch projection `[P × D_h]` plus a learnable `[N × D_h]` position table.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedding {
    pub projection: Linear,
    pub positions: Array2<f64>,
}

impl PatchEmbedding {
    pub fn new<R: Rng>(rng: &mut R, patch_len: usize, n_patches: usize, d_model: usize) -> Self {
        Self {
            projection: Linear::new(rng, patch_len, d_model, 0.02),
            positions: gaussian(rng, (n_patches, d_model), 0.02),
        }
    }

    pub fn d_model(&self) -> usize {
        self.positions.ncols()
    }

    fn check(&self, n: usize, p: usize) -> Result<()> {
        if p != self.projection.d_in() || n != self.positions.nrows() {
            return Err(Error::Shape(format!(
                "embedding built for N={} P={}, got N={n} P={p}",
                self.positions.nrows(),
                self.projection.d_in()
            )));
        }
        if self.projection.d_out() != self.positions.ncols() {
            return Err(Error::Shape(format!(
                "projection width {} differs from position width {}",
                self.projection.d_out(),
                self.positions.ncols()
            )));
        }
        Ok(())
    }

    /// `[R × N × P] → [R × N × D_h]`.
    pub fn forward(&self, patches: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let (r, n, p) = patches.dim();
        self.check(n, p)?;
        let flat = patches
            .to_shape((r * n, p))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let projected = self.projection.forward(flat.view());
        let mut tokens = projected
            .into_shape_with_order((r, n, self.d_model()))
            .map_err(|e| Error::Shape(e.to_string()))?;
        tokens += &self.positions;
        Ok(tokens)
    }

    /// Parameter gradients only; the patches are data.
    pub fn backward(&self, patches: ArrayView3<'_, f64>, grad_out: ArrayView3<'_, f64>, grad: &mut PatchEmbedding) {
        let (r, n, p) = patches.dim();
        let d = self.d_model();
        let flat = patches.to_shape((r * n, p)).expect("contiguous patches");
        let g = grad_out.to_shape((r * n, d)).expect("contiguous gradient");
        grad.projection.weight += &flat.t().dot(&g);
        grad.projection.bias += &g.sum_axis(Axis(0));
        grad.positions += &grad_out.sum_axis(Axis(0));
    }
}

impl Parameters for PatchEmbedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.projection.visit(&join(prefix, "projection"), f);
        f(&join(prefix, "positions"), self.positions.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.projection.visit_mut(&join(prefix, "projection"), f);
        f(&join(prefix, "positions"), self.positions.view_mut().into_dyn());
    }
}

/// `token[c,i,:] = patch[c,i,:]·W + b + E_i`.
pub fn embed(patches: &PatchSet, embedding: &PatchEmbedding) -> Result<TokenTensor> {
    Ok(TokenTensor {
        tokens: embedding.forward(patches.patches.view())?,
    })
}

/// Offsets `[start, end)` of patch `i` within the (padded) channel.
pub fn patch_span(i: usize, patch_len: usize, stride: usize) -> (usize, usize) {
    (i * stride, i * stride + patch_len)
}
