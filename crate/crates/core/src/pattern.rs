//! Pattern identifier: learned subspace bases, per-token subspace affinity,
//! sharpened self-training targets and the clustering loss.
//!
//! Bases are `K` blocks of `q × d` columns (`d = q / K`). A token's affinity
//! to block `j` is its smoothed projection energy onto that block,
//! normalized over blocks. The loss keeps columns near unit norm (`R1`),
//! keeps blocks mutually orthogonal (`R2`), and pulls affinities toward a
//! sharpened copy of themselves through `KL(Ŝ ‖ S)` with `Ŝ` held constant.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gaussian, Parameters};

/// Concatenated subspace bases `B = [B⁽¹⁾ … B⁽ᴷ⁾]`, shape `q × (K·d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBases {
    pub matrix: Array2<f64>,
    pub n_subspaces: usize,
}

impl SubspaceBases {
    /// Wraps an existing `q × (K·d)` matrix.
    pub fn from_matrix(matrix: Array2<f64>, n_subspaces: usize) -> Result<Self> {
        if n_subspaces == 0 || matrix.ncols() % n_subspaces != 0 {
            return Err(Error::Config(format!(
                "{} basis columns cannot be split into {n_subspaces} blocks",
                matrix.ncols()
            )));
        }
        Ok(Self {
            matrix,
            n_subspaces,
        })
    }

    /// Builds from explicit `q × d` blocks.
    pub fn from_blocks(blocks: &[Array2<f64>]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("need at least one basis block".into()));
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let matrix = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Self::from_matrix(matrix, blocks.len())
    }

    pub fn q(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn block_width(&self) -> usize {
        self.matrix.ncols() / self.n_subspaces
    }

    pub fn block(&self, j: usize) -> ArrayView2<'_, f64> {
        let d = self.block_width();
        self.matrix.slice(s![.., j * d..(j + 1) * d])
    }

    fn block_of_column(&self, u: usize) -> usize {
        u / self.block_width()
    }
}

impl Parameters for SubspaceBases {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(prefix, self.matrix.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(prefix, self.matrix.view_mut().into_dyn());
    }
}

/// Gaussian bases with every column rescaled to unit norm.
pub fn init_bases<R: Rng>(rng: &mut R, q: usize, n_subspaces: usize) -> Result<SubspaceBases> {
    if n_subspaces == 0 || q == 0 || q % n_subspaces != 0 {
        return Err(Error::Config(format!(
            "feature width {q} must be a positive multiple of the subspace count {n_subspaces}"
        )));
    }
    let std = 1.0 / (q as f64).sqrt();
    let mut matrix = gaussian(rng, (q, q), std);
    for mut col in matrix.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col /= norm;
        }
    }
    SubspaceBases::from_matrix(matrix, n_subspaces)
}

/// `½‖BᵀB ⊙ I − I‖²_F`: squared deviation of column norms from one.
pub fn reg_r1(bases: &SubspaceBases) -> f64 {
    0.5 * bases
        .matrix
        .columns()
        .into_iter()
        .map(|c| {
            let n2 = c.dot(&c);
            (n2 - 1.0) * (n2 - 1.0)
        })
        .sum::<f64>()
}

fn cross_block_gram(bases: &SubspaceBases) -> Array2<f64> {
    let mut gram = bases.matrix.t().dot(&bases.matrix);
    let d = bases.block_width();
    for j in 0..bases.n_subspaces {
        gram.slice_mut(s![j * d..(j + 1) * d, j * d..(j + 1) * d]).fill(0.0);
    }
    gram
}

/// `½‖BᵀB ⊙ O‖²_F` where `O` keeps only the off-diagonal `d × d` blocks.
pub fn reg_r2(bases: &SubspaceBases) -> f64 {
    0.5 * cross_block_gram(bases).iter().map(|g| g * g).sum::<f64>()
}

/// Gradient of `R1 + R2` w.r.t. the basis matrix, scaled by `alpha`, added to `grad`.
pub fn reg_backward(bases: &SubspaceBases, alpha: f64, grad: &mut Array2<f64>) {
    for (u, col) in bases.matrix.columns().into_iter().enumerate() {
        let n2 = col.dot(&col);
        let mut g = grad.column_mut(u);
        g.scaled_add(alpha * 2.0 * (n2 - 1.0), &col);
    }
    let masked = cross_block_gram(bases);
    grad.scaled_add(alpha * 2.0, &bases.matrix.dot(&masked));
}

/// Row-stochastic soft assignment of `M` tokens to `K` subspaces.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub values: Array2<f64>,
    pub refined: Option<Array2<f64>>,
}

impl AffinityMatrix {
    pub fn n_tokens(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_subspaces(&self) -> usize {
        self.values.ncols()
    }

    /// Index of the largest affinity of each token (lowest index on ties).
    pub fn argmax(&self) -> Vec<usize> {
        self.values
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// What the affinity backward pass needs.
#[derive(Debug, Clone)]
pub struct AffinityCache {
    projections: Array2<f64>,
    energy_sum: Array1<f64>,
}

fn affinity_inner(
    z: ArrayView2<'_, f64>,
    bases: &SubspaceBases,
    eta: f64,
) -> Result<(AffinityMatrix, AffinityCache)> {
    if z.ncols() != bases.q() {
        return Err(Error::Shape(format!(
            "tokens have width {}, bases expect {}",
            z.ncols(),
            bases.q()
        )));
    }
    if !(eta > 0.0) {
        return Err(Error::Config(format!("smoothing eta must be positive, got {eta}")));
    }
    let k = bases.n_subspaces;
    let d = bases.block_width();
    let smoothing = eta * d as f64;
    let projections = z.dot(&bases.matrix);
    let mut values = Array2::zeros((z.nrows(), k));
    for (p, mut out) in projections.rows().into_iter().zip(values.rows_mut()) {
        for j in 0..k {
            let block = p.slice(s![j * d..(j + 1) * d]);
            out[j] = block.dot(&block) + smoothing;
        }
    }
    let energy_sum = values.sum_axis(Axis(1));
    values /= &energy_sum.view().insert_axis(Axis(1));
    Ok((
        AffinityMatrix {
            values,
            refined: None,
        },
        AffinityCache {
            projections,
            energy_sum,
        },
    ))
}

/// `s_ij = (‖z_iᵀB⁽ʲ⁾‖² + ηd) / Σ_l (‖z_iᵀB⁽ˡ⁾‖² + ηd)` for `[M × q]` tokens.
pub fn affinity(z: ArrayView2<'_, f64>, bases: &SubspaceBases, eta: f64) -> Result<AffinityMatrix> {
    affinity_inner(z, bases, eta).map(|(s, _)| s)
}

/// Sharpened target `ŝ_ij ∝ s_ij² / Σ_i s_ij`, rows renormalized.
pub fn refine(s: &AffinityMatrix) -> Result<AffinityMatrix> {
    let col_mass = s.values.sum_axis(Axis(0));
    if col_mass.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::Numeric("affinity column with zero mass".into()));
    }
    let mut refined = s.values.mapv(|v| v * v) / &col_mass;
    let row_sum = refined.sum_axis(Axis(1));
    refined /= &row_sum.insert_axis(Axis(1));
    Ok(AffinityMatrix {
        values: s.values.clone(),
        refined: Some(refined),
    })
}

/// `Σ_i Σ_j ŝ_ij log(ŝ_ij / s_ij)` with `0·log 0 = 0`.
pub fn kl_loss(target: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>) -> Result<f64> {
    if target.dim() != s.dim() {
        return Err(Error::Shape(format!(
            "KL arguments differ in shape: {:?} vs {:?}",
            target.dim(),
            s.dim()
        )));
    }
    Ok(target
        .iter()
        .zip(s.iter())
        .map(|(&t, &p)| if t > 0.0 { t * (t / p).ln() } else { 0.0 })
        .sum())
}

/// How the KL term is aggregated over tokens when used as a training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KlReduction {
    /// Plain double sum.
    Sum,
    /// Sum divided by the number of tokens.
    #[default]
    Mean,
}

impl KlReduction {
    fn factor(self, m: usize) -> f64 {
        match self {
            KlReduction::Sum => 1.0,
            KlReduction::Mean => 1.0 / m.max(1) as f64,
        }
    }
}

/// Weights of the pattern-identifier loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiWeights {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub reduction: KlReduction,
}

/// Loss value, affinities and the pieces needed for backward.
#[derive(Debug, Clone)]
pub struct PiOutput {
    pub loss: f64,
    pub r1: f64,
    pub r2: f64,
    pub kl: f64,
    pub affinity: AffinityMatrix,
    cache: AffinityCache,
}

/// `α·(R1 + R2) + β·KL(refine(S) ‖ S)` plus the raw affinity `S`.
pub fn pi_loss(z: ArrayView2<'_, f64>, bases: &SubspaceBases, weights: &PiWeights) -> Result<PiOutput> {
    if weights.alpha < 0.0 || weights.beta < 0.0 {
        return Err(Error::Config("alpha and beta must be non-negative".into()));
    }
    let (s, cache) = affinity_inner(z, bases, weights.eta)?;
    let s = refine(&s)?;
    let target = s.refined.as_ref().expect("refined just computed");
    let kl = kl_loss(target.view(), s.values.view())?;
    let r1 = reg_r1(bases);
    let r2 = reg_r2(bases);
    let loss = weights.alpha * (r1 + r2) + weights.beta * weights.reduction.factor(s.n_tokens()) * kl;
    Ok(PiOutput {
        loss,
        r1,
        r2,
        kl,
        affinity: s,
        cache,
    })
}

/// Backpropagates through the affinity map.
///
/// `grad_s` is any upstream gradient w.r.t. `S` (for example from routing);
/// the KL term of the PI loss is added here with `Ŝ` held constant. Returns
/// `∂/∂z` and accumulates `∂/∂B` (including the regularizers) into `grad_bases`.
pub fn pi_backward(
    z: ArrayView2<'_, f64>,
    bases: &SubspaceBases,
    weights: &PiWeights,
    out: &PiOutput,
    grad_s: Option<ArrayView2<'_, f64>>,
    grad_bases: &mut Array2<f64>,
) -> Array2<f64> {
    let s = &out.affinity.values;
    let target = out.affinity.refined.as_ref().expect("pi_loss refines");
    let kl_scale = weights.beta * weights.reduction.factor(s.nrows());
    let mut g_s = -(target / s) * kl_scale;
    if let Some(extra) = grad_s {
        g_s += &extra;
    }
    let g_energy = affinity_energy_grad(s.view(), g_s.view(), &out.cache.energy_sum);
    let g_proj = projection_grad(bases, &out.cache.projections, g_energy.view());
    *grad_bases += &z.t().dot(&g_proj);
    reg_backward(bases, weights.alpha, grad_bases);
    g_proj.dot(&bases.matrix.t())
}

fn affinity_energy_grad(
    s: ArrayView2<'_, f64>,
    g_s: ArrayView2<'_, f64>,
    energy_sum: &Array1<f64>,
) -> Array2<f64> {
    // s = a / Σa  ⇒  ∂L/∂a_j = (g_j − Σ_l g_l s_l) / Σa
    let inner = (&g_s * &s).sum_axis(Axis(1)).insert_axis(Axis(1));
    (&g_s - &inner) / &energy_sum.view().insert_axis(Axis(1))
}

fn projection_grad(
    bases: &SubspaceBases,
    projections: &Array2<f64>,
    g_energy: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut g = projections * 2.0;
    for (u, mut col) in g.columns_mut().into_iter().enumerate() {
        col *= &g_energy.column(bases.block_of_column(u));
    }
    g
}

/// Gradient of an upstream loss on the raw affinity only (no KL, no regularizer).
pub fn affinity_backward(
    z: ArrayView2<'_, f64>,
    bases: &SubspaceBases,
    eta: f64,
    grad_s: ArrayView2<'_, f64>,
    grad_bases: &mut Array2<f64>,
) -> Result<Array2<f64>> {
    let (s, cache) = affinity_inner(z, bases, eta)?;
    let g_energy = affinity_energy_grad(s.values.view(), grad_s, &cache.energy_sum);
    let g_proj = projection_grad(bases, &cache.projections, g_energy.view());
    *grad_bases += &z.t().dot(&g_proj);
    Ok(g_proj.dot(&bases.matrix.t()))
}

/// Shannon entropy of one probability row.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}
