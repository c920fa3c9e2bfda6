//! Patch-level distribution drift measured with the 1-D Wasserstein distance,
//! in the time domain (raw patch values) and the frequency domain (amplitude
//! spectra of the patches).

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultivariateSeries;
use crate::error::{Error, Result};
use crate::fft::amplitude_spectrum;
use crate::patching::segment_rows;

/// First Wasserstein distance between two empirical distributions.
///
/// Equal-size samples use the sorted-sample formula; otherwise the area
/// between the two CDFs is integrated exactly over the merged support.
pub fn wasserstein_1d(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::Empty("wasserstein_1d needs non-empty samples".into()));
    }
    let mut us = u.to_vec();
    let mut vs = v.to_vec();
    us.sort_by(f64::total_cmp);
    vs.sort_by(f64::total_cmp);
    if us.len() == vs.len() {
        let n = us.len() as f64;
        return Ok(us.iter().zip(&vs).map(|(a, b)| (a - b).abs()).sum::<f64>() / n);
    }
    let mut all: Vec<f64> = us.iter().chain(&vs).copied().collect();
    all.sort_by(f64::total_cmp);
    let (nu, nv) = (us.len() as f64, vs.len() as f64);
    let (mut iu, mut iv) = (0usize, 0usize);
    let mut total = 0.0;
    for w in all.windows(2) {
        let x = w[0];
        while iu < us.len() && us[iu] <= x {
            iu += 1;
        }
        while iv < vs.len() && vs[iv] <= x {
            iv += 1;
        }
        total += (iu as f64 / nu - iv as f64 / nv).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// Amplitude spectrum of one patch: `⌊P/2⌋ + 1` non-negative values.
pub fn spectrum(patch: &[f64]) -> Vec<f64> {
    amplitude_spectrum(patch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Time,
    Frequency,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Time => "time",
            Domain::Frequency => "frequency",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Domain::Time),
            "frequency" | "freq" => Ok(Domain::Frequency),
            other => Err(Error::Config(format!("unknown domain {other:?}"))),
        }
    }
}

/// Pairwise patch distances of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftMatrix {
    pub distances: Array2<f64>,
    pub domain: Domain,
    pub patch_len: usize,
    pub stride: usize,
}

impl DriftMatrix {
    pub fn n_patches(&self) -> usize {
        self.distances.nrows()
    }

    /// Mean of the strictly upper-triangular entries (0 for a single patch).
    pub fn upper_mean(&self) -> f64 {
        let n = self.n_patches();
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                sum += self.distances[[i, j]];
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Largest pairwise distance and its `(i, j)` with `i < j`.
    pub fn max_pair(&self) -> Option<(usize, usize, f64)> {
        let n = self.n_patches();
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            for j in i + 1..n {
                let d = self.distances[[i, j]];
                if best.is_none_or(|b| d > b.2) {
                    best = Some((i, j, d));
                }
            }
        }
        best
    }

    /// Mean distance from each patch to all others.
    pub fn row_means(&self) -> Vec<f64> {
        let n = self.n_patches();
        if n < 2 {
            return vec![0.0; n];
        }
        self.distances
            .sum_axis(Axis(1))
            .iter()
            .map(|s| s / (n - 1) as f64)
            .collect()
    }
}

/// Distribution of each patch in the chosen domain.
pub fn patch_samples(
    channel: ArrayView1<'_, f64>,
    patch_len: usize,
    stride: usize,
    domain: Domain,
) -> Result<Vec<Vec<f64>>> {
    let rows = channel.insert_axis(Axis(0));
    let patches = segment_rows(rows, patch_len, stride)?;
    Ok(patches
        .index_axis(Axis(0), 0)
        .outer_iter()
        .map(|p| {
            let p = p.to_vec();
            match domain {
                Domain::Time => p,
                Domain::Frequency => spectrum(&p),
            }
        })
        .collect())
}

/// Symmetric matrix of pairwise patch Wasserstein distances.
pub fn patch_distance_matrix(
    channel: ArrayView1<'_, f64>,
    patch_len: usize,
    stride: usize,
    domain: Domain,
) -> Result<DriftMatrix> {
    let samples = patch_samples(channel, patch_len, stride, domain)?;
    let n = samples.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| wasserstein_1d(&samples[i], &samples[j]).expect("patches are non-empty"))
                .collect()
        })
        .collect();
    let mut distances = Array2::zeros((n, n));
    for (i, row) in upper.iter().enumerate() {
        for (k, &d) in row.iter().enumerate() {
            let j = i + 1 + k;
            distances[[i, j]] = d;
            distances[[j, i]] = d;
        }
    }
    Ok(DriftMatrix {
        distances,
        domain,
        patch_len,
        stride,
    })
}

/// One drift matrix per channel.
pub fn channel_drift_matrices(
    series: &MultivariateSeries,
    patch_len: usize,
    stride: usize,
    domain: Domain,
) -> Result<Vec<DriftMatrix>> {
    series
        .values()
        .axis_iter(Axis(1))
        .map(|col| patch_distance_matrix(col, patch_len, stride, domain))
        .collect()
}

/// Upper-triangle mean of each channel's drift matrix, averaged over channels.
pub fn average_wasserstein(
    series: &MultivariateSeries,
    patch_len: usize,
    stride: usize,
    domain: Domain,
) -> Result<f64> {
    let mats = channel_drift_matrices(series, patch_len, stride, domain)?;
    Ok(mats.iter().map(DriftMatrix::upper_mean).sum::<f64>() / mats.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn point_masses_and_identity() {
        assert_eq!(wasserstein_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((wasserstein_1d(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(wasserstein_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn unequal_counts_hand_value() {
        // U jumps to 1 at 0; V is 1/2 on [0, 1) and 1 afterwards → area 1/2.
        assert!((wasserstein_1d(&[0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        // Same distribution written with repeated samples.
        assert!(wasserstein_1d(&[1.0, 2.0], &[1.0, 1.0, 2.0, 2.0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn periodic_channel_has_no_drift() {
        let s = 4;
        let channel = Array1::from_shape_fn(64, |t| (2.0 * PI * t as f64 / s as f64).sin());
        let m = patch_distance_matrix(channel.view(), 8, s, Domain::Time).unwrap();
        // The replicate-padded tail patch is the one exception.
        let n = m.n_patches();
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                assert!(m.distances[[i, j]] < 1e-12);
            }
        }
    }

    #[test]
    fn mean_shift_block_structure() {
        let delta = 2.5;
        let channel = Array1::from_shape_fn(64, |t| {
            let base = (2.0 * PI * t as f64 / 8.0).sin();
            if t < 32 {
                base
            } else {
                base + delta
            }
        });
        let m = patch_distance_matrix(channel.view(), 8, 8, Domain::Time).unwrap();
        // Patches 0..4 sit in the first regime, 4..8 (and the padded tail) in the second.
        for i in 0..4 {
            for j in 4..8 {
                assert!((m.distances[[i, j]] - delta).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matrix_symmetric_zero_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let channel = Array1::from_shape_simple_fn(50, || rng.random_range(-2.0..2.0));
        for domain in [Domain::Time, Domain::Frequency] {
            let m = patch_distance_matrix(channel.view(), 10, 5, domain).unwrap();
            for i in 0..m.n_patches() {
                assert_eq!(m.distances[[i, i]], 0.0);
                for j in 0..m.n_patches() {
                    assert_eq!(m.distances[[i, j]], m.distances[[j, i]]);
                    assert!(m.distances[[i, j]] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn time_average_is_positively_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let values = Array2::from_shape_simple_fn((80, 2), || rng.random_range(-1.0..1.0));
        let s = MultivariateSeries::from_values(values.clone()).unwrap();
        let scaled = MultivariateSeries::from_values(values * 3.5).unwrap();
        let a = average_wasserstein(&s, 16, 8, Domain::Time).unwrap();
        let b = average_wasserstein(&scaled, 16, 8, Domain::Time).unwrap();
        assert!((b - 3.5 * a).abs() < 1e-10);
        let fa = average_wasserstein(&s, 16, 8, Domain::Frequency).unwrap();
        let fb = average_wasserstein(&scaled, 16, 8, Domain::Frequency).unwrap();
        assert!((fb - 3.5 * fa).abs() < 1e-9);
    }

    #[test]
    fn white_noise_average_is_small_relative_to_shift() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noise = Array2::from_shape_simple_fn((2048, 3), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let s = MultivariateSeries::from_values(noise).unwrap();
        for m in channel_drift_matrices(&s, 256, 256, Domain::Time).unwrap() {
            // The last patch is the replicate-padded tail (a point mass); leave it out.
            let n = m.n_patches() - 1;
            let mut sum = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    sum += m.distances[[i, j]];
                }
            }
            let avg = sum / (n * (n - 1) / 2) as f64;
            // Two iid samples of 256 standard normals: E[W1] is about 0.1.
            assert!(avg < 0.2, "avg = {avg}");
        }
    }

    #[test]
    fn summaries() {
        let m = DriftMatrix {
            distances: ndarray::array![[0.0, 1.0, 4.0], [1.0, 0.0, 2.0], [4.0, 2.0, 0.0]],
            domain: Domain::Time,
            patch_len: 1,
            stride: 1,
        };
        assert!((m.upper_mean() - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.max_pair(), Some((0, 2, 4.0)));
        assert_eq!(m.row_means(), vec![2.5, 1.5, 3.0]);
    }
}
