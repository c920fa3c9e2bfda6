//! Thin layer over `rustfft` for the transforms the model needs: complex 1-D
//! transforms, the real part of 2-D transforms over `(patch, hidden)`
//! blocks, and one-sided amplitude spectra.

use std::cell::RefCell;

use ndarray::{Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Unnormalized forward DFT, in place.
pub fn fft(buf: &mut [Complex64]) {
    if buf.len() <= 1 {
        return;
    }
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()));
    plan.process(buf);
}

/// Inverse DFT scaled by `1/n`, in place, so `ifft(fft(x)) == x`.
pub fn ifft(buf: &mut [Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n));
    plan.process(buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
}

fn transform2(x: ArrayView2<'_, f64>, inverse: bool) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let mut data: Array2<Complex64> = x.mapv(|v| Complex64::new(v, 0.0));
    let run = |buf: &mut [Complex64]| if inverse { ifft(buf) } else { fft(buf) };
    // Hidden axis first, then the patch axis.
    let mut line = vec![Complex64::new(0.0, 0.0); cols.max(rows)];
    for mut row in data.axis_iter_mut(Axis(0)) {
        let buf = &mut line[..cols];
        buf.iter_mut().zip(row.iter()).for_each(|(b, v)| *b = *v);
        run(buf);
        row.iter_mut().zip(buf.iter()).for_each(|(v, b)| *v = *b);
    }
    for mut col in data.axis_iter_mut(Axis(1)) {
        let buf = &mut line[..rows];
        buf.iter_mut().zip(col.iter()).for_each(|(b, v)| *b = *v);
        run(buf);
        col.iter_mut().zip(buf.iter()).for_each(|(v, b)| *v = *b);
    }
    data.mapv(|c| c.re)
}

/// `Re(F_patch(F_hidden(x)))` for an `[N × D]` real block.
///
/// As a linear map on real inputs this operator is symmetric, so it is also
/// its own adjoint.
pub fn fft2_real(x: ArrayView2<'_, f64>) -> Array2<f64> {
    transform2(x, false)
}

/// `Re(F⁻¹_patch(F⁻¹_hidden(x)))` with `1/(N·D)` scaling; symmetric as well.
pub fn ifft2_real(x: ArrayView2<'_, f64>) -> Array2<f64> {
    transform2(x, true)
}

/// Magnitudes of the one-sided DFT: `⌊P/2⌋ + 1` bins.
pub fn amplitude_spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft(&mut buf);
    buf.truncate(x.len() / 2 + 1);
    buf.iter().map(|c| c.norm()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn naive_dft(x: &[Complex64], sign: f64) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, v)| {
                        let ang = sign * 2.0 * PI * (k * t) as f64 / n as f64;
                        v * Complex64::new(ang.cos(), ang.sin())
                    })
                    .sum()
            })
            .collect()
    }

    fn random_complex(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn forward_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=16 {
            let x = random_complex(&mut rng, n);
            let expected = naive_dft(&x, -1.0);
            let mut got = x.clone();
            fft(&mut got);
            for (a, b) in got.iter().zip(&expected) {
                assert!((a - b).norm() < 1e-9, "n={n}");
            }
        }
    }

    #[test]
    fn roundtrip_up_to_512() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [1, 2, 3, 7, 12, 64, 100, 257, 511, 512] {
            let x = random_complex(&mut rng, n);
            let mut y = x.clone();
            fft(&mut y);
            ifft(&mut y);
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err <= 1e-6, "n={n} err={err}");
        }
    }

    #[test]
    fn scalar_and_zero_blocks() {
        let x = Array2::from_elem((1, 1), 2.5);
        assert_eq!(fft2_real(x.view())[[0, 0]], 2.5);
        let z = Array2::<f64>::zeros((3, 4));
        assert!(fft2_real(z.view()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn spectrum_closed_forms() {
        let c = [1.5; 8];
        let s = amplitude_spectrum(&c);
        assert_eq!(s.len(), 5);
        assert!((s[0] - 12.0).abs() < 1e-12);
        assert!(s[1..].iter().all(|v| v.abs() < 1e-12));
        let k = 3;
        let p = 16;
        let cosine: Vec<f64> = (0..p)
            .map(|t| (2.0 * PI * (k * t) as f64 / p as f64).cos())
            .collect();
        let s = amplitude_spectrum(&cosine);
        for (bin, v) in s.iter().enumerate() {
            let expected = if bin == k { p as f64 / 2.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-9, "bin {bin}: {v}");
        }
        assert!(amplitude_spectrum(&[0.0; 5]).iter().all(|v| *v == 0.0));
    }
}
