use std::f64::consts::PI;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::MultivariateSeries;
use crate::error::{Error, Result};

/// One stationary stretch of a synthetic series:
/// `offset + trend·t_local + amplitude·sin(2π·frequency·t + phase) + noise·ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub length: usize,
    #[serde(default = "one")]
    pub amplitude: f64,
    /// Cycles per time step.
    pub frequency: f64,
    #[serde(default)]
    pub trend: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Regime {
    /// Unit-amplitude, noiseless sinusoid.
    pub fn sine(length: usize, frequency: f64) -> Self {
        Self {
            length,
            amplitude: 1.0,
            frequency,
            trend: 0.0,
            noise: 0.0,
            offset: 0.0,
            phase: 0.0,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn one_channel() -> usize {
    1
}

/// Regime-switching generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    #[serde(default = "one_channel")]
    pub channels: usize,
    /// Extra phase added per channel index, so channels are not copies.
    #[serde(default)]
    pub channel_phase_step: f64,
    pub regimes: Vec<Regime>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub series: MultivariateSeries,
    /// Start index of every regime after the first.
    pub boundaries: Vec<usize>,
    /// Regime index of every row.
    pub labels: Vec<usize>,
}

/// Generates a deterministic regime-switching sinusoid series.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    if spec.regimes.is_empty() {
        return Err(Error::Config("synthetic spec needs at least one regime".into()));
    }
    if spec.channels == 0 {
        return Err(Error::Config("synthetic spec needs at least one channel".into()));
    }
    if let Some(i) = spec.regimes.iter().position(|r| r.length == 0) {
        return Err(Error::Config(format!("regime {i} has zero length")));
    }
    let total: usize = spec.regimes.iter().map(|r| r.length).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Array2::zeros((total, spec.channels));
    let mut labels = Vec::with_capacity(total);
    let mut boundaries = Vec::new();
    let mut t = 0usize;
    for (idx, regime) in spec.regimes.iter().enumerate() {
        if idx > 0 {
            boundaries.push(t);
        }
        for local in 0..regime.length {
            for c in 0..spec.channels {
                let phase = regime.phase + spec.channel_phase_step * c as f64;
                let mut v = regime.offset
                    + regime.trend * local as f64
                    + regime.amplitude * (2.0 * PI * regime.frequency * t as f64 + phase).sin();
                if regime.noise != 0.0 {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    v += regime.noise * eps;
                }
                values[[t, c]] = v;
            }
            labels.push(idx);
            t += 1;
        }
    }
    let series = MultivariateSeries::from_values(values)?;
    Ok(SynthOutput {
        series,
        boundaries,
        labels,
    })
}
