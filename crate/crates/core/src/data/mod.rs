//! Multivariate series, train/val/test splitting, z-score scaling and
//! forecast windowing.

mod csv;
mod synth;

pub use self::csv::{load_csv, write_csv, CsvSchema};
pub use self::synth::{synth_generate, Regime, SynthOutput, SynthSpec};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw `[T × C]` observations with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    timestamps: Vec<i64>,
    values: Array2<f64>,
    channel_names: Vec<String>,
}

impl MultivariateSeries {
    /// Builds a series, checking the shape, finiteness and timestamp order.
    pub fn new(
        timestamps: Vec<i64>,
        values: Array2<f64>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let (t, c) = values.dim();
        if t == 0 || c == 0 {
            return Err(Error::Empty(format!("series of shape [{t} x {c}]")));
        }
        if timestamps.len() != t {
            return Err(Error::Shape(format!(
                "{} timestamps for {t} rows",
                timestamps.len()
            )));
        }
        if channel_names.len() != c {
            return Err(Error::Shape(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        if let Some(row) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::NonMonotone { row: row + 1 });
        }
        for ((row, col), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row,
                    column: channel_names[col].clone(),
                });
            }
        }
        Ok(Self {
            timestamps,
            values,
            channel_names,
        })
    }

    /// Series with timestamps `0, 1, …, T-1` and channels named `ch0, ch1, …`.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let (t, c) = values.dim();
        let names = (0..c).map(|i| format!("ch{i}")).collect();
        Self::new((0..t as i64).collect(), values, names)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Rows `[start, end)` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> MultivariateSeries {
        MultivariateSeries {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values.slice(s![start..end, ..]).to_owned(),
            channel_names: self.channel_names.clone(),
        }
    }

    fn with_values(&self, values: Array2<f64>) -> MultivariateSeries {
        MultivariateSeries {
            timestamps: self.timestamps.clone(),
            values,
            channel_names: self.channel_names.clone(),
        }
    }
}

/// One forecasting instance: `input` is `[L × C]`, `target` the next `[H × C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastWindow {
    pub input: Array2<f64>,
    pub target: Array2<f64>,
    pub origin_index: usize,
}

/// Train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    /// 6:2:2, used for the ETT family.
    pub const ETT: SplitRatios = SplitRatios {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    /// 7:1:2, used for every other benchmark.
    pub const STANDARD: SplitRatios = SplitRatios {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!(
                "split ratios must be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Partition lengths for a series of `t` rows; the flooring remainder goes to train.
    pub fn lengths(&self, t: usize) -> (usize, usize, usize) {
        // The small epsilon keeps exact products such as 0.7 * 10 from flooring to 6.
        let floor = |r: f64| ((r * t as f64) + 1e-9).floor() as usize;
        let val = floor(self.val);
        let test = floor(self.test);
        (t - val - test, val, test)
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios::ETT
    }
}

/// Contiguous train/val/test partition. Each part must hold at least
/// `min_len` rows (normally `L + H`).
pub fn split(
    series: &MultivariateSeries,
    ratios: SplitRatios,
    min_len: usize,
) -> Result<(MultivariateSeries, MultivariateSeries, MultivariateSeries)> {
    ratios.validate()?;
    let (n_train, n_val, n_test) = ratios.lengths(series.len());
    for (what, len) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if len < min_len {
            return Err(Error::TooShort {
                what: format!("{what} split"),
                len,
                required: min_len,
            });
        }
    }
    Ok((
        series.slice(0, n_train),
        series.slice(n_train, n_train + n_val),
        series.slice(n_train + n_val, series.len()),
    ))
}

/// Per-channel z-score statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose variance was zero and whose std was clamped to 1.
    #[serde(default)]
    pub degenerate: Vec<usize>,
}

impl Scaler {
    /// Population mean and standard deviation of each training channel.
    pub fn fit(train: &MultivariateSeries) -> Scaler {
        let values = train.values();
        let mean = values.mean_axis(Axis(0)).expect("series is non-empty");
        let std = values.std_axis(Axis(0), 0.0);
        let mut degenerate = Vec::new();
        let std = std
            .iter()
            .enumerate()
            .map(|(c, &s)| {
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    log::warn!(
                        "channel {} has zero variance; std clamped to 1",
                        train.channel_names()[c]
                    );
                    degenerate.push(c);
                    1.0
                }
            })
            .collect();
        Scaler {
            mean: mean.to_vec(),
            std,
            degenerate,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, c: usize) -> Result<()> {
        if c != self.n_channels() {
            return Err(Error::Shape(format!(
                "scaler fitted on {} channels, applied to {c}",
                self.n_channels()
            )));
        }
        Ok(())
    }

    /// Scales a raw `[T × C]` block in place.
    pub fn transform(&self, values: &mut Array2<f64>) -> Result<()> {
        self.check(values.ncols())?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        *values -= &mean;
        *values /= &std;
        Ok(())
    }

    /// Maps a scaled `[T × C]` block back to original units in place.
    pub fn inverse_transform(&self, values: &mut Array2<f64>) -> Result<()> {
        self.check(values.ncols())?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        *values *= &std;
        *values += &mean;
        Ok(())
    }

    pub fn apply(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        let mut values = series.values.clone();
        self.transform(&mut values)?;
        Ok(series.with_values(values))
    }

    pub fn invert(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        let mut values = series.values.clone();
        self.inverse_transform(&mut values)?;
        Ok(series.with_values(values))
    }
}

/// Number of windows `make_windows` produces.
pub fn window_count(t: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if t < lookback + horizon || stride == 0 {
        0
    } else {
        (t - lookback - horizon) / stride + 1
    }
}

/// Slides an `L + H` window over the series with the given stride.
pub fn make_windows(
    series: &MultivariateSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<ForecastWindow>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "lookback, horizon and stride must be >= 1 (got {lookback}, {horizon}, {stride})"
        )));
    }
    let t = series.len();
    if t < lookback + horizon {
        return Err(Error::TooShort {
            what: "series".into(),
            len: t,
            required: lookback + horizon,
        });
    }
    let values = series.values();
    Ok((0..window_count(t, lookback, horizon, stride))
        .map(|w| {
            let origin = w * stride;
            ForecastWindow {
                input: values.slice(s![origin..origin + lookback, ..]).to_owned(),
                target: values
                    .slice(s![origin + lookback..origin + lookback + horizon, ..])
                    .to_owned(),
                origin_index: origin,
            }
        })
        .collect())
}
