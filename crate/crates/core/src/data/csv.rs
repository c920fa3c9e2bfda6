use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use ndarray::Array2;

use super::MultivariateSeries;
use crate::error::{Error, Result};

/// Which CSV columns to read.
///
/// The timestamp column defaults to the first one; `channels` restricts the
/// numeric columns to a named subset (in the given order).
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub timestamp_column: Option<String>,
    pub channels: Option<Vec<String>>,
}

const DATETIME_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
    "%Y/%m/%d %H:%M:%S",
    "%Y/%m/%d %H:%M",
];

/// Parses ISO-8601 text or an epoch number into whole seconds.
pub(crate) fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return v.is_finite().then_some(v.floor() as i64);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    for fmt in DATETIME_FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(raw, "%Y/%m/%d"))
        .ok()?;
    Some(date.and_hms_opt(0, 0, 0)?.and_utc().timestamp())
}

/// Reads a header-first CSV: one timestamp column plus numeric channels.
///
/// Rows are reported 1-based counting the header as row 0, i.e. the first
/// data row is row 1.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            column: name.to_string(),
            message: "column not found in header".into(),
        })
    };
    let ts_col = match &schema.timestamp_column {
        Some(name) => find(name)?,
        None => 0,
    };
    let channel_cols: Vec<usize> = match &schema.channels {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != ts_col).collect(),
    };
    if channel_cols.is_empty() {
        return Err(Error::Empty(format!("{} has no numeric columns", path.display())));
    }
    let names: Vec<String> = channel_cols.iter().map(|&i| headers[i].to_string()).collect();

    let mut timestamps = Vec::new();
    let mut flat = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let ts_raw = record.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(ts_raw).ok_or_else(|| Error::Parse {
            row,
            column: headers[ts_col].to_string(),
            message: format!("unparseable timestamp {ts_raw:?}"),
        })?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::NonMonotone { row });
            }
        }
        timestamps.push(ts);
        for (&col, name) in channel_cols.iter().zip(&names) {
            let cell = record.get(col).unwrap_or("");
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                message: format!("not a number: {cell:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    row,
                    column: name.clone(),
                });
            }
            flat.push(value);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    let values = Array2::from_shape_vec((timestamps.len(), names.len()), flat)
        .map_err(|e| Error::Shape(e.to_string()))?;
    MultivariateSeries::new(timestamps, values, names)
}

/// Writes a series with an epoch-seconds `date` column.
pub fn write_csv(path: impl AsRef<Path>, series: &MultivariateSeries) -> Result<()> {
    let path = path.as_ref();
    let mut out = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("date");
    for name in series.channel_names() {
        text.push(',');
        text.push_str(name);
    }
    text.push('\n');
    for (ts, row) in series.timestamps().iter().zip(series.values().rows()) {
        text.push_str(&ts.to_string());
        for v in row {
            text.push(',');
            text.push_str(&format!("{v:?}"));
        }
        text.push('\n');
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
