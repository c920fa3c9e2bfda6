//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `TFPSCKPT`, a little-endian `u32` header length,
//! a JSON header, then every array as little-endian `f64` values. The header
//! carries the format version, the training config, the scaler, the training
//! history and, for each array, its name, kind, shape and offset (in values)
//! into the data section.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Parameters;
use crate::train::{EpochRecord, TrainConfig};

pub const MAGIC: &[u8; 8] = b"TFPSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ArrayKind {
    Parameter,
    Buffer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    kind: ArrayKind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    scaler: Option<Scaler>,
    channel_names: Vec<String>,
    history: Vec<EpochRecord>,
    arrays: Vec<ArrayEntry>,
}

/// A trained model with everything needed to reuse it on new data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub scaler: Option<Scaler>,
    pub channel_names: Vec<String>,
    pub history: Vec<EpochRecord>,
    pub model: Model,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut record = |kind: ArrayKind, name: &str, a: ndarray::ArrayViewD<'_, f64>| {
            arrays.push(ArrayEntry {
                name: name.to_string(),
                kind,
                shape: a.shape().to_vec(),
                offset: data.len(),
            });
            data.extend(a.iter().copied());
        };
        self.model.visit("", &mut |n, a| record(ArrayKind::Parameter, n, a));
        self.model.visit_buffers("", &mut |n, a| record(ArrayKind::Buffer, n, a));
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            channel_names: self.channel_names.clone(),
            history: self.history.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {VERSION})",
                header.version
            )));
        }
        let raw = &bytes[12 + len..];
        if raw.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        header.config.validate()?;
        let mut model = Model::new(&mut ChaCha8Rng::seed_from_u64(0), header.config.model.clone())?;
        let entries: HashMap<(&str, ArrayKind), &ArrayEntry> = header
            .arrays
            .iter()
            .map(|e| ((e.name.as_str(), e.kind), e))
            .collect();
        let mut failure: Option<Error> = None;
        let mut used = 0;
        let mut fill = |kind: ArrayKind, name: &str, mut a: ndarray::ArrayViewMutD<'_, f64>| {
            if failure.is_some() {
                return;
            }
            match restore(entries.get(&(name, kind)).copied(), name, &data, &mut a) {
                Ok(()) => used += 1,
                Err(e) => failure = Some(e),
            }
        };
        model.visit_mut("", &mut |n, a| fill(ArrayKind::Parameter, n, a));
        model.visit_buffers_mut("", &mut |n, a| fill(ArrayKind::Buffer, n, a));
        if let Some(e) = failure {
            return Err(e);
        }
        if used != header.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays, model uses {used}",
                header.arrays.len()
            )));
        }
        Ok(Self {
            config: header.config,
            scaler: header.scaler,
            channel_names: header.channel_names,
            history: header.history,
            model,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn restore(entry: Option<&ArrayEntry>, name: &str, data: &[f64], dst: &mut ndarray::ArrayViewMutD<'_, f64>) -> Result<()> {
    let e = entry.ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
    if e.shape != dst.shape() {
        return Err(Error::Checkpoint(format!(
            "array {name} has shape {:?}, model expects {:?}",
            e.shape,
            dst.shape()
        )));
    }
    let values = data
        .get(e.offset..e.offset + dst.len())
        .ok_or_else(|| Error::Checkpoint(format!("array {name} runs past the data section")))?;
    for (d, v) in dst.iter_mut().zip(values) {
        *d = *v;
    }
    Ok(())
}
