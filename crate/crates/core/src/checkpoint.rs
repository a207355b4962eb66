//! Binary model checkpoints.
//!
//! Layout: the 8 magic bytes `APOLLO1\0`, a little-endian `u64` byte length,
//! a JSON header of that length, then every parameter tensor followed by every
//! batch-norm `(mean, var)` pair in architecture order, each value a
//! little-endian IEEE-754 double.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{MlpArchitecture, Mode, ParamModel, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"APOLLO1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "trained")]
    Trained,
    #[serde(rename = "RT")]
    Retrained,
    #[serde(rename = "GA")]
    GradientAscent,
    #[serde(rename = "FT")]
    FineTuned,
    #[serde(rename = "BT")]
    BadTeacher,
    #[serde(rename = "shadow")]
    Shadow,
    #[serde(rename = "shadow-unlearned")]
    ShadowUnlearned,
}

impl From<crate::learn::Method> for Provenance {
    fn from(m: crate::learn::Method) -> Self {
        use crate::learn::Method;
        match m {
            Method::Retrain => Provenance::Retrained,
            Method::GradientAscent => Provenance::GradientAscent,
            Method::FineTune => Provenance::FineTuned,
            Method::BadTeacher => Provenance::BadTeacher,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: MlpArchitecture,
    pub mode: Mode,
    pub seed: u64,
    pub provenance: Provenance,
}

pub fn encode(model: &ParamModel, seed: u64, provenance: Provenance) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        architecture: model.architecture().clone(),
        mode: model.mode(),
        seed,
        provenance,
    };
    let json = serde_json::to_vec(&header)?;
    let values: usize = model.params().iter().map(Tensor::numel).sum::<usize>()
        + model.bn_stats().iter().map(|s| s.mean.len() * 2).sum::<usize>();
    let mut out = Vec::with_capacity(16 + json.len() + values * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |xs: &[f64]| xs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for p in model.params() {
        put(p.data());
    }
    for s in model.bn_stats() {
        put(&s.mean);
        put(&s.var);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamModel, CheckpointHeader)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing APOLLO1 magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().map_err(|_| bad("truncated length"))?) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
    header.architecture.validate()?;
    let mut values = body[len..].chunks_exact(8);
    if !values.remainder().is_empty() {
        return Err(bad("payload is not a whole number of doubles"));
    }
    let mut take = |n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| {
                values
                    .next()
                    .map(|b| f64::from_le_bytes(b.try_into().expect("chunks of 8")))
                    .ok_or_else(|| bad("payload shorter than architecture"))
            })
            .collect()
    };
    let mut params = Vec::new();
    for shape in header.architecture.param_shapes() {
        let n = shape.iter().product();
        params.push(Tensor::new(shape, take(n)?)?);
    }
    let mut stats = Vec::new();
    for c in header.architecture.batch_norm_channels() {
        let mean = take(c)?;
        let var = take(c)?;
        stats.push(RunningStats { mean, var });
    }
    if values.next().is_some() {
        return Err(bad("payload longer than architecture"));
    }
    let model = ParamModel::from_parts(header.architecture.clone(), params, stats, header.mode)?;
    Ok((model, header))
}

pub fn write<W: Write>(mut w: W, model: &ParamModel, seed: u64, provenance: Provenance) -> Result<()> {
    w.write_all(&encode(model, seed, provenance)?)?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<(ParamModel, CheckpointHeader)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Write to `path`, creating parent directories. The file is written under a
/// temporary name and renamed so readers never observe a partial checkpoint.
pub fn save(path: &Path, model: &ParamModel, seed: u64, provenance: Provenance) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, encode(model, seed, provenance)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamModel, CheckpointHeader)> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.display().to_string(),
            hint: "checkpoint not found".into(),
        });
    }
    decode(&fs::read(path)?)
}
