//! Checkpoint files.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of JSON
//! header, then the raw little-endian tensor payload. Offsets in the header
//! are relative to the start of the payload.
//!
//! ```text
//! {"format_version": 1,
//!  "config": {...},
//!  "metadata": {...},
//!  "tensors": {"tok_emb": {"shape": [22, 64], "dtype": "f64", "offset": 0}, ...}}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, ModelConfig, Parameters};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Free-form provenance (training steps, seed, final loss, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl Header {
    pub fn n_values(&self) -> usize {
        self.tensors.values().map(|e| e.shape.iter().product::<usize>()).sum()
    }
}

fn err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(params: &Parameters, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with(params, path, Dtype::F64, serde_json::Value::Null)
}

/// Writes `params` with every tensor stored as `dtype`.
pub fn save_checkpoint_with(
    params: &Parameters,
    path: impl AsRef<Path>,
    dtype: Dtype,
    metadata: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::with_capacity(params.n_values() * dtype.size());
    for (name, t) in params.tensors() {
        tensors.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype,
                offset: payload.len() as u64,
            },
        );
        for &v in t.data() {
            match dtype {
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: params.config().clone(),
        metadata,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(8 + json.len() + payload.len());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Header, &'a [u8])> {
    if bytes.len() < 8 {
        return Err(err(path, "file shorter than the header length prefix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[8..];
    if n > rest.len() {
        return Err(err(path, format!("header of {n} bytes truncated at {}", rest.len())));
    }
    let value: serde_json::Value =
        serde_json::from_slice(&rest[..n]).map_err(|e| err(path, format!("header is not JSON: {e}")))?;
    let version = value.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(FORMAT_VERSION as u64) {
        return Err(err(
            path,
            format!("format_version {version:?} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    let header: Header = serde_path_to_error::deserialize(value)
        .map_err(|e| err(path, format!("bad header at {}: {}", e.path(), e.inner())))?;
    Ok((header, &rest[n..]))
}

/// Reads only the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(path, &bytes)?.0)
}

/// Config implied by the stored tensor shapes, where they determine it.
fn implied_config(header: &Header) -> ModelConfig {
    let mut c = header.config.clone();
    let dim = |name: &str, axis: usize| header.tensors.get(name).and_then(|e| e.shape.get(axis).copied());
    if let Some(v) = dim(names::TOKEN_EMBEDDING, 0) {
        c.vocab_size = v;
    }
    if let Some(d) = dim(names::TOKEN_EMBEDDING, 1) {
        c.d_model = d;
    }
    if let Some(t) = dim(names::POSITIONAL_EMBEDDING, 0) {
        c.max_seq_len = t;
    }
    if let Some(h) = dim(&names::mlp_w_in(0), 1) {
        if c.d_model > 0 && h % c.d_model == 0 {
            c.mlp_ratio = h / c.d_model;
        }
    }
    let layers = header.tensors.keys().filter_map(|n| names::layer_of(n)).max();
    if let Some(l) = layers {
        c.n_layers = l + 1;
    }
    c
}

/// Loads a checkpoint, promoting `f32` payloads to `f64`.
///
/// Either every tensor is read and checked against the header config, or an
/// error is returned.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Parameters> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = split_header(path, &bytes)?;
    let mut tensors = BTreeMap::new();
    for (name, e) in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * e.dtype.size();
        if end > payload.len() {
            return Err(err(
                path,
                format!(
                    "payload truncated: tensor {name} needs bytes {start}..{end}, payload has {}",
                    payload.len()
                ),
            ));
        }
        let raw = &payload[start..end];
        let data: Vec<f64> = match e.dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        tensors.insert(name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Parameters::from_tensors(header.config.clone(), tensors).map_err(|e| {
        let fields = header.config.diff(&implied_config(&header));
        let hint = if fields.is_empty() {
            String::new()
        } else {
            let listed: Vec<String> = fields.iter().map(|f| format!("config.{f}")).collect();
            format!("header {} disagrees with stored tensors; ", listed.join(", "))
        };
        err(path, format!("{hint}{e}"))
    })
}

/// Summary of a checkpoint for display.
#[derive(Clone, Debug, Serialize)]
pub struct CheckpointInfo {
    pub format_version: u32,
    pub file_size: u64,
    pub config: ModelConfig,
    pub metadata: serde_json::Value,
    pub n_values: usize,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Header summary; the payload is fully loaded and validated too.
pub fn inspect(path: impl AsRef<Path>) -> Result<CheckpointInfo> {
    let path = path.as_ref();
    load_checkpoint(path)?;
    let header = read_header(path)?;
    let file_size = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    Ok(CheckpointInfo {
        format_version: header.format_version,
        file_size,
        n_values: header.n_values(),
        config: header.config,
        metadata: header.metadata,
        tensors: header.tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, InitScheme};

    fn params() -> Parameters {
        init_params(&ModelConfig::tiny(10, 8), 4, &InitScheme::Random).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&params(), &p).unwrap();
        assert!(load_checkpoint(&p).unwrap().bitwise_eq(&params()));
    }

    #[test]
    fn f32_payload_is_promoted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint_with(&params(), &p, Dtype::F32, serde_json::json!({"note": 1})).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert!(back.max_abs_diff(&params()) < 1e-8);
        assert_eq!(read_header(&p).unwrap().metadata["note"], 1);
    }

    #[test]
    fn truncated_payload_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&params(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 100]).unwrap();
        let e = load_checkpoint(&p).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");
    }

    fn rewrite_header(p: &Path, f: impl FnOnce(&mut serde_json::Value)) {
        let bytes = fs::read(p).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut h: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        f(&mut h);
        let json = serde_json::to_vec(&h).unwrap();
        let mut out = (json.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[8 + n..]);
        fs::write(p, out).unwrap();
    }

    #[test]
    fn wrong_d_model_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&params(), &p).unwrap();
        rewrite_header(&p, |h| h["config"]["d_model"] = 32.into());
        let e = load_checkpoint(&p).unwrap_err().to_string();
        assert!(e.contains("config.d_model"), "{e}");
    }

    #[test]
    fn version_and_unknown_tensor_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&params(), &p).unwrap();
        rewrite_header(&p, |h| h["format_version"] = 7.into());
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("format_version"));

        save_checkpoint(&params(), &p).unwrap();
        rewrite_header(&p, |h| {
            h["tensors"]["extra"] = serde_json::json!({"shape": [1], "dtype": "f64", "offset": 0})
        });
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("extra (unknown)"));
    }
}
