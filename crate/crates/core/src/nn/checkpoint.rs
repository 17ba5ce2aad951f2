//! Binary checkpoint files: magic, JSON header, little-endian tensor data.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams};
use super::tokenizer::vocabulary;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"MLICKPT\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: PathBuf },
    #[error("{path}: malformed header: {message}")]
    Header { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Mismatch { path: PathBuf, message: String },
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: (usize, usize),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    scalar: String,
    config: ModelConfig,
    vocabulary: Vec<String>,
    tensors: Vec<TensorInfo>,
    #[serde(default)]
    meta: serde_json::Value,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Writes `path` atomically (temp file in the same directory, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.tmp", path.file_name().and_then(|f| f.to_str()).unwrap_or("ckpt")));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn to_bytes<T: Scalar>(params: &ModelParams<T>, meta: serde_json::Value) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        scalar: T::TYPE_NAME.to_string(),
        config: params.config.clone(),
        vocabulary: vocabulary().to_vec(),
        tensors: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(n, t)| TensorInfo { name: n.clone(), shape: t.dim() })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + params.num_parameters() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in t.iter() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<T: Scalar>(params: &ModelParams<T>, path: &Path, meta: serde_json::Value) -> Result<(), CheckpointError> {
    write_atomic(path, &to_bytes(params, meta)).map_err(io(path))
}

/// Loads a checkpoint, rejecting any scalar, vocabulary, name or shape mismatch.
pub fn load<T: Scalar>(path: &Path) -> Result<(ModelParams<T>, serde_json::Value), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io(path))?;
    from_bytes(&bytes, path)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(ModelParams<T>, serde_json::Value), CheckpointError> {
    let header_err = |message: String| CheckpointError::Header { path: path.to_path_buf(), message };
    let mismatch = |message: String| CheckpointError::Mismatch { path: path.to_path_buf(), message };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| header_err("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| header_err(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(mismatch(format!("format version {} (expected {FORMAT_VERSION})", header.format_version)));
    }
    if header.scalar != T::TYPE_NAME {
        return Err(mismatch(format!("scalar type {} (expected {})", header.scalar, T::TYPE_NAME)));
    }
    if header.vocabulary != vocabulary() {
        return Err(mismatch("vocabulary differs from this build".into()));
    }
    let mut params = ModelParams::<T>::init(&header.config, 0).map_err(|e| mismatch(e.to_string()))?;
    if header.tensors.len() != params.tensors.len() {
        return Err(mismatch(format!("{} tensors (expected {})", header.tensors.len(), params.tensors.len())));
    }
    let mut data = &bytes[16 + hlen..];
    for ((info, name), t) in header.tensors.iter().zip(&params.names).zip(params.tensors.iter_mut()) {
        if &info.name != name || info.shape != t.dim() {
            return Err(mismatch(format!("tensor {} {:?} (expected {} {:?})", info.name, info.shape, name, t.dim())));
        }
        let need = t.len() * T::BYTES;
        if data.len() < need {
            return Err(mismatch(format!("tensor {name} data truncated")));
        }
        for (v, chunk) in t.iter_mut().zip(data[..need].chunks_exact(T::BYTES)) {
            *v = T::read_le(chunk);
        }
        data = &data[need..];
    }
    if !data.is_empty() {
        return Err(mismatch(format!("{} trailing bytes", data.len())));
    }
    Ok((params, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            max_len: 16,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::<f32>::init(&cfg(), 4).unwrap();
        save(&p, &path, serde_json::json!({"epoch": 3})).unwrap();
        let (q, meta) = load::<f32>(&path).unwrap();
        assert_eq!(p.tensors, q.tensors);
        assert_eq!(meta["epoch"], 3);
    }

    #[test]
    fn rejects_mismatches() {
        let p = ModelParams::<f32>::init(&cfg(), 4).unwrap();
        let bytes = to_bytes(&p, serde_json::Value::Null);
        let path = Path::new("x");
        assert!(matches!(from_bytes::<f64>(&bytes, path), Err(CheckpointError::Mismatch { .. })));
        assert!(matches!(from_bytes::<f32>(&bytes[..bytes.len() - 1], path), Err(CheckpointError::Mismatch { .. })));
        assert!(matches!(from_bytes::<f32>(b"garbage-garbage-", path), Err(CheckpointError::BadMagic { .. })));

        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        header["vocabulary"][5] = "?".into();
        let json = serde_json::to_vec(&header).unwrap();
        let mut forged = bytes[..8].to_vec();
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[16 + hlen..]);
        assert!(matches!(from_bytes::<f32>(&forged, path), Err(CheckpointError::Mismatch { .. })));
    }
}
