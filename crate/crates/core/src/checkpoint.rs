//! Single-file model archive.
//!
//! ```text
//! "SESCCKPT"            8 bytes
//! version               u16 LE
//! manifest length       u32 LE, then UTF-8 JSON manifest
//! tensor count          u32 LE
//! per tensor            u16 LE name length, name, u32 LE rows, u32 LE cols,
//!                       dtype byte (1 = f32), rows*cols f32 LE
//! SHA-256               32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{CodecConfig, CodecModel, ModelMeta};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tasks::TaskModel;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SESCCKPT";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `"codec"` or `"task"`.
    pub kind: String,
    pub architecture: serde_json::Value,
    pub training_seed: u64,
    pub validation_mse: Option<f64>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode(manifest: &Manifest, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        buf.push(DTYPE_F32);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, ParamStore<f32>)> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("digest mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 8 };
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = c.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(c.take(len)?)?;
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?.to_owned();
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        if c.take(1)?[0] != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("unsupported dtype for {name}")));
        }
        let size = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let data = c.take(size)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if params.find(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        params.add(name, Tensor::from_vec(rows, cols, data));
    }
    if c.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes before digest".into()));
    }
    Ok((manifest, params))
}

/// Hex SHA-256 of a byte string.
pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn codec_to_bytes(model: &CodecModel<f32>, extra: serde_json::Value) -> Result<Vec<u8>> {
    let manifest = Manifest {
        kind: "codec".into(),
        architecture: serde_json::to_value(model.config())?,
        training_seed: model.meta.training_seed,
        validation_mse: model.meta.validation_mse,
        extra,
    };
    encode(&manifest, model.params())
}

pub fn codec_from_bytes(bytes: &[u8]) -> Result<(CodecModel<f32>, Manifest)> {
    let (manifest, params) = decode(bytes)?;
    if manifest.kind != "codec" {
        return Err(Error::Checkpoint(format!("expected a codec archive, found {}", manifest.kind)));
    }
    let config: CodecConfig = serde_json::from_value(manifest.architecture.clone())?;
    let meta = ModelMeta {
        training_seed: manifest.training_seed,
        validation_mse: manifest.validation_mse,
    };
    Ok((CodecModel::from_params(config, params, meta)?, manifest))
}

pub fn task_to_bytes(model: &TaskModel, training_seed: u64, extra: serde_json::Value) -> Result<Vec<u8>> {
    let (h, w) = model.image_size();
    let manifest = Manifest {
        kind: "task".into(),
        architecture: serde_json::json!({ "height": h, "width": w }),
        training_seed,
        validation_mse: None,
        extra,
    };
    encode(&manifest, model.params())
}

pub fn task_from_bytes(bytes: &[u8]) -> Result<(TaskModel, Manifest)> {
    let (manifest, params) = decode(bytes)?;
    if manifest.kind != "task" {
        return Err(Error::Checkpoint(format!("expected a task archive, found {}", manifest.kind)));
    }
    let dim = |k: &str| manifest.architecture.get(k).and_then(|v| v.as_u64()).map(|v| v as usize).ok_or_else(|| Error::Checkpoint(format!("missing {k}")));
    let model = TaskModel::from_params(dim("height")?, dim("width")?, params)?;
    Ok((model, manifest))
}

pub fn save_codec(path: &Path, model: &CodecModel<f32>, extra: serde_json::Value) -> Result<()> {
    fs::write(path, codec_to_bytes(model, extra)?)?;
    Ok(())
}

pub fn load_codec(path: &Path) -> Result<(CodecModel<f32>, Manifest)> {
    codec_from_bytes(&fs::read(path)?)
}

pub fn save_task(path: &Path, model: &TaskModel, training_seed: u64, extra: serde_json::Value) -> Result<()> {
    fs::write(path, task_to_bytes(model, training_seed, extra)?)?;
    Ok(())
}

pub fn load_task(path: &Path) -> Result<(TaskModel, Manifest)> {
    task_from_bytes(&fs::read(path)?)
}
