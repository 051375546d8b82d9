//! Flat little-endian `f32` payload plus a JSON sidecar describing it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::numerics::DType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Exponent of the power-of-two scale, for scaled parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_exp: Option<i32>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Write `<stem>.bin` and `<stem>.json`. Values are narrowed to `f32`.
pub fn save_tensor(stem: &Path, t: &Tensor, scale_exp: Option<i32>) -> Result<()> {
    let (bin, json) = paths(stem);
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let meta = TensorMeta {
        shape: t.shape().to_vec(),
        dtype: t.dtype(),
        scale_exp,
    };
    let text = serde_json::to_string(&meta).map_err(|e| Error::Json {
        path: json.clone(),
        source: e,
    })?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn load_tensor(stem: &Path) -> Result<(Tensor, TensorMeta)> {
    let (bin, json) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let meta: TensorMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: json.clone(),
        source: e,
    })?;
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::shape(format!("{}: truncated payload", bin.display())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let t = Tensor::new(meta.shape.clone(), meta.dtype, data)?;
    Ok((t, meta))
}
