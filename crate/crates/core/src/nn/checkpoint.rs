use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::E8M0Scale;
use crate::tensor::{load_tensor, save_tensor};
use crate::tensor::{Array, ScaledArray};

/// File stem of a parameter: its dotted path becomes nested directories, so
/// `blocks.0.mlp.w1` lives in `blocks/0/mlp/w1.{bin,json}`.
pub fn param_stem(dir: &Path, path: &str) -> PathBuf {
    path.split('.').fold(dir.to_path_buf(), |p, part| p.join(part))
}

/// Write every parameter, keeping the scale exponent of scaled ones.
pub fn save_params(dir: &Path, paths: &[String], params: &[Array]) -> Result<()> {
    for (path, p) in paths.iter().zip(params) {
        let stem = param_stem(dir, path);
        match p {
            Array::Plain(t) => save_tensor(&stem, t, None)?,
            Array::Scaled(s) => save_tensor(&stem, &s.data, Some(s.scale.exponent().unwrap_or(0)))?,
        }
    }
    Ok(())
}

pub fn load_params(dir: &Path, paths: &[String]) -> Result<Vec<Array>> {
    paths
        .iter()
        .map(|path| {
            let (t, meta) = load_tensor(&param_stem(dir, path))?;
            Ok(match meta.scale_exp {
                Some(e) => Array::Scaled(ScaledArray::new(t, E8M0Scale::from_exponent(e)?)),
                None => Array::Plain(t),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::ScaleRange { .. } => Error::Config(format!("checkpoint in {} has an invalid scale", dir.display())),
            other => other,
        })
}
