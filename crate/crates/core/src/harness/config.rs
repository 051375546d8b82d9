use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, Precision};
use crate::numerics::DType;
use crate::scalify::EpsPlacement;

/// Which dynamic rescalings the training step performs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicRescaling {
    /// Rescale the input cotangent of the two layer norms of every block.
    pub layernorm_bwd: bool,
    /// Rescale every parameter gradient once before the optimizer.
    pub grads: bool,
    /// Rebalance the stored parameters every `N` steps.
    pub state_every: Option<usize>,
}

/// Linear warmup to `peak`, then cosine decay to `peak * min_ratio`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_frac: f64,
    pub min_ratio: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            peak: 3e-3,
            warmup_frac: 0.1,
            min_ratio: 0.1,
        }
    }
}

impl LrSchedule {
    /// Learning rate of step `t` (0-based) out of `total`.
    pub fn at(&self, t: usize, total: usize) -> f64 {
        let total = total.max(1) as f64;
        let warm = (self.warmup_frac * total).round();
        let t = t as f64;
        if t < warm {
            return self.peak * (t + 1.0) / warm;
        }
        let span = (total - warm).max(1.0);
        let progress = ((t - warm) / span).clamp(0.0, 1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak * (self.min_ratio + (1.0 - self.min_ratio) * cos)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Sequences from a fixed sparse Markov chain over the vocabulary.
    #[default]
    Synthetic,
    /// Bytes of a file, read as tokens; needs a vocabulary of 256.
    TokenFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub matmul_fmt: DType,
    pub master_state_fmt: DType,
    pub grad_fmt: DType,
    pub optimizer_state_fmt: DType,
    /// Run the scalified step graph on scaled state. Off means plain tensors.
    pub scalify: bool,
    /// Where scaled layer norms add eps; `logical` makes the scalified step
    /// an exact rewrite of the plain one.
    pub layer_norm_eps: EpsPlacement,
    pub dynamic_rescaling: DynamicRescaling,
    pub model: ModelConfig,
    pub steps: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub data: DataSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        preset(0).expect("preset 0 exists")
    }
}

pub const PRESET_COUNT: usize = 5;

/// The five precision recipes, from all-FP32 to FP8 compute with FP16 state.
pub fn preset(k: usize) -> Result<ExperimentConfig> {
    use DType::*;
    let (name, mm, master, grad, opt, ln, grads) = match k {
        0 => ("preset0-fp32", F32, F32, F32, F32, false, false),
        1 => ("preset1-fp16-compute", F16, F32, F16, F32, false, false),
        2 => ("preset2-fp16-master", F16, F16, F16, F32, true, false),
        3 => ("preset3-fp8-compute", E4M3, F16, E5M2, F32, true, false),
        4 => ("preset4-fp8-fp16-state", E4M3, F16, E5M2, F16, true, true),
        _ => return Err(Error::Config(format!("unknown preset {k}; expected 0..={}", PRESET_COUNT - 1))),
    };
    Ok(ExperimentConfig {
        name: name.into(),
        matmul_fmt: mm,
        master_state_fmt: master,
        grad_fmt: grad,
        optimizer_state_fmt: opt,
        scalify: k != 0,
        layer_norm_eps: EpsPlacement::Data,
        dynamic_rescaling: DynamicRescaling {
            layernorm_bwd: ln,
            grads,
            state_every: None,
        },
        model: ModelConfig::default(),
        steps: 300,
        lr: LrSchedule::default(),
        seed: 0,
        data: DataSource::Synthetic,
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn precision(&self) -> Precision {
        Precision {
            matmul: self.matmul_fmt,
            master: self.master_state_fmt,
            grad: self.grad_fmt,
            optimizer: self.optimizer_state_fmt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let storage = [DType::F64, DType::F32, DType::F16, DType::BF16];
        let compute = [DType::F64, DType::F32, DType::F16, DType::BF16, DType::E4M3, DType::E5M2];
        let check = |what: &str, dt: DType, allowed: &[DType]| {
            if allowed.contains(&dt) {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} cannot be {dt}")))
            }
        };
        check("matmul_fmt", self.matmul_fmt, &compute)?;
        check("grad_fmt", self.grad_fmt, &compute)?;
        check("master_state_fmt", self.master_state_fmt, &storage)?;
        check("optimizer_state_fmt", self.optimizer_state_fmt, &storage)?;
        let lr = &self.lr;
        if !(lr.peak.is_finite() && lr.peak > 0.0) {
            return Err(Error::Config(format!("lr.peak must be positive, got {}", lr.peak)));
        }
        if !(0.0..=1.0).contains(&lr.warmup_frac) || !(0.0..=1.0).contains(&lr.min_ratio) {
            return Err(Error::Config("lr.warmup_frac and lr.min_ratio must lie in [0, 1]".into()));
        }
        if self.dynamic_rescaling.state_every == Some(0) {
            return Err(Error::Config("dynamic_rescaling.state_every must be positive".into()));
        }
        let needs_scaling = self.dynamic_rescaling.layernorm_bwd || self.dynamic_rescaling.grads;
        if needs_scaling && !self.scalify {
            return Err(Error::Config("dynamic rescaling requires scalify".into()));
        }
        if let DataSource::TokenFile(_) = self.data {
            if self.model.vocab != 256 {
                return Err(Error::Config("token files need model.vocab = 256".into()));
            }
        }
        Ok(())
    }
}
