use serde::{Deserialize, Serialize};

use super::layers::cast_to;
use crate::error::{Error, Result};
use crate::graph::{Graph, Tracer, ValueType, Var};
use crate::numerics::{decompose_pow2, DType};
use crate::scalify::{scalify, InputKind};
use crate::tensor::{Array, ScaledArray, Tensor};

/// Tag of the dynamic rescaling applied to stored optimizer moments.
pub const OPT_STATE_TAG: &str = "opt_state";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Bias corrections `(1 - beta1^t, 1 - beta2^t)` for step `t >= 1`.
    pub fn bias_corrections(&self, t: u64) -> (f64, f64) {
        let t = t.min(i32::MAX as u64) as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    /// Trace one update of a single parameter. The arithmetic runs in F32;
    /// the new moments are stored in `state_fmt` and the parameter in the
    /// dtype of `p`. 16-bit moments are rebalanced to unit RMS first.
    #[allow(clippy::too_many_arguments)]
    pub fn trace_update(
        &self,
        p: &Var,
        m: &Var,
        v: &Var,
        g: &Var,
        lr: &Var,
        bc1: &Var,
        bc2: &Var,
        state_fmt: DType,
    ) -> (Var, Var, Var) {
        let f = DType::F32;
        let g = cast_to(g, f);
        let m1 = &(&cast_to(m, f) * self.beta1) + &(&g * (1.0 - self.beta1));
        let v1 = &(&cast_to(v, f) * self.beta2) + &(&(&g * &g) * (1.0 - self.beta2));
        let mhat = &m1 / bc1;
        let vhat = &v1 / bc2;
        let step = &(&mhat / &(vhat.sqrt() + self.eps)) * lr;
        let p1 = cast_to(&(&cast_to(p, f) - &step), p.dtype());
        let store = |x: Var| {
            if state_fmt == DType::F16 || state_fmt == DType::BF16 {
                x.dynamic_rescale_l2(OPT_STATE_TAG).cast(state_fmt)
            } else {
                cast_to(&x, state_fmt)
            }
        };
        (p1, store(m1), store(v1))
    }
}

/// Moments of every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
    pub state_fmt: DType,
}

impl AdamState {
    /// Zero moments for parameters of the given shapes. Scaled moments start
    /// with scale 1.
    pub fn zeros(shapes: &[Vec<usize>], state_fmt: DType, scaled: bool) -> Self {
        let zero = |s: &Vec<usize>| {
            let t = Tensor::zeros(s.clone(), state_fmt);
            if scaled {
                Array::Scaled(ScaledArray::new(t, crate::numerics::E8M0Scale::ONE))
            } else {
                Array::Plain(t)
            }
        };
        AdamState {
            m: shapes.iter().map(zero).collect(),
            v: shapes.iter().map(zero).collect(),
            step: 0,
            state_fmt,
        }
    }
}

/// Learning rate as a scalar input: mantissa and power-of-two scale for
/// scaled slots, the plain F32 value otherwise.
pub fn lr_input(lr: f64, scaled: bool) -> Array {
    let lr = lr as f32 as f64;
    if scaled {
        let (m, s) = decompose_pow2(lr);
        if !s.is_any() {
            return Array::Scaled(ScaledArray::new(Tensor::scalar(m, DType::F32), s));
        }
    }
    Array::Plain(Tensor::scalar(lr, DType::F32))
}

/// Graph of one Adam step over all parameters.
///
/// Inputs: params, m, v, grads (each in parameter order), lr, bc1, bc2.
/// Outputs: new params, new m, new v.
pub fn update_graph(cfg: &AdamConfig, params: &[ValueType], grads: &[DType], state_fmt: DType) -> Result<Graph> {
    let t = Tracer::new();
    let n = params.len();
    let p: Vec<Var> = params.iter().map(|ty| t.input(ty.clone())).collect();
    let state = |t: &Tracer| -> Vec<Var> {
        params
            .iter()
            .map(|ty| t.input(ValueType::new(ty.shape.clone(), state_fmt)))
            .collect()
    };
    let m = state(&t);
    let v = state(&t);
    let g: Vec<Var> = params
        .iter()
        .zip(grads)
        .map(|(ty, &dt)| t.input(ValueType::new(ty.shape.clone(), dt)))
        .collect();
    let scalar = || t.input(ValueType::scalar(DType::F32));
    let (lr, bc1, bc2) = (scalar(), scalar(), scalar());
    let mut outs = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for i in 0..n {
        let (a, b, c) = cfg.trace_update(&p[i], &m[i], &v[i], &g[i], &lr, &bc1, &bc2, state_fmt);
        outs[0].push(a);
        outs[1].push(b);
        outs[2].push(c);
    }
    t.finish(&outs.concat())
}

/// Apply one Adam step on the host side of the graph boundary.
///
/// The update is traced, scalified when any parameter is scaled, and
/// evaluated. Non-finite gradients are rejected with the parameter's path.
pub fn adam_update(
    cfg: &AdamConfig,
    paths: &[String],
    state: &mut AdamState,
    params: &[Array],
    grads: &[Array],
    lr: f64,
) -> Result<Vec<Array>> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || paths.len() != n {
        return Err(Error::invalid("parameter, gradient and state trees differ"));
    }
    for (path, g) in paths.iter().zip(grads) {
        if !g.to_tensor().all_finite() {
            return Err(Error::NonFinite {
                path: format!("grad/{path}"),
            });
        }
    }
    let types: Vec<ValueType> = params
        .iter()
        .map(|p| {
            let t = match p {
                Array::Plain(t) => t,
                Array::Scaled(s) => &s.data,
            };
            ValueType::new(t.shape().to_vec(), t.dtype())
        })
        .collect();
    let gdt: Vec<DType> = grads
        .iter()
        .map(|g| match g {
            Array::Plain(t) => t.dtype(),
            Array::Scaled(s) => s.data.dtype(),
        })
        .collect();
    let g = update_graph(cfg, &types, &gdt, state.state_fmt)?;
    let scaled = params.iter().any(|p| p.as_scaled().is_some());
    let step = state.step + 1;
    let (bc1, bc2) = cfg.bias_corrections(step);
    let mut inputs: Vec<Array> = params.to_vec();
    inputs.extend(state.m.iter().cloned());
    inputs.extend(state.v.iter().cloned());
    inputs.extend(grads.iter().cloned());
    inputs.push(lr_input(lr, scaled));
    inputs.push(Tensor::scalar(bc1, DType::F32).into());
    inputs.push(Tensor::scalar(bc2, DType::F32).into());

    let mut out = if scaled {
        let mut kinds = vec![InputKind::Scaled; 4 * n];
        kinds.push(match inputs[4 * n] {
            Array::Scaled(_) => InputKind::Scaled,
            Array::Plain(_) => InputKind::Plain,
        });
        kinds.extend([InputKind::Plain, InputKind::Plain]);
        scalify(&g, &kinds)?.eval(&inputs)?
    } else {
        let plain: Vec<Tensor> = inputs.iter().map(Array::to_tensor).collect();
        crate::graph::eval(&g, &plain)?.into_iter().map(Array::Plain).collect()
    };
    let v = out.split_off(2 * n);
    let m = out.split_off(n);
    state.m = m;
    state.v = v;
    state.step = step;
    Ok(out)
}
