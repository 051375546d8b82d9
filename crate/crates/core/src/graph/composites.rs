//! Built-in composite operations: activations, normalization, softmax, the
//! backward-pass markers used by the model code and the scaled kernels that
//! the scale-propagation pass emits.

use std::any::Any;
use std::sync::Arc;

use super::{CompositeOp, ValueType, Var};
use crate::error::{Error, Result};
use crate::numerics::DType;
use crate::tensor::Tensor;

/// Composite with default attributes, looked up by name.
pub fn builtin(name: &str) -> Option<Arc<dyn CompositeOp>> {
    Some(match name {
        "relu" => activation(ActKind::Relu),
        "gelu" => activation(ActKind::Gelu),
        "swish" => activation(ActKind::Swish),
        "layer_norm" => Arc::new(LayerNorm { eps: 1e-5 }),
        "softmax" => Arc::new(Softmax { log: false }),
        "log_softmax" => Arc::new(Softmax { log: true }),
        _ => return None,
    })
}

pub fn activation(kind: ActKind) -> Arc<dyn CompositeOp> {
    Arc::new(Activation { kind })
}

const GELU_K: f64 = 1.595_769_121_605_730_8; // 2 * sqrt(2 / pi)
const GELU_C: f64 = 0.044715;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Activations of the form `x * g(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActKind {
    Relu,
    /// tanh approximation, written as `x * sigmoid(k * (x + c x^3))`.
    Gelu,
    Swish,
}

impl ActKind {
    pub fn name(self) -> &'static str {
        match self {
            ActKind::Relu => "relu",
            ActKind::Gelu => "gelu",
            ActKind::Swish => "swish",
        }
    }

    pub fn gate(self, x: f64) -> f64 {
        match self {
            ActKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActKind::Gelu => sigmoid(GELU_K * (x + GELU_C * x * x * x)),
            ActKind::Swish => sigmoid(x),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            _ => x * self.gate(x),
        }
    }

    /// `f(xd * xs) / xs`, with the gate evaluated on the real value.
    pub fn apply_scaled(self, xd: f64, xs: f64) -> f64 {
        let x = xd * xs;
        match self {
            ActKind::Relu => {
                if x > 0.0 {
                    xd
                } else {
                    0.0
                }
            }
            _ => xd * self.gate(x),
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            ActKind::Relu => self.gate(x),
            ActKind::Gelu => {
                let g = self.gate(x);
                g + x * g * (1.0 - g) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            ActKind::Swish => {
                let g = sigmoid(x);
                g + x * g * (1.0 - g)
            }
        }
    }
}

fn expect_args(name: &str, args: &[ValueType], n: usize) -> std::result::Result<(), String> {
    if args.len() != n {
        return Err(format!("{name} takes {n} arguments, got {}", args.len()));
    }
    Ok(())
}

fn same_shape(name: &str, a: &ValueType, b: &ValueType) -> std::result::Result<(), String> {
    if a.shape != b.shape {
        return Err(format!("{name}: shapes {:?} and {:?} differ", a.shape, b.shape));
    }
    Ok(())
}

fn scalar_arg(name: &str, a: &ValueType) -> std::result::Result<(), String> {
    if a.rank() != 0 {
        return Err(format!("{name}: expected a scalar scale, got {a}"));
    }
    Ok(())
}

fn rank1(name: &str, a: &ValueType) -> std::result::Result<(), String> {
    if a.rank() == 0 {
        return Err(format!("{name} needs rank >= 1"));
    }
    Ok(())
}

fn out(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_raw(like.shape().to_vec(), DType::F64, data)
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1).max(1)
}

fn no_second_order(name: &str) -> Error {
    Error::Grad(format!("`{name}` is not differentiable"))
}

fn keep_last(x: &Var, reduced: &Var) -> Var {
    x.keep_axis(reduced, x.rank() - 1)
}

fn sigmoid_var(z: &Var) -> Var {
    let e = (-z).exp();
    1.0 / (&e + 1.0)
}

#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActKind,
}

impl CompositeOp for Activation {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        expect_args(self.name(), args, 1)?;
        Ok(vec![args[0].clone()])
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![args[0].map(|x| self.kind.apply(x))])
    }

    fn decompose(&self, args: &[Var]) -> Option<Vec<Var>> {
        let x = &args[0];
        Some(vec![match self.kind {
            ActKind::Relu => x.maximum(&x.zeros_like()),
            ActKind::Gelu => {
                let z = (x + &(x * x * x * GELU_C)) * GELU_K;
                x * sigmoid_var(&z)
            }
            ActKind::Swish => x * sigmoid_var(x),
        }])
    }

    fn vjp(&self, args: &[Var], _outs: &[Var], cts: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        let x = &args[0];
        Ok(vec![cts[0].as_ref().map(|ct| {
            x.composite_as(Arc::new(ActivationGrad { kind: self.kind }), &[ct], x.dtype())
        })])
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// `activation_grad(x, ct) = ct * f'(x)`.
#[derive(Debug, Clone)]
pub struct ActivationGrad {
    pub kind: ActKind,
}

impl CompositeOp for ActivationGrad {
    fn name(&self) -> &str {
        match self.kind {
            ActKind::Relu => "relu_grad",
            ActKind::Gelu => "gelu_grad",
            ActKind::Swish => "swish_grad",
        }
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        expect_args(self.name(), args, 2)?;
        same_shape(self.name(), &args[0], &args[1])?;
        Ok(vec![ValueType::new(
            args[0].shape.clone(),
            args[0].dtype.promote(args[1].dtype),
        )])
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        let data = args[0]
            .data()
            .iter()
            .zip(args[1].data())
            .map(|(&x, &c)| c * self.kind.deriv(x))
            .collect();
        Ok(vec![out(args[0], data)])
    }

    fn decompose(&self, args: &[Var]) -> Option<Vec<Var>> {
        let (x, ct) = (&args[0], &args[1]);
        Some(vec![match self.kind {
            ActKind::Relu => {
                let off = x.zeros_like().ge(x);
                off.select(&ct.zeros_like(), ct)
            }
            ActKind::Gelu => {
                let z = (x + &(x * x * x * GELU_C)) * GELU_K;
                let g = sigmoid_var(&z);
                let dz = ((x * x) * (3.0 * GELU_C) + 1.0) * GELU_K;
                let d = &g + &(x * &g * (1.0 - &g) * dz);
                ct * d
            }
            ActKind::Swish => {
                let g = sigmoid_var(x);
                let d = &g + &(x * &g * (1.0 - &g));
                ct * d
            }
        }])
    }

    fn vjp(&self, _: &[Var], _: &[Var], _: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        Err(no_second_order(self.name()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

struct RowStats {
    xc: Vec<f64>,
    sd: f64,
    d: f64,
}

fn row_stats(row: &[f64], eps: f64) -> RowStats {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let xc: Vec<f64> = row.iter().map(|&x| x - mu).collect();
    let var = xc.iter().map(|&v| v * v).sum::<f64>() / n;
    let sd = var.sqrt();
    RowStats { xc, sd, d: sd + eps }
}

/// Normalize the last axis: `(x - mean) / (std + eps)`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub eps: f64,
}

impl CompositeOp for LayerNorm {
    fn name(&self) -> &str {
        "layer_norm"
    }

    fn attrs(&self) -> String {
        format!("eps={}", self.eps)
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        expect_args(self.name(), args, 1)?;
        rank1(self.name(), &args[0])?;
        Ok(vec![args[0].clone()])
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        let x = args[0];
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(last_dim(x)) {
            let s = row_stats(row, self.eps);
            data.extend(s.xc.iter().map(|&v| v / s.d));
        }
        Ok(vec![out(x, data)])
    }

    fn decompose(&self, args: &[Var]) -> Option<Vec<Var>> {
        let x = &args[0];
        let a = x.rank() - 1;
        let n = x.shape()[a] as f64;
        let mu = x.sum(&[a]) / n;
        let xc = x - &keep_last(x, &mu);
        let var = (&xc * &xc).sum(&[a]) / n;
        let d = var.sqrt() + self.eps;
        Some(vec![&xc / &keep_last(x, &d)])
    }

    fn vjp(&self, args: &[Var], _outs: &[Var], cts: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        let x = &args[0];
        Ok(vec![cts[0].as_ref().map(|ct| {
            x.composite_as(Arc::new(LayerNormGrad { eps: self.eps }), &[ct], x.dtype())
        })])
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Gradient of [`LayerNorm`] with respect to its input.
#[derive(Debug, Clone)]
pub struct LayerNormGrad {
    pub eps: f64,
}

impl LayerNormGrad {
    fn row(&self, x: &[f64], ct: &[f64], dst: &mut Vec<f64>) {
        let n = x.len() as f64;
        let s = row_stats(x, self.eps);
        let sct: f64 = ct.iter().zip(&s.xc).map(|(&c, &v)| c * v).sum();
        // the std term vanishes on constant rows
        let coef = if s.sd == 0.0 {
            0.0
        } else {
            sct / (s.d * s.d * n * s.sd)
        };
        let start = dst.len();
        dst.extend(ct.iter().zip(&s.xc).map(|(&c, &v)| c / s.d - v * coef));
        let mg = dst[start..].iter().sum::<f64>() / n;
        for g in &mut dst[start..] {
            *g -= mg;
        }
    }
}

impl CompositeOp for LayerNormGrad {
    fn name(&self) -> &str {
        "layer_norm_grad"
    }

    fn attrs(&self) -> String {
        format!("eps={}", self.eps)
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        expect_args(self.name(), args, 2)?;
        rank1(self.name(), &args[0])?;
        same_shape(self.name(), &args[0], &args[1])?;
        Ok(vec![ValueType::new(
            args[0].shape.clone(),
            args[0].dtype.promote(args[1].dtype),
        )])
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        let (x, ct) = (args[0], args[1]);
        let d = last_dim(x);
        let mut data = Vec::with_capacity(x.len());
        for (xr, cr) in x.data().chunks(d).zip(ct.data().chunks(d)) {
            self.row(xr, cr, &mut data);
        }
        Ok(vec![out(x, data)])
    }

    fn decompose(&self, args: &[Var]) -> Option<Vec<Var>> {
        let (x, ct) = (&args[0], &args[1]);
        let a = x.rank() - 1;
        let n = x.shape()[a] as f64;
        let mu = x.sum(&[a]) / n;
        let xc = x - &keep_last(x, &mu);
        let sd = ((&xc * &xc).sum(&[a]) / n).sqrt();
        let d = &sd + self.eps;
        let sct = (ct * &xc).sum(&[a]);
        let coef = sct / (((&d * &d) * n) * &sd);
        let gxc = ct / &keep_last(x, &d) - &xc * &keep_last(x, &coef);
        let mg = gxc.sum(&[a]) / n;
        Some(vec![&gxc - &keep_last(x, &mg)])
    }

    fn vjp(&self, _: &[Var], _: &[Var], _: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        Err(no_second_order(self.name()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

fn softmax_row(row: &[f64], log: bool, dst: &mut Vec<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = dst.len();
    dst.extend(row.iter().map(|&x| x - m));
    if log {
        let s: f64 = dst[start..].iter().map(|&z| z.exp()).sum();
        let ls = s.ln();
        for z in &mut dst[start..] {
            *z -= ls;
        }
    } else {
        for z in &mut dst[start..] {
            *z = z.exp();
        }
        let s: f64 = dst[start..].iter().sum();
        for z in &mut dst[start..] {
            *z /= s;
        }
    }
}

/// Softmax (or log-softmax) over the last axis.
#[derive(Debug, Clone)]
pub struct Softmax {
    pub log: bool,
}

impl CompositeOp for Softmax {
    fn name(&self) -> &str {
        if self.log {
            "log_softmax"
        } else {
            "softmax"
        }
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        expect_args(self.name(), args, 1)?;
        rank1(self.name(), &args[0])?;
        Ok(vec![args[0].clone()])
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        let x = args[0];
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(last_dim(x)) {
            softmax_row(row, self.log, &mut data);
        }
        Ok(vec![out(x, data)])
    }

    fn decompose(&self, args: &[Var]) -> Option<Vec<Var>> {
        let x = &args[0];
        let a = x.rank() - 1;
        let m = x.max(&[a]).stop_gradient();
        let z = x - &keep_last(x, &m);
        let e = z.exp();
        let s = e.sum(&[a]);
        Some(vec![if self.log {
            &z - &keep_last(x, &s.log())
        } else {
            &e / &keep_last(x, &s)
        }])
    }

    fn vjp(&self, args: &[Var], outs: &[Var], cts: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        let y = &outs[0];
        let dt = args[0].dtype();
        Ok(vec![cts[0].as_ref().map(|ct| {
            y.composite_as(Arc::new(SoftmaxGrad { log: self.log }), &[ct], dt)
        })])
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// `softmax_grad(y, ct) = y * (ct - sum(ct * y))`;
/// `log_softmax_grad(y, ct) = ct - exp(y) * sum(ct)`.
#[derive(Debug, Clone)]
pub struct SoftmaxGrad {
    pub log: bool,
}

impl CompositeOp for SoftmaxGrad {
    fn name(&self) -> &str {
        if self.log {
            "log_softmax_grad"
        } else {
            "softmax_grad"
        }
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        expect_args(self.name(), args, 2)?;
        rank1(self.name(), &args[0])?;
        same_shape(self.name(), &args[0], &args[1])?;
        Ok(vec![ValueType::new(
            args[0].shape.clone(),
            args[0].dtype.promote(args[1].dtype),
        )])
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        let (y, ct) = (args[0], args[1]);
        let d = last_dim(y);
        let mut data = Vec::with_capacity(y.len());
        for (yr, cr) in y.data().chunks(d).zip(ct.data().chunks(d)) {
            if self.log {
                let s: f64 = cr.iter().sum();
                data.extend(yr.iter().zip(cr).map(|(&y, &c)| c - y.exp() * s));
            } else {
                let s: f64 = yr.iter().zip(cr).map(|(&y, &c)| c * y).sum();
                data.extend(yr.iter().zip(cr).map(|(&y, &c)| y * (c - s)));
            }
        }
        Ok(vec![out(y, data)])
    }

    fn decompose(&self, args: &[Var]) -> Option<Vec<Var>> {
        let (y, ct) = (&args[0], &args[1]);
        let a = y.rank() - 1;
        Some(vec![if self.log {
            ct - &(y.exp() * keep_last(y, &ct.sum(&[a])))
        } else {
            let s = (ct * y).sum(&[a]);
            y * (ct - &keep_last(y, &s))
        }])
    }

    fn vjp(&self, _: &[Var], _: &[Var], _: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        Err(no_second_order(self.name()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

macro_rules! identity_composite {
    ($ty:ident, $name:literal, $attrs:expr) => {
        impl CompositeOp for $ty {
            fn name(&self) -> &str {
                $name
            }

            fn attrs(&self) -> String {
                $attrs(self)
            }

            fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
                expect_args($name, args, 1)?;
                Ok(vec![args[0].clone()])
            }

            fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
                Ok(vec![args[0].clone()])
            }

            fn decompose(&self, args: &[Var]) -> Option<Vec<Var>> {
                Some(vec![args[0].clone()])
            }

            fn vjp(&self, _args: &[Var], _outs: &[Var], cts: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
                Ok(vec![cts[0].as_ref().map(|ct| self.backward(ct))])
            }

            fn as_any(&self) -> &dyn Any {
                self
            }
        }
    };
}

/// Identity on unscaled values. Under scale propagation, moves the scale so
/// that the data has (power-of-two rounded) unit RMS.
#[derive(Debug, Clone)]
pub struct DynamicRescaleL2 {
    pub tag: String,
}

impl DynamicRescaleL2 {
    fn backward(&self, ct: &Var) -> Var {
        ct.clone()
    }
}

identity_composite!(DynamicRescaleL2, "dynamic_rescale_l2", |s: &DynamicRescaleL2| format!(
    "tag={}",
    s.tag
));

/// Identity whose cotangent is dynamically rescaled.
#[derive(Debug, Clone)]
pub struct RescaleOnBackward {
    pub tag: String,
}

impl RescaleOnBackward {
    fn backward(&self, ct: &Var) -> Var {
        ct.dynamic_rescale_l2(&self.tag)
    }
}

identity_composite!(RescaleOnBackward, "rescale_on_backward", |s: &RescaleOnBackward| format!(
    "tag={}",
    s.tag
));

/// Identity whose cotangent is cast to `dtype`.
#[derive(Debug, Clone)]
pub struct CastOnBackward {
    pub dtype: DType,
}

impl CastOnBackward {
    fn backward(&self, ct: &Var) -> Var {
        ct.cast(self.dtype)
    }
}

identity_composite!(CastOnBackward, "cast_on_backward", |s: &CastOnBackward| format!(
    "dtype={}",
    s.dtype
));

// ---- kernels emitted by scale propagation ----

fn scaled_infer(name: &str, args: &[ValueType], n: usize) -> std::result::Result<Vec<ValueType>, String> {
    expect_args(name, args, n)?;
    scalar_arg(name, &args[1])?;
    let mut dt = args[0].dtype;
    if n == 3 {
        same_shape(name, &args[0], &args[2])?;
        dt = dt.promote(args[2].dtype);
    }
    Ok(vec![ValueType::new(args[0].shape.clone(), dt)])
}

/// `scaled_act(xd, xs)`: data of `f(xd * xs)` under scale `xs`.
#[derive(Debug, Clone)]
pub struct ScaledActivation {
    pub kind: ActKind,
}

impl CompositeOp for ScaledActivation {
    fn name(&self) -> &str {
        match self.kind {
            ActKind::Relu => "scaled_relu",
            ActKind::Gelu => "scaled_gelu",
            ActKind::Swish => "scaled_swish",
        }
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        scaled_infer(self.name(), args, 2)
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        let s = args[1].item();
        Ok(vec![args[0].map(|x| self.kind.apply_scaled(x, s))])
    }

    fn vjp(&self, _: &[Var], _: &[Var], _: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        Err(no_second_order(self.name()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// `scaled_act_grad(xd, xs, cd) = cd * f'(xd * xs)`.
#[derive(Debug, Clone)]
pub struct ScaledActivationGrad {
    pub kind: ActKind,
}

impl CompositeOp for ScaledActivationGrad {
    fn name(&self) -> &str {
        match self.kind {
            ActKind::Relu => "scaled_relu_grad",
            ActKind::Gelu => "scaled_gelu_grad",
            ActKind::Swish => "scaled_swish_grad",
        }
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        scaled_infer(self.name(), args, 3)
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        let s = args[1].item();
        let data = args[0]
            .data()
            .iter()
            .zip(args[2].data())
            .map(|(&x, &c)| c * self.kind.deriv(x * s))
            .collect();
        Ok(vec![out(args[0], data)])
    }

    fn vjp(&self, _: &[Var], _: &[Var], _: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        Err(no_second_order(self.name()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Where a scaled layer norm adds its stability term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsPlacement {
    /// On the standard deviation of the data component. Independent of the
    /// scale, so a tiny-variance tensor carried with an accurate scale still
    /// normalizes to unit variance.
    #[default]
    Data,
    /// On the logical standard deviation (`eps / xs` on the data): the result
    /// equals the unscaled layer norm exactly.
    Logical,
}

impl EpsPlacement {
    fn eps(self, eps: f64, xs: f64) -> f64 {
        match self {
            EpsPlacement::Data => eps,
            EpsPlacement::Logical => eps / xs,
        }
    }
}

/// Layer norm of the data `xd` of a value with scale `xs`, with unit output scale.
#[derive(Debug, Clone)]
pub struct ScaledLayerNorm {
    pub eps: f64,
    pub placement: EpsPlacement,
}

impl CompositeOp for ScaledLayerNorm {
    fn name(&self) -> &str {
        "scaled_layer_norm"
    }

    fn attrs(&self) -> String {
        format!("eps={}, placement={:?}", self.eps, self.placement)
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        rank1(self.name(), &args[0])?;
        scaled_infer(self.name(), args, 2)
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        let (xd, xs) = (args[0], args[1].item());
        LayerNorm {
            eps: self.placement.eps(self.eps, xs),
        }
        .eval(&[xd])
    }

    fn vjp(&self, _: &[Var], _: &[Var], _: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        Err(no_second_order(self.name()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Layer-norm cotangent on scaled operands `(xd, xs, cd)`; the result carries
/// scale `cs / xs`.
#[derive(Debug, Clone)]
pub struct ScaledLayerNormGrad {
    pub eps: f64,
    pub placement: EpsPlacement,
}

impl CompositeOp for ScaledLayerNormGrad {
    fn name(&self) -> &str {
        "scaled_layer_norm_grad"
    }

    fn attrs(&self) -> String {
        format!("eps={}, placement={:?}", self.eps, self.placement)
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        rank1(self.name(), &args[0])?;
        scaled_infer(self.name(), args, 3)
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        let (xd, xs, cd) = (args[0], args[1].item(), args[2]);
        LayerNormGrad {
            eps: self.placement.eps(self.eps, xs),
        }
        .eval(&[xd, cd])
    }

    fn vjp(&self, _: &[Var], _: &[Var], _: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        Err(no_second_order(self.name()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// `scaled_softmax(xd, xs) = softmax(xd * xs)` with unit output scale.
#[derive(Debug, Clone)]
pub struct ScaledSoftmax {
    pub log: bool,
}

impl CompositeOp for ScaledSoftmax {
    fn name(&self) -> &str {
        if self.log {
            "scaled_log_softmax"
        } else {
            "scaled_softmax"
        }
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        rank1(self.name(), &args[0])?;
        scaled_infer(self.name(), args, 2)
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        let s = args[1].item();
        let x = args[0].map(|v| v * s);
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(last_dim(&x)) {
            softmax_row(row, self.log, &mut data);
        }
        Ok(vec![out(&x, data)])
    }

    fn vjp(&self, _: &[Var], _: &[Var], _: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        Err(no_second_order(self.name()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Softmax cotangent on scaled operands `(yd, ys, cd)`. The result carries
/// scale `ys * cs` (softmax) or `cs` (log-softmax).
#[derive(Debug, Clone)]
pub struct ScaledSoftmaxGrad {
    pub log: bool,
}

impl CompositeOp for ScaledSoftmaxGrad {
    fn name(&self) -> &str {
        if self.log {
            "scaled_log_softmax_grad"
        } else {
            "scaled_softmax_grad"
        }
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String> {
        rank1(self.name(), &args[0])?;
        scaled_infer(self.name(), args, 3)
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>> {
        let (yd, ys, cd) = (args[0], args[1].item(), args[2]);
        let d = last_dim(yd);
        let mut data = Vec::with_capacity(yd.len());
        for (yr, cr) in yd.data().chunks(d).zip(cd.data().chunks(d)) {
            if self.log {
                let s: f64 = cr.iter().sum();
                data.extend(yr.iter().zip(cr).map(|(&y, &c)| c - (y * ys).exp() * s));
            } else {
                let s: f64 = yr.iter().zip(cr).map(|(&y, &c)| c * y).sum();
                let t = ys * s;
                data.extend(yr.iter().zip(cr).map(|(&y, &c)| y * (c - t)));
            }
        }
        Ok(vec![out(yd, data)])
    }

    fn vjp(&self, _: &[Var], _: &[Var], _: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
        Err(no_second_order(self.name()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{eval, trace, ValueType};
    use rand::SeedableRng;

    fn check_decomposition(op: Arc<dyn CompositeOp>, args: Vec<Tensor>, tol: f64) {
        let types: Vec<ValueType> = args.iter().map(ValueType::of).collect();
        let closed = trace(&types, |xs| {
            let rest: Vec<&Var> = xs[1..].iter().collect();
            vec![xs[0].composite(op.clone(), &rest)]
        })
        .unwrap();
        let reference = trace(&types, |xs| op.decompose(xs).unwrap()).unwrap();
        let a = eval(&closed, &args).unwrap();
        let b = eval(&reference, &args).unwrap();
        for (x, y) in a[0].data().iter().zip(b[0].data()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{}: {x} vs {y}", op.name());
        }
    }

    fn sample(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape.to_vec(), 0.0, 1.5, DType::F64, &mut rng)
    }

    #[test]
    fn decompositions_match_closed_forms() {
        let x = sample(&[4, 8], 1);
        let ct = sample(&[4, 8], 2);
        for k in [ActKind::Relu, ActKind::Gelu, ActKind::Swish] {
            check_decomposition(activation(k), vec![x.clone()], 1e-14);
            check_decomposition(Arc::new(ActivationGrad { kind: k }), vec![x.clone(), ct.clone()], 1e-13);
        }
        for eps in [0.0, 1e-5] {
            check_decomposition(Arc::new(LayerNorm { eps }), vec![x.clone()], 1e-13);
            check_decomposition(Arc::new(LayerNormGrad { eps }), vec![x.clone(), ct.clone()], 1e-12);
        }
        for log in [false, true] {
            check_decomposition(Arc::new(Softmax { log }), vec![x.clone()], 1e-14);
            let y = Softmax { log }.eval(&[&x]).unwrap().remove(0);
            check_decomposition(Arc::new(SoftmaxGrad { log }), vec![y, ct.clone()], 1e-13);
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for k in [ActKind::Gelu, ActKind::Swish] {
            for i in -40..=40 {
                let x = i as f64 * 0.1 + 0.013;
                let h = 1e-6;
                let fd = (k.apply(x + h) - k.apply(x - h)) / (2.0 * h);
                assert!((fd - k.deriv(x)).abs() < 1e-8, "{k:?} at {x}");
            }
        }
        assert_eq!(ActKind::Relu.apply(-2.0), 0.0);
        assert_eq!(ActKind::Relu.deriv(0.0), 0.0);
        // gelu(1) with the tanh approximation
        assert!((ActKind::Gelu.apply(1.0) - 0.841_191_990_607_477).abs() < 1e-12);
    }

    #[test]
    fn scaled_kernels_agree_with_unscaled_forms() {
        let x = sample(&[3, 5], 3);
        let ct = sample(&[3, 5], 4);
        let s = 0.25;
        let xd = x.map(|v| v / s);
        let sd = Tensor::scalar(s, DType::F32);
        for k in [ActKind::Relu, ActKind::Gelu, ActKind::Swish] {
            let f = Activation { kind: k }.eval(&[&x]).unwrap().remove(0);
            let fd = ScaledActivation { kind: k }.eval(&[&xd, &sd]).unwrap().remove(0);
            for (a, b) in f.data().iter().zip(fd.data()) {
                assert_eq!(*a, b * s);
            }
            let g = ActivationGrad { kind: k }.eval(&[&x, &ct]).unwrap().remove(0);
            let gd = ScaledActivationGrad { kind: k }.eval(&[&xd, &sd, &ct]).unwrap().remove(0);
            assert_eq!(g.data(), gd.data());
        }
        for log in [false, true] {
            let y = Softmax { log }.eval(&[&x]).unwrap().remove(0);
            let yd = ScaledSoftmax { log }.eval(&[&xd, &sd]).unwrap().remove(0);
            assert_eq!(y.data(), yd.data());
            // cotangent with scale 2^-3 against data y / 2
            let cs = 0.125;
            let cd = ct.map(|v| v / cs);
            let ys = 2.0;
            let yhalf = y.map(|v| v / ys);
            let g = SoftmaxGrad { log }.eval(&[&y, &ct]).unwrap().remove(0);
            let gd = ScaledSoftmaxGrad { log }
                .eval(&[&yhalf, &Tensor::scalar(ys, DType::F32), &cd])
                .unwrap()
                .remove(0);
            let out_scale = if log { cs } else { ys * cs };
            for (a, b) in g.data().iter().zip(gd.data()) {
                assert_eq!(*a, b * out_scale);
            }
        }
    }

    #[test]
    fn scaled_layer_norm_with_logical_eps_is_exact() {
        let x = sample(&[3, 8], 6);
        let ct = sample(&[3, 8], 7);
        for (xs, cs) in [(0.25, 8.0), (1024.0, 0.5), (1.0 / 65536.0, 1.0)] {
            let xd = x.map(|v| v / xs);
            let cd = ct.map(|v| v / cs);
            let s = Tensor::scalar(xs, DType::F32);
            let eps = 1e-3;
            let y = LayerNorm { eps }.eval(&[&x]).unwrap().remove(0);
            let placement = EpsPlacement::Logical;
            let yd = ScaledLayerNorm { eps, placement }.eval(&[&xd, &s]).unwrap().remove(0);
            assert_eq!(y.data(), yd.data());
            let g = LayerNormGrad { eps }.eval(&[&x, &ct]).unwrap().remove(0);
            let gd = ScaledLayerNormGrad { eps, placement }.eval(&[&xd, &s, &cd]).unwrap().remove(0);
            for (a, b) in g.data().iter().zip(gd.data()) {
                assert_eq!(*a, b * (cs / xs));
            }
        }
    }

    #[test]
    fn layer_norm_grad_on_constant_rows_is_finite() {
        let x = Tensor::full([2, 4], 3.0, DType::F64);
        let ct = sample(&[2, 4], 5);
        let g = LayerNormGrad { eps: 1e-5 }.eval(&[&x, &ct]).unwrap().remove(0);
        assert!(g.all_finite());
    }
}
