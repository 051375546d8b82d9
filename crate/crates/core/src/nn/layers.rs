use serde::{Deserialize, Serialize};

use crate::graph::Var;
use crate::numerics::{floor_log2, pow2, DType};
use crate::tensor::Tensor;

/// Default epsilon of the normalization layers, added to the standard deviation.
pub const LN_EPS: f64 = 1e-5;

/// Number formats of a linear layer.
///
/// The forward casts apply to the matmul operands only; the backward cast
/// rounds the incoming cotangent before it reaches the weight and input
/// gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub forward_act_fmt: DType,
    pub forward_weight_fmt: DType,
    pub backward_grad_fmt: DType,
    pub output_fmt: DType,
}

impl LinearConfig {
    /// Every format set to `dt`.
    pub fn wide(dt: DType) -> Self {
        LinearConfig {
            forward_act_fmt: dt,
            forward_weight_fmt: dt,
            backward_grad_fmt: dt,
            output_fmt: dt,
        }
    }

    /// E4M3 operands on the forward pass, E5M2 cotangents on the backward.
    pub fn fp8(output_fmt: DType) -> Self {
        LinearConfig {
            forward_act_fmt: DType::E4M3,
            forward_weight_fmt: DType::E4M3,
            backward_grad_fmt: DType::E5M2,
            output_fmt,
        }
    }
}

/// `x` in `dt`, without emitting a node when it already is.
pub fn cast_to(x: &Var, dt: DType) -> Var {
    if x.dtype() == dt {
        x.clone()
    } else {
        x.cast(dt)
    }
}

/// `x @ w + b` with the formats of `cfg`. Accumulation happens in the wide
/// carrier; only the result is rounded into `output_fmt`.
pub fn linear(x: &Var, w: &Var, b: Option<&Var>, cfg: &LinearConfig) -> Var {
    let xa = cast_to(x, cfg.forward_act_fmt);
    let wa = cast_to(w, cfg.forward_weight_fmt);
    let mut y = xa.matmul_as(&wa, cfg.output_fmt);
    if cfg.backward_grad_fmt != cfg.output_fmt {
        y = y.cast_on_backward(cfg.backward_grad_fmt);
    }
    match b {
        Some(b) => y.add_as(&cast_to(b, cfg.output_fmt), cfg.output_fmt),
        None => y,
    }
}

/// Layer norm over the last axis followed by the affine map. With a `tag`,
/// the cotangent of `x` is dynamically rescaled on the backward pass.
pub fn layer_norm_rescaled(x: &Var, gamma: &Var, beta: &Var, eps: f64, tag: Option<&str>) -> Var {
    let x = match tag {
        Some(tag) => x.rescale_on_backward(tag),
        None => x.clone(),
    };
    let y = x.layer_norm(eps);
    let dt = y.dtype();
    &(&y * &cast_to(gamma, dt)) + &cast_to(beta, dt)
}

/// `log(sum(exp(x)))` over the last axis, stabilized by the row maximum.
///
/// Rows whose maximum is not finite shift by zero instead, so an all `-inf`
/// row yields `-inf` rather than NaN.
pub fn logsumexp(x: &Var) -> Var {
    let last = x.rank() - 1;
    let m = x.max(&[last]);
    let safe = m.is_finite().select(&m, &m.zeros_like()).stop_gradient();
    let shifted = x - &x.keep_axis(&safe, last);
    shifted.exp().sum(&[last]).log() + safe
}

/// Mean cross entropy between `logits` (rows) and one-hot `targets`, in F32 or wider.
pub fn cross_entropy(logits: &Var, targets: &Var) -> Var {
    // at least single precision
    let dt = if logits.dtype() == DType::F64 { DType::F64 } else { DType::F32 };
    let lp = cast_to(logits, dt).log_softmax();
    let rows = lp.shape()[..lp.rank() - 1].iter().product::<usize>().max(1);
    let picked = (&lp * &cast_to(targets, dt)).sum_all();
    picked * (-1.0 / rows as f64)
}

/// Additive causal mask: `0` on and below the diagonal, `-inf` above.
pub fn causal_mask(t: usize, dt: DType) -> Tensor {
    let data = (0..t * t)
        .map(|i| if i % t <= i / t { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    Tensor::new([t, t], dt, data).expect("square mask")
}

/// Weights of one attention layer, each `[dim, dim]`.
pub struct AttentionWeights<'a> {
    pub wq: &'a Var,
    pub wk: &'a Var,
    pub wv: &'a Var,
    pub wo: &'a Var,
}

/// Causal multi-head self-attention on `x: [batch * seq, dim]`.
pub fn attention(x: &Var, w: &AttentionWeights<'_>, batch: usize, seq: usize, heads: usize, cfg: &LinearConfig) -> Var {
    let dim = x.shape()[1];
    let dh = dim / heads;
    let dt = cfg.output_fmt;
    let split = |v: Var| v.reshape(&[batch, seq, heads, dh]).transpose(&[0, 2, 1, 3]);
    let q = split(linear(x, w.wq, None, cfg));
    let k = split(linear(x, w.wk, None, cfg));
    let v = split(linear(x, w.wv, None, cfg));
    let scores = q.matmul_as(&k.t(), dt) * (1.0 / (dh as f64).sqrt());
    let mask = x.tracer().constant(causal_mask(seq, dt));
    // probabilities average 1/seq: carry them as data * 2^k with scale 2^-k
    let k = floor_log2(seq as f64) / 2;
    let p = scores.add_as(&mask, dt).softmax().rebalance(&x.tracer().scalar(pow2(-k), DType::F32));
    let o = p.matmul_as(&v, dt).transpose(&[0, 2, 1, 3]).reshape(&[batch * seq, dim]);
    linear(&o, w.wo, None, cfg)
}

/// Two-layer perceptron with a GELU in between.
pub fn mlp(x: &Var, w1: &Var, b1: &Var, w2: &Var, b2: &Var, cfg: &LinearConfig) -> Var {
    let h = linear(x, w1, Some(b1), cfg).gelu();
    linear(&h, w2, Some(b2), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{eval, trace, ValueType};
    use crate::scalify::{scalify, InputKind};
    use crate::tensor::{quantize_tensor, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::from_vec([v.len()], v.to_vec()).unwrap()
    }

    fn run1(x: Tensor, f: impl FnOnce(&Var) -> Var) -> Tensor {
        let g = trace(&[ValueType::of(&x)], |v| vec![f(&v[0])]).unwrap();
        eval(&g, &[x]).unwrap().remove(0)
    }

    #[test]
    fn wide_linear_is_matmul_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([5, 8], 0.0, 1.0, DType::F32, &mut rng);
        let w = Tensor::randn([8, 3], 0.0, 1.0, DType::F32, &mut rng);
        let b = Tensor::randn([3], 0.0, 1.0, DType::F32, &mut rng);
        let types = [ValueType::of(&x), ValueType::of(&w), ValueType::of(&b)];
        let lin = trace(&types, |v| vec![linear(&v[0], &v[1], Some(&v[2]), &LinearConfig::wide(DType::F32))]).unwrap();
        let raw = trace(&types, |v| vec![&v[0].matmul(&v[1]) + &v[2]]).unwrap();
        let args = [x, w, b];
        assert!(eval(&lin, &args).unwrap()[0].bit_eq(&eval(&raw, &args).unwrap()[0]));
    }

    #[test]
    fn fp8_linear_on_representable_inputs_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = quantize_tensor(&Tensor::randn([4, 16], 0.0, 1.0, DType::F32, &mut rng), DType::E4M3, Default::default())
            .cast(DType::F32, Default::default());
        let w = quantize_tensor(&Tensor::randn([16, 4], 0.0, 1.0, DType::F32, &mut rng), DType::E4M3, Default::default())
            .cast(DType::F32, Default::default());
        let types = [ValueType::of(&x), ValueType::of(&w)];
        let fp8 = trace(&types, |v| vec![linear(&v[0], &v[1], None, &LinearConfig::fp8(DType::F32))]).unwrap();
        let wide = trace(&types, |v| vec![linear(&v[0], &v[1], None, &LinearConfig::wide(DType::F32))]).unwrap();
        let args = [x, w];
        assert!(eval(&fp8, &args).unwrap()[0].bit_eq(&eval(&wide, &args).unwrap()[0]));
    }

    #[test]
    fn fp8_linear_error_on_gaussian_inputs_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([32, 64], 0.0, 1.0, DType::F32, &mut rng);
        let w = Tensor::randn([64, 64], 0.0, 1.0, DType::F32, &mut rng);
        let types = [ValueType::of(&x), ValueType::of(&w)];
        let fp8 = trace(&types, |v| vec![linear(&v[0], &v[1], None, &LinearConfig::fp8(DType::F32))]).unwrap();
        let wide = trace(&types, |v| vec![v[0].matmul(&v[1])]).unwrap();
        let args = [x, w];
        let a = eval(&fp8, &args).unwrap().remove(0);
        let b = eval(&wide, &args).unwrap().remove(0);
        let err: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = b.data().iter().map(|q| q * q).sum::<f64>().sqrt();
        // two E4M3 operands: about 2 * 2^-4 / sqrt(3) relative noise per product
        assert!(err / norm <= 0.10, "relative error {}", err / norm);
        assert!(err / norm > 0.0);
    }

    #[test]
    fn fp8_linear_backward_casts_cotangent_only() {
        let x = Tensor::new([1, 2], DType::F32, vec![1.0, 2.0]).unwrap();
        let w = Tensor::new([2, 1], DType::F32, vec![1.0, 1.0]).unwrap();
        let g = trace(&[ValueType::of(&x), ValueType::of(&w)], |v| {
            let y = linear(&v[0], &v[1], None, &LinearConfig::fp8(DType::F32));
            vec![(y * 1.1).sum_all()]
        })
        .unwrap();
        let gg = crate::autodiff::grad(&g, &crate::autodiff::GradSpec::wrt([1])).unwrap();
        let out = eval(&gg, &[x, w]).unwrap();
        assert_eq!(out[0].item(), (3.0 * 1.1f32 as f64) as f32 as f64);
        // cotangent 1.1 rounds to 1.0 in E5M2, so dw = x
        assert_eq!(out[1].data(), &[1.0, 2.0]);
    }

    #[test]
    fn activation_examples() {
        let x = vec_t(&[-2.0, 3.0, 0.0, 1.0]);
        assert_eq!(run1(x.clone(), |v| v.relu()).data()[..2], [0.0, 3.0]);
        assert_eq!(run1(x.clone(), |v| v.gelu()).data()[2], 0.0);
        let sw = run1(x, |v| v.swish()).data()[3];
        assert!((sw - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        assert!((sw - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn softmax_and_logsumexp_examples() {
        assert_eq!(run1(vec_t(&[0.0, 0.0]), |v| v.softmax()).data(), &[0.5, 0.5]);
        let l = run1(vec_t(&[0.0, 0.0, 0.0]), logsumexp).item();
        assert!((l - 3f64.ln()).abs() < 1e-15);
        let l = run1(vec_t(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), logsumexp).item();
        assert_eq!(l, f64::NEG_INFINITY);
        let big = run1(vec_t(&[1000.0, 1000.0]), logsumexp).item();
        assert!((big - 1000.0 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let row = |vals: Vec<f64>| Tensor::from_vec([1, vals.len()], vals).unwrap();
        let gamma = Tensor::full([4], 1.0, DType::F64);
        let beta = Tensor::zeros([4], DType::F64);
        let ln = trace(
            &[ValueType::new([1, 4], DType::F64), ValueType::of(&gamma), ValueType::of(&beta)],
            |v| vec![layer_norm_rescaled(&v[0], &v[1], &v[2], LN_EPS, Some("t"))],
        )
        .unwrap();
        let out = eval(&ln, &[row(vec![7.0; 4]), gamma.clone(), beta.clone()]).unwrap();
        assert!(out[0].data().iter().all(|v| v.abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4096;
        let x = Tensor::randn([n], 0.0, 1.0, DType::F64, &mut rng).map(|v| 5.0 + 3.0 * v);
        let gamma = Tensor::full([n], 1.0, DType::F64);
        let beta = Tensor::zeros([n], DType::F64);
        let ln = trace(
            &[ValueType::new([1, n], DType::F64), ValueType::of(&gamma), ValueType::of(&beta)],
            |v| vec![layer_norm_rescaled(&v[0], &v[1], &v[2], LN_EPS, None)],
        )
        .unwrap();
        let y = eval(&ln, &[x.reshape([1, n]).unwrap(), gamma, beta]).unwrap().remove(0);
        let mean = y.mean();
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-5, "{mean} {var}");
    }

    #[test]
    fn scaled_layer_norm_output_has_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xd = Tensor::randn([4, 64], 0.0, 1.0, DType::F32, &mut rng);
        let gamma = Tensor::full([64], 1.0, DType::F32);
        let beta = Tensor::zeros([64], DType::F32);
        let g = trace(&[ValueType::of(&xd), ValueType::of(&gamma), ValueType::of(&beta)], |v| {
            vec![v[0].layer_norm(LN_EPS)]
        })
        .unwrap();
        let sg = scalify(&g, &[InputKind::Scaled, InputKind::Plain, InputKind::Plain]).unwrap();
        let x = crate::tensor::ScaledArray::new(xd.clone(), crate::numerics::E8M0Scale::Pow2(-10));
        let out = sg.eval(&[Array::Scaled(x), gamma.into(), beta.into()]).unwrap();
        let s = out[0].as_scaled().unwrap();
        assert_eq!(s.scale, crate::numerics::E8M0Scale::ONE);
        // eps acts on the unit-scale data, whatever the logical std
        let rms = s.data.rms();
        let expect = 1.0 / (1.0 + LN_EPS);
        assert!((rms - expect).abs() < 2e-3, "{rms}");
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let logits = Tensor::zeros([3, 8], DType::F32);
        let mut t = vec![0.0; 24];
        for r in 0..3 {
            t[r * 8 + r] = 1.0;
        }
        let targets = Tensor::new([3, 8], DType::F32, t).unwrap();
        let g = trace(&[ValueType::of(&logits), ValueType::of(&targets)], |v| vec![cross_entropy(&v[0], &v[1])]).unwrap();
        let l = eval(&g, &[logits, targets]).unwrap()[0].item();
        assert!((l - 8f64.ln()).abs() < 1e-6, "{l}");
    }

    #[test]
    fn attention_is_causal() {
        // perturbing the last position must not change earlier outputs
        let (b, t, d, h) = (1, 4, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn([b * t, d], 0.0, 1.0, DType::F64, &mut rng);
        let ws: Vec<Tensor> = (0..4).map(|_| Tensor::randn([d, d], 0.0, 1.0, DType::F64, &mut rng)).collect();
        let mut types = vec![ValueType::of(&x)];
        types.extend(ws.iter().map(ValueType::of));
        let g = trace(&types, |v| {
            let w = AttentionWeights {
                wq: &v[1],
                wk: &v[2],
                wv: &v[3],
                wo: &v[4],
            };
            vec![attention(&v[0], &w, b, t, h, &LinearConfig::wide(DType::F64))]
        })
        .unwrap();
        let mut args = vec![x.clone()];
        args.extend(ws.iter().cloned());
        let a = eval(&g, &args).unwrap().remove(0);
        let mut data = x.data().to_vec();
        for v in &mut data[(t - 1) * d..] {
            *v += 1.0;
        }
        args[0] = Tensor::from_vec([b * t, d], data).unwrap();
        let c = eval(&g, &args).unwrap().remove(0);
        assert_eq!(a.data()[..(t - 1) * d], c.data()[..(t - 1) * d]);
        assert_ne!(a.data()[(t - 1) * d..], c.data()[(t - 1) * d..]);
    }
}
