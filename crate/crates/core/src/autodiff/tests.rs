use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::composites::{self, ActKind, LayerNorm, Softmax};
use crate::graph::{trace, CompositeOp};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    t(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn grads(g: &Graph, wrt: &[usize], point: &[Tensor]) -> Vec<Tensor> {
    let gg = grad(g, &GradSpec::wrt(wrt.iter().copied())).unwrap();
    let mut out = eval(&gg, point).unwrap();
    out.split_off(g.outputs().len())
}

#[test]
fn square_at_three() {
    let g = trace(&f64_types(&[&[]]), |x| vec![&x[0] * &x[0]]).unwrap();
    let gg = grad(&g, &GradSpec::wrt([0])).unwrap();
    let out = eval(&gg, &[Tensor::scalar(3.0, DType::F64)]).unwrap();
    assert_eq!(out[0].item(), 9.0);
    assert_eq!(out[1].item(), 6.0);
}

#[test]
fn matmul_sum_against_ones() {
    let g = trace(&f64_types(&[&[2, 3], &[3, 5]]), |x| vec![x[0].matmul(&x[1]).sum_all()]).unwrap();
    let a = t(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
    let b = Tensor::full([3, 5], 1.0, DType::F64);
    let gs = grads(&g, &[0, 1], &[a, b]);
    assert!(gs[0].data().iter().all(|&v| v == 5.0));
    // column sums of A: 5, 7, 9
    assert_eq!(&gs[1].data()[..5], &[5.0; 5]);
    assert_eq!(&gs[1].data()[5..10], &[7.0; 5]);
}

#[test]
fn batched_and_shared_matmul_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shared = trace(&f64_types(&[&[2, 3, 4], &[4, 2]]), |x| {
        let y = x[0].matmul(&x[1]);
        vec![(&y * &y).sum_all()]
    })
    .unwrap();
    let p = [uniform(&[2, 3, 4], -1., 1., &mut rng), uniform(&[4, 2], -1., 1., &mut rng)];
    assert!(check_grad(&shared, &[0, 1], &p, 1e-5).unwrap() < 1e-7);
    let batched = trace(&f64_types(&[&[2, 3, 4], &[2, 4, 2]]), |x| {
        let y = x[0].matmul(&x[1]);
        vec![(&y * &y).sum_all()]
    })
    .unwrap();
    let p = [uniform(&[2, 3, 4], -1., 1., &mut rng), uniform(&[2, 4, 2], -1., 1., &mut rng)];
    assert!(check_grad(&batched, &[0, 1], &p, 1e-5).unwrap() < 1e-7);
}

#[test]
fn gelu_at_zero_is_half() {
    let g = trace(&f64_types(&[&[]]), |x| vec![x[0].gelu()]).unwrap();
    let gs = grads(&g, &[0], &[Tensor::scalar(0.0, DType::F64)]);
    assert_eq!(gs[0].item(), 0.5);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let g = trace(&f64_types(&[&[3]]), |x| vec![x[0].exp()]).unwrap();
    assert!(matches!(grad(&g, &GradSpec::wrt([0])), Err(Error::Grad(_))));
    let g = trace(&f64_types(&[&[3]]), |x| vec![x[0].sum_all()]).unwrap();
    assert!(grad(&g, &GradSpec::wrt([1])).is_err());
}

#[test]
fn linear_function_is_exact() {
    let g = trace(&f64_types(&[&[4], &[4]]), |x| {
        let y = &x[0] * 3.0 - &x[1] * 0.5 + 2.0;
        vec![y.sum_all()]
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = [uniform(&[4], -2., 2., &mut rng), uniform(&[4], -2., 2., &mut rng)];
    assert!(check_grad(&g, &[0, 1], &p, 1e-3).unwrap() <= 1e-9);
}

#[test]
fn gelu_mlp_matches_finite_differences() {
    let g = trace(&f64_types(&[&[4, 8], &[8, 16], &[16], &[16, 3]]), |x| {
        let h = (x[0].matmul(&x[1]) + &x[2]).gelu();
        let y = h.matmul(&x[3]).log_softmax();
        vec![(y.sum_all()).neg()]
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = [
        uniform(&[4, 8], -1., 1., &mut rng),
        uniform(&[8, 16], -0.5, 0.5, &mut rng),
        uniform(&[16], -0.5, 0.5, &mut rng),
        uniform(&[16, 3], -0.5, 0.5, &mut rng),
    ];
    let err = check_grad(&g, &[0, 1, 2, 3], &p, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
    let err = check_grad_sampled(&g, &[1, 3], &p, 1e-5, 5, 3).unwrap();
    assert!(err <= 1e-4, "{err}");
}

/// Gradient of `sum(op(x, extra...) * w)` for the closed-form op and for its
/// reference decomposition.
fn vjp_vs_decomposition(op: Arc<dyn CompositeOp>, args: Vec<Tensor>, w: Tensor) -> f64 {
    let mut types: Vec<ValueType> = args.iter().map(ValueType::of).collect();
    types.push(ValueType::of(&w));
    let k = args.len();
    let closed = trace(&types, |xs| {
        let rest: Vec<&Var> = xs[1..k].iter().collect();
        vec![(xs[0].composite(op.clone(), &rest) * &xs[k]).sum_all()]
    })
    .unwrap();
    let reference = trace(&types, |xs| {
        let y = op.decompose(&xs[..k]).unwrap().remove(0);
        vec![(y * &xs[k]).sum_all()]
    })
    .unwrap();
    let mut point = args;
    point.push(w);
    let wrt: Vec<usize> = (0..k).collect();
    let a = grads(&closed, &wrt, &point);
    let b = grads(&reference, &wrt, &point);
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            worst = worst.max((p - q).abs() / p.abs().max(q.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn composite_vjps_match_decompositions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ops: Vec<Arc<dyn CompositeOp>> = vec![
        composites::activation(ActKind::Relu),
        composites::activation(ActKind::Gelu),
        composites::activation(ActKind::Swish),
        Arc::new(LayerNorm { eps: 0.0 }),
        Arc::new(LayerNorm { eps: 1e-5 }),
        Arc::new(Softmax { log: false }),
        Arc::new(Softmax { log: true }),
    ];
    for op in ops {
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x = uniform(&[2, 6], -4., 4., &mut rng);
            let w = uniform(&[2, 6], -1., 1., &mut rng);
            worst = worst.max(vjp_vs_decomposition(op.clone(), vec![x], w));
        }
        assert!(worst <= 1e-5, "{}: {worst}", op.name());
    }
}

#[test]
fn layer_norm_matches_finite_differences() {
    let g = trace(&f64_types(&[&[3, 5], &[3, 5]]), |x| vec![(x[0].layer_norm(1e-5) * &x[1]).sum_all()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = [uniform(&[3, 5], -2., 2., &mut rng), uniform(&[3, 5], -1., 1., &mut rng)];
    assert!(check_grad(&g, &[0], &p, 1e-5).unwrap() <= 1e-5);
}

#[test]
fn scaling_primitives_pass_gradients_exactly() {
    let g = trace(&f64_types(&[&[3], &[]]), |x| {
        let s = x[1].cast(DType::F32);
        let y = x[0].set_scaling(&s);
        let (d, sc) = y.get_data_and_scale();
        let r = d.rebalance(&sc);
        vec![(&r * &r).sum_all()]
    })
    .unwrap();
    let x = t(&[3], vec![1.5, -2.0, 0.25]);
    let gs = grads(&g, &[0, 1], &[x.clone(), Tensor::scalar(4.0, DType::F64)]);
    let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(gs[0].data(), want.as_slice());
    assert_eq!(gs[1].item(), 0.0);
}

#[test]
fn select_and_maximum_subgradients() {
    let g = trace(&f64_types(&[&[4], &[4]]), |x| {
        let m = x[0].ge(&x[1]);
        let s = m.select(&x[0], &x[1]);
        vec![(s + x[0].maximum(&x[1])).sum_all()]
    })
    .unwrap();
    let a = t(&[4], vec![1., 2., 3., 4.]);
    let b = t(&[4], vec![0., 2., 5., 1.]);
    let gs = grads(&g, &[0, 1], &[a, b]);
    // tie at index 1 goes to the first operand in both ops
    assert_eq!(gs[0].data(), &[2., 2., 0., 2.]);
    assert_eq!(gs[1].data(), &[0., 0., 2., 0.]);
}

#[test]
fn reduce_max_broadcast_and_stop_gradient() {
    let g = trace(&f64_types(&[&[2, 3], &[3]]), |x| {
        let m = x[0].max(&[1]);
        let b = (&x[0] + &x[1]).sum_all();
        vec![m.sum_all() + b + x[1].stop_gradient().sum_all()]
    })
    .unwrap();
    let a = t(&[2, 3], vec![1., 5., 2., 7., 0., 3.]);
    let gs = grads(&g, &[0, 1], &[a, t(&[3], vec![1., 1., 1.])]);
    assert_eq!(gs[0].data(), &[1., 2., 1., 2., 1., 1.]);
    assert_eq!(gs[1].data(), &[2., 2., 2.]);
}

#[test]
fn unreachable_inputs_get_zero_gradients() {
    let g = trace(&f64_types(&[&[2], &[2]]), |x| vec![x[0].sum_all()]).unwrap();
    let gs = grads(&g, &[1], &[t(&[2], vec![1., 2.]), t(&[2], vec![3., 4.])]);
    assert_eq!(gs[0].data(), &[0., 0.]);
}

#[test]
fn cast_is_straight_through_and_policy_applies() {
    let types = [ValueType::new(vec![3], DType::F32)];
    let g = trace(&types, |x| {
        let y = x[0].cast(DType::F16).cast_on_backward(DType::E5M2);
        vec![(y.cast(DType::F32) * 3.3).sum_all()]
    })
    .unwrap();
    let spec = GradSpec::wrt([0]).with_dtype(0, DType::BF16);
    let gg = grad(&g, &spec).unwrap();
    let out = eval(&gg, &[Tensor::new(vec![3], DType::F32, vec![1., 2., 3.]).unwrap()]).unwrap();
    // e5m2 neighbours of 3.3 are 3.0 and 3.5
    assert_eq!(out[1].dtype(), DType::BF16);
    assert_eq!(out[1].data(), &[3.5; 3]);
}

#[test]
fn rescale_on_backward_is_identity_unscaled() {
    let g = trace(&f64_types(&[&[3]]), |x| vec![(x[0].rescale_on_backward("t") * 2.0).sum_all()]).unwrap();
    let gs = grads(&g, &[0], &[t(&[3], vec![1., 2., 3.])]);
    assert_eq!(gs[0].data(), &[2., 2., 2.]);
}
