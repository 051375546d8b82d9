use super::{Graph, Op};
use crate::error::{Error, Result};
use crate::numerics::{floor_log2, is_pow2, pow2, DType};
use crate::tensor::kernels as k;
use crate::tensor::Tensor;

/// Evaluate `g`. Each node computes in the wide carrier and rounds into its
/// declared output dtype.
pub fn eval(g: &Graph, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    eval_observed(g, inputs, &mut |_, _| Ok(()))
}

/// Like [`eval`], calling `observer(node_index, outputs)` after every node.
/// An observer error aborts evaluation.
pub fn eval_observed(
    g: &Graph,
    inputs: &[Tensor],
    observer: &mut dyn FnMut(usize, &[Tensor]) -> Result<()>,
) -> Result<Vec<Tensor>> {
    if inputs.len() != g.inputs.len() {
        return Err(Error::Eval(format!(
            "graph takes {} inputs, got {}",
            g.inputs.len(),
            inputs.len()
        )));
    }
    // Last node index reading each value; graph outputs live to the end.
    let mut last_use = vec![0usize; g.types.len()];
    for (i, n) in g.nodes.iter().enumerate() {
        for &a in &n.args {
            last_use[a] = i;
        }
    }
    for &o in &g.outputs {
        last_use[o] = usize::MAX;
    }
    let mut vals: Vec<Option<Tensor>> = vec![None; g.types.len()];
    for (slot, (&id, t)) in g.inputs.iter().zip(inputs).enumerate() {
        let ty = &g.types[id];
        if t.shape() != ty.shape.as_slice() {
            return Err(Error::Eval(format!(
                "input {slot}: expected shape {:?}, got {:?}",
                ty.shape,
                t.shape()
            )));
        }
        vals[id] = Some(if t.dtype() == ty.dtype {
            t.clone()
        } else {
            t.cast(ty.dtype, Default::default())
        });
    }
    for (i, n) in g.nodes.iter().enumerate() {
        let args: Vec<&Tensor> = n
            .args
            .iter()
            .map(|&a| vals[a].as_ref().expect("argument evaluated before use"))
            .collect();
        let mut outs = eval_op(g, &n.op, &args).map_err(|e| match e {
            Error::Eval(m) => Error::Eval(format!("node {i} ({}): {m}", n.op.name())),
            other => other,
        })?;
        let exact = preserves_values(&n.op) && args.iter().all(|a| a.dtype() == g.types[n.outputs[0]].dtype);
        for (t, &o) in outs.iter_mut().zip(&n.outputs) {
            let ty = &g.types[o];
            debug_assert_eq!(t.shape(), ty.shape.as_slice(), "node {i} {}", n.op.name());
            if exact {
                t.set_dtype_unchecked(ty.dtype);
            } else {
                t.cast_in_place(ty.dtype);
            }
        }
        observer(i, &outs)?;
        for &a in &n.args {
            if last_use[a] == i {
                vals[a] = None;
            }
        }
        for (t, &o) in outs.into_iter().zip(&n.outputs) {
            vals[o] = Some(t);
        }
    }
    g.outputs
        .iter()
        .map(|&o| {
            vals[o]
                .clone()
                .ok_or_else(|| Error::Eval(format!("output %{o} was never computed")))
        })
        .collect()
}

/// Ops whose results are copies of input values, so no rounding is needed when
/// the dtype does not change.
fn preserves_values(op: &Op) -> bool {
    matches!(
        op,
        Op::Neg
            | Op::Maximum
            | Op::ReduceMax { .. }
            | Op::Transpose { .. }
            | Op::Reshape { .. }
            | Op::Broadcast { .. }
            | Op::StopGradient
            | Op::SetScaling
            | Op::Rebalance
            | Op::AssertPow2
            | Op::Const(_)
    )
}

fn maximum(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else if a >= b {
        a
    } else {
        b
    }
}

fn eval_op(g: &Graph, op: &Op, a: &[&Tensor]) -> Result<Vec<Tensor>> {
    let one = |t: Result<Tensor>| t.map(|t| vec![t]).map_err(|e| Error::Eval(e.to_string()));
    match op {
        Op::Const(c) => Ok(vec![g.constants[*c].value.clone()]),
        Op::Add => one(k::binary(a[0], a[1], |x, y| x + y)),
        Op::Sub => one(k::binary(a[0], a[1], |x, y| x - y)),
        Op::Mul => one(k::binary(a[0], a[1], |x, y| x * y)),
        Op::Div => one(k::binary(a[0], a[1], |x, y| x / y)),
        Op::Maximum => one(k::binary(a[0], a[1], maximum)),
        Op::Ge => one(k::binary(a[0], a[1], |x, y| if x >= y { 1.0 } else { 0.0 })),
        Op::Neg => Ok(vec![a[0].map(|x| -x)]),
        Op::Exp => Ok(vec![a[0].map(f64::exp)]),
        Op::Log => Ok(vec![a[0].map(f64::ln)]),
        Op::Sqrt => Ok(vec![a[0].map(f64::sqrt)]),
        Op::IsFinite => Ok(vec![a[0].map(|x| if x.is_finite() { 1.0 } else { 0.0 })]),
        Op::Pow2RoundDown => Ok(vec![a[0].map(|x| {
            if x > 0.0 && x.is_finite() {
                pow2(floor_log2(x))
            } else {
                1.0
            }
        })]),
        Op::AssertPow2 => {
            if let Some(&bad) = a[0].data().iter().find(|v| !is_pow2(**v)) {
                return Err(Error::NotPow2 {
                    at: "assert_pow2".into(),
                    value: bad,
                });
            }
            Ok(vec![a[0].clone()])
        }
        Op::ReduceSum { axes } => one(k::reduce(a[0], axes, 0.0, |x, y| x + y)),
        Op::ReduceMax { axes } => one(k::reduce(a[0], axes, f64::NEG_INFINITY, maximum)),
        Op::MatMul => one(k::matmul(a[0], a[1])),
        Op::Transpose { perm } => one(k::transpose(a[0], perm)),
        Op::Reshape { shape } => one(a[0].reshape(shape.clone())),
        Op::Broadcast { shape } => one(k::broadcast_to(a[0], shape)),
        Op::Select => one(k::select(a[0], a[1], a[2])),
        Op::Cast { .. } | Op::StopGradient | Op::SetScaling | Op::Rebalance => {
            Ok(vec![a[0].clone()])
        }
        Op::GetDataAndScale => Ok(vec![a[0].clone(), Tensor::scalar(1.0, DType::F32)]),
        Op::Composite(c) => c.eval(a),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{GraphBuilder, ValueType};
    use super::*;

    #[test]
    fn identity_and_matmul() {
        let mut b = GraphBuilder::new();
        let x = b.input(ValueType::new([3], DType::F64));
        let g = b.finish(vec![x]).unwrap();
        let t = Tensor::from_vec([3], vec![1., 2., 3.]).unwrap();
        assert!(eval(&g, std::slice::from_ref(&t)).unwrap()[0].bit_eq(&t));

        let mut b = GraphBuilder::new();
        let x = b.input(ValueType::new([1, 1], DType::F64));
        let y = b.input(ValueType::new([1, 1], DType::F64));
        let z = b.node(Op::MatMul, &[x, y], None).unwrap();
        let g = b.finish(z).unwrap();
        let a = Tensor::from_vec([1, 1], vec![2.]).unwrap();
        let c = Tensor::from_vec([1, 1], vec![3.]).unwrap();
        assert_eq!(eval(&g, &[a.clone(), c]).unwrap()[0].data(), &[6.]);
        assert!(eval(&g, &[a]).is_err());
        let wrong = Tensor::from_vec([2], vec![1., 1.]).unwrap();
        assert!(eval(&g, &[wrong.clone(), wrong]).is_err());
    }

    #[test]
    fn outputs_round_into_declared_dtype() {
        let mut b = GraphBuilder::new();
        let x = b.input(ValueType::new([2], DType::F64));
        let y = b.node(Op::Add, &[x, x], Some(DType::E4M3)).unwrap();
        let g = b.finish(y).unwrap();
        let out = eval(&g, &[Tensor::from_vec([2], vec![0.05, 300.0]).unwrap()]).unwrap();
        assert_eq!(out[0].dtype(), DType::E4M3);
        assert_eq!(out[0].data(), &[0.1015625, 448.0]);
    }

    #[test]
    fn scaling_ops_are_noops_unscalified() {
        let mut b = GraphBuilder::new();
        let x = b.input(ValueType::new([3], DType::F32));
        let s = b.input(ValueType::scalar(DType::F32));
        let y = b.node(Op::SetScaling, &[x, s], None).unwrap()[0];
        let ds = b.node(Op::GetDataAndScale, &[y], None).unwrap();
        let r = b.node(Op::Rebalance, &[ds[0], s], None).unwrap()[0];
        let g = b.finish(vec![r, ds[1]]).unwrap();
        let t = Tensor::new([3], DType::F32, vec![1.5, -2.0, 7.25]).unwrap();
        let out = eval(&g, &[t.clone(), Tensor::scalar(4.0, DType::F32)]).unwrap();
        assert!(out[0].bit_eq(&t));
        assert_eq!(out[1].item(), 1.0);
    }
}
