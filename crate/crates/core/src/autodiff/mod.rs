//! Reverse-mode differentiation: graph in, graph out.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{eval, Graph, Op, Tracer, ValueType, Var};
use crate::numerics::DType;
use crate::tensor::Tensor;

/// Which inputs to differentiate, and optionally the dtype each resulting
/// gradient is cast to.
#[derive(Debug, Clone, Default)]
pub struct GradSpec {
    pub wrt: Vec<usize>,
    /// Parallel to `wrt`; `None` keeps the dtype the backward pass produced.
    pub cotangent_dtypes: Vec<Option<DType>>,
}

impl GradSpec {
    pub fn wrt(slots: impl IntoIterator<Item = usize>) -> Self {
        let wrt: Vec<usize> = slots.into_iter().collect();
        GradSpec {
            cotangent_dtypes: vec![None; wrt.len()],
            wrt,
        }
    }

    pub fn with_dtype(mut self, slot: usize, dtype: DType) -> Self {
        if let Some(i) = self.wrt.iter().position(|&w| w == slot) {
            self.cotangent_dtypes[i] = Some(dtype);
        }
        self
    }
}

/// Sum `v` down to `shape`, undoing numpy-style broadcasting.
fn unbroadcast(v: Var, shape: &[usize], dtype: DType) -> Var {
    let vs = v.shape();
    if vs == shape {
        return v;
    }
    let lead = vs.len() - shape.len();
    let axes: Vec<usize> = (0..vs.len())
        .filter(|&i| i < lead || (shape[i - lead] == 1 && vs[i] != 1))
        .collect();
    let s = if axes.is_empty() { v } else { v.sum_as(&axes, dtype) };
    s.reshape(shape)
}

fn accumulate(slot: &mut Option<Var>, g: Var) {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => {
            let dt = prev.dtype();
            prev.add_as(&g, dt)
        }
    });
}

/// Cotangents of one primitive's arguments.
fn primitive_vjp(op: &Op, args: &[Var], outs: &[Var], cts: &[Option<Var>]) -> Result<Vec<Option<Var>>> {
    let none = || vec![None; args.len()];
    // only the first output of a primitive carries a cotangent; for
    // get_data_and_scale the scale output's cotangent is dropped
    let c = match &cts[0] {
        Some(c) => c.clone(),
        None => return Ok(none()),
    };
    let y = &outs[0];
    let ty = |i: usize| (args[i].shape(), args[i].dtype());
    let unb = |v: Var, i: usize| {
        let (s, d) = ty(i);
        unbroadcast(v, &s, d)
    };
    Ok(match op {
        Op::Const(_) => vec![],
        Op::Add => vec![Some(unb(c.clone(), 0)), Some(unb(c, 1))],
        Op::Sub => vec![Some(unb(c.clone(), 0)), Some(unb(c.neg_as(args[1].dtype()), 1))],
        Op::Mul => vec![
            Some(unb(c.mul_as(&args[1], args[0].dtype()), 0)),
            Some(unb(c.mul_as(&args[0], args[1].dtype()), 1)),
        ],
        Op::Div => vec![
            Some(unb(c.div_as(&args[1], args[0].dtype()), 0)),
            Some(unb(c.mul(y).div(&args[1]).neg_as(args[1].dtype()), 1)),
        ],
        Op::Neg => vec![Some(c.neg_as(args[0].dtype()))],
        Op::Exp => vec![Some(c.mul_as(y, args[0].dtype()))],
        Op::Log => vec![Some(c.div_as(&args[0], args[0].dtype()))],
        Op::Sqrt => {
            let q = c.div(y);
            let half = q.full_like(0.5);
            vec![Some(q.mul_as(&half, args[0].dtype()))]
        }
        Op::Maximum => {
            // ties go to the first operand
            let mask = args[0].ge(&args[1]);
            let z = c.zeros_like();
            vec![
                Some(unb(mask.select_as(&c, &z, args[0].dtype()), 0)),
                Some(unb(mask.select_as(&z, &c, args[1].dtype()), 1)),
            ]
        }
        Op::ReduceSum { axes } => {
            let x = &args[0];
            let mut kept = x.shape();
            for &a in axes {
                kept[a] = 1;
            }
            vec![Some(c.reshape(&kept).broadcast_to(&x.shape()))]
        }
        Op::ReduceMax { axes } => {
            let x = &args[0];
            let mut kept = x.shape();
            for &a in axes {
                kept[a] = 1;
            }
            let yb = y.reshape(&kept).broadcast_to(&x.shape());
            let cb = c.reshape(&kept).broadcast_to(&x.shape());
            let mask = x.ge(&yb);
            vec![Some(mask.select_as(&cb, &cb.zeros_like(), x.dtype()))]
        }
        Op::MatMul => {
            let (a, b) = (&args[0], &args[1]);
            let dt = y.dtype();
            let ga = c.matmul_as(&b.t(), dt);
            let gb = if b.rank() == 2 && a.rank() > 2 {
                let sa = a.shape();
                let m: usize = sa[..sa.len() - 1].iter().product();
                let (k, n) = (b.shape()[0], b.shape()[1]);
                let a2 = a.reshape(&[m, k]);
                let c2 = c.reshape(&[m, n]);
                a2.t().matmul_as(&c2, dt)
            } else {
                a.t().matmul_as(&c, dt)
            };
            vec![Some(ga), Some(gb)]
        }
        Op::Transpose { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(c.transpose(&inv))]
        }
        Op::Reshape { .. } => vec![Some(c.reshape(&args[0].shape()))],
        Op::Broadcast { .. } => vec![Some(unb(c, 0))],
        Op::Select => {
            let m = &args[0];
            let z = c.zeros_like();
            vec![
                None,
                Some(unb(m.select_as(&c, &z, args[1].dtype()), 1)),
                Some(unb(m.select_as(&z, &c, args[2].dtype()), 2)),
            ]
        }
        // straight-through: the cotangent keeps its own dtype
        Op::Cast { .. } => vec![Some(c)],
        Op::StopGradient | Op::Ge | Op::IsFinite | Op::Pow2RoundDown => none(),
        Op::AssertPow2 => vec![Some(c)],
        Op::SetScaling | Op::Rebalance => vec![Some(c), None],
        Op::GetDataAndScale => vec![Some(c)],
        Op::Composite(comp) => {
            let r = comp.vjp(args, outs, cts)?;
            if r.len() != args.len() {
                return Err(Error::Grad(format!(
                    "vjp of `{}` returned {} cotangents for {} arguments",
                    comp.name(),
                    r.len(),
                    args.len()
                )));
            }
            r
        }
    })
}

/// Build a graph returning `g`'s outputs followed by the gradient of output 0
/// with respect to each input in `spec.wrt`.
pub fn grad(g: &Graph, spec: &GradSpec) -> Result<Graph> {
    let n_in = g.inputs().len();
    if let Some(&bad) = spec.wrt.iter().find(|&&w| w >= n_in) {
        return Err(Error::Grad(format!("input slot {bad} does not exist ({n_in} inputs)")));
    }
    if !spec.cotangent_dtypes.is_empty() && spec.cotangent_dtypes.len() != spec.wrt.len() {
        return Err(Error::Grad("cotangent dtypes must parallel `wrt`".into()));
    }
    let Some(&loss) = g.outputs().first() else {
        return Err(Error::Grad("graph has no outputs".into()));
    };
    let lt = g.value_type(loss);
    if lt.rank() != 0 {
        return Err(Error::Grad(format!("loss must be a scalar, got {lt}")));
    }
    for &w in &spec.wrt {
        let t = g.value_type(g.inputs()[w]);
        if !t.dtype.is_float() {
            return Err(Error::Grad(format!("input slot {w} has non-float type {t}")));
        }
    }

    let t = Tracer::new();
    let xs: Vec<Var> = g.input_types().into_iter().map(|ty| t.input(ty)).collect();
    let xrefs: Vec<&Var> = xs.iter().collect();
    let vars = match t.inline_all(g, &xrefs) {
        Ok(v) => v,
        Err(_) => return Err(Error::Grad("failed to replay the forward graph".into())),
    };

    // values that depend on a differentiated input
    let mut active = vec![false; g.num_values()];
    for &w in &spec.wrt {
        active[g.inputs()[w]] = true;
    }
    for n in g.nodes() {
        if n.args.iter().any(|&a| active[a]) {
            for &o in &n.outputs {
                active[o] = true;
            }
        }
    }

    let mut cts: Vec<Option<Var>> = vec![None; g.num_values()];
    cts[loss] = Some(vars[loss].full_like(1.0));
    for n in g.nodes().iter().rev() {
        if !n.args.iter().any(|&a| active[a]) {
            continue;
        }
        let out_cts: Vec<Option<Var>> = n.outputs.iter().map(|&o| cts[o].clone()).collect();
        if out_cts.iter().all(Option::is_none) {
            continue;
        }
        let args: Vec<Var> = n.args.iter().map(|&a| vars[a].clone()).collect();
        let outs: Vec<Var> = n.outputs.iter().map(|&o| vars[o].clone()).collect();
        let arg_cts = primitive_vjp(&n.op, &args, &outs, &out_cts)?;
        for (&a, ct) in n.args.iter().zip(arg_cts) {
            if let Some(ct) = ct {
                if active[a] {
                    accumulate(&mut cts[a], ct);
                }
            }
        }
    }

    let mut outputs: Vec<Var> = g.outputs().iter().map(|&o| vars[o].clone()).collect();
    for (i, &w) in spec.wrt.iter().enumerate() {
        let x = &xs[w];
        let mut gw = match cts[g.inputs()[w]].take() {
            Some(v) => v,
            None => t.constant(Tensor::zeros(x.shape(), x.dtype())),
        };
        if let Some(Some(dt)) = spec.cotangent_dtypes.get(i) {
            if gw.dtype() != *dt {
                gw = gw.cast(*dt);
            }
        }
        outputs.push(gw);
    }
    t.finish(&outputs)
}

fn loss_at(g: &Graph, point: &[Tensor]) -> Result<f64> {
    Ok(eval(g, point)?[0].item())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn central_difference(g: &Graph, point: &[Tensor], slot: usize, idx: usize, eps: f64) -> Result<f64> {
    let mut p = point.to_vec();
    let base = &point[slot];
    let mut plus = base.data().to_vec();
    plus[idx] += eps;
    p[slot] = Tensor::new(base.shape().to_vec(), base.dtype(), plus)?;
    let fp = loss_at(g, &p)?;
    let mut minus = base.data().to_vec();
    minus[idx] -= eps;
    p[slot] = Tensor::new(base.shape().to_vec(), base.dtype(), minus)?;
    let fm = loss_at(g, &p)?;
    Ok((fp - fm) / (2.0 * eps))
}

fn analytic(g: &Graph, wrt: &[usize], point: &[Tensor]) -> Result<Vec<Tensor>> {
    let gg = grad(g, &GradSpec::wrt(wrt.iter().copied()))?;
    let mut out = eval(&gg, point)?;
    Ok(out.split_off(g.outputs().len()))
}

/// Largest relative deviation between the autodiff gradient and central
/// differences over every coordinate of the `wrt` inputs.
pub fn check_grad(g: &Graph, wrt: &[usize], point: &[Tensor], eps: f64) -> Result<f64> {
    let grads = analytic(g, wrt, point)?;
    let mut worst = 0.0f64;
    for (gi, &slot) in grads.iter().zip(wrt) {
        for idx in 0..point[slot].len() {
            let n = central_difference(g, point, slot, idx, eps)?;
            worst = worst.max(rel_err(gi.data()[idx], n));
        }
    }
    Ok(worst)
}

/// Cheaper variant for large graphs: a random directional derivative plus
/// `coords` sampled coordinates per input.
pub fn check_grad_sampled(
    g: &Graph,
    wrt: &[usize],
    point: &[Tensor],
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<f64> {
    let grads = analytic(g, wrt, point)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (gi, &slot) in grads.iter().zip(wrt) {
        let n = point[slot].len();
        for idx in sample(&mut rng, n, coords.min(n)) {
            let fd = central_difference(g, point, slot, idx, eps)?;
            worst = worst.max(rel_err(gi.data()[idx], fd));
        }
    }
    // directional derivative along a random unit-ish direction
    let mut plus = point.to_vec();
    let mut minus = point.to_vec();
    let mut dot = 0.0;
    for (gi, &slot) in grads.iter().zip(wrt) {
        let base = &point[slot];
        let dir: Vec<f64> = (0..base.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        dot += dir.iter().zip(gi.data()).map(|(d, g)| d * g).sum::<f64>();
        let shift = |sign: f64| -> Vec<f64> { base.data().iter().zip(&dir).map(|(x, d)| x + sign * eps * d).collect() };
        plus[slot] = Tensor::new(base.shape().to_vec(), base.dtype(), shift(1.0))?;
        minus[slot] = Tensor::new(base.shape().to_vec(), base.dtype(), shift(-1.0))?;
    }
    let fd = (loss_at(g, &plus)? - loss_at(g, &minus)?) / (2.0 * eps);
    Ok(worst.max(rel_err(dot, fd)))
}

/// Input types helper for tests and callers building F64 graphs.
pub fn f64_types(shapes: &[&[usize]]) -> Vec<ValueType> {
    shapes.iter().map(|s| ValueType::new(s.to_vec(), DType::F64)).collect()
}

#[cfg(test)]
mod tests;
