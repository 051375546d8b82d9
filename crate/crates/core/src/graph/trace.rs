use std::cell::RefCell;
use std::fmt;
use std::ops;
use std::rc::Rc;
use std::sync::Arc;

use super::composites::{self, ActKind};
use super::{CompositeOp, ConstMeta, Graph, GraphBuilder, Op, ValueId, ValueType};
use crate::error::{Error, Result};
use crate::numerics::DType;
use crate::tensor::Tensor;

struct Ctx {
    b: GraphBuilder,
    err: Option<Error>,
}

/// Records operations applied to [`Var`]s into a graph. The first error is
/// kept and reported by [`Tracer::finish`]; later operations become no-ops.
#[derive(Clone)]
pub struct Tracer {
    ctx: Rc<RefCell<Ctx>>,
}

/// A traced value.
#[derive(Clone)]
pub struct Var {
    id: ValueId,
    ctx: Rc<RefCell<Ctx>>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}: {}", self.id, self.ty())
    }
}

/// Trace `f` over inputs of the given types.
pub fn trace(inputs: &[ValueType], f: impl FnOnce(&[Var]) -> Vec<Var>) -> Result<Graph> {
    let t = Tracer::new();
    let xs: Vec<Var> = inputs.iter().map(|ty| t.input(ty.clone())).collect();
    let outs = f(&xs);
    t.finish(&outs)
}

impl Default for Tracer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tracer {
    pub fn new() -> Self {
        Tracer {
            ctx: Rc::new(RefCell::new(Ctx {
                b: GraphBuilder::new(),
                err: None,
            })),
        }
    }

    fn var(&self, id: ValueId) -> Var {
        Var {
            id,
            ctx: self.ctx.clone(),
        }
    }

    pub fn input(&self, ty: ValueType) -> Var {
        let id = self.ctx.borrow_mut().b.input(ty);
        self.var(id)
    }

    /// Constant with metadata inferred from its values.
    pub fn constant(&self, t: Tensor) -> Var {
        let meta = ConstMeta::infer(&t);
        self.constant_with(t, meta)
    }

    pub fn constant_with(&self, t: Tensor, meta: ConstMeta) -> Var {
        let id = self.ctx.borrow_mut().b.constant(t, meta);
        self.var(id)
    }

    /// Rank-0 constant flagged as a broadcast scalar.
    pub fn scalar(&self, v: f64, dtype: DType) -> Var {
        let t = Tensor::scalar(v, dtype);
        let meta = ConstMeta {
            is_broadcast_scalar: true,
            scalar_value: t.item(),
        };
        self.constant_with(t, meta)
    }

    /// Record an error raised outside the tracer (e.g. by layer code).
    pub fn fail(&self, e: Error) {
        let mut c = self.ctx.borrow_mut();
        if c.err.is_none() {
            c.err = Some(e);
        }
    }

    pub fn is_poisoned(&self) -> bool {
        self.ctx.borrow().err.is_some()
    }

    pub fn finish(self, outputs: &[Var]) -> Result<Graph> {
        let ctx = Rc::try_unwrap(self.ctx)
            .map(RefCell::into_inner)
            .unwrap_or_else(|rc| {
                let mut c = rc.borrow_mut();
                Ctx {
                    b: std::mem::take(&mut c.b),
                    err: c.err.take(),
                }
            });
        if let Some(e) = ctx.err {
            return Err(e);
        }
        ctx.b.finish(outputs.iter().map(|v| v.id).collect())
    }

    fn emit(&self, op: Op, args: &[&Var], dtype: Option<DType>) -> Vec<Var> {
        let mut c = self.ctx.borrow_mut();
        if c.err.is_none() {
            let ids: Vec<ValueId> = args.iter().map(|a| a.id).collect();
            match c.b.node(op.clone(), &ids, dtype) {
                Ok(outs) => {
                    drop(c);
                    return outs.into_iter().map(|i| self.var(i)).collect();
                }
                Err(e) => c.err = Some(e),
            }
        }
        drop(c);
        // Poisoned: hand back stand-ins with plausible types so layer code can
        // keep going until the trace is finished.
        let n = match &op {
            Op::GetDataAndScale => 2,
            Op::Composite(_) => 1,
            _ => 1,
        };
        let stand_in = match args.first() {
            Some(a) => (*a).clone(),
            None => self.scalar(0.0, DType::F64),
        };
        vec![stand_in; n]
    }

    /// Apply an operation by name. Unknown names poison the trace with an
    /// error naming the operation.
    pub fn apply(&self, name: &str, args: &[&Var]) -> Vec<Var> {
        let prim = match name {
            "add" => Some(Op::Add),
            "sub" => Some(Op::Sub),
            "mul" => Some(Op::Mul),
            "div" => Some(Op::Div),
            "neg" => Some(Op::Neg),
            "exp" => Some(Op::Exp),
            "log" => Some(Op::Log),
            "sqrt" => Some(Op::Sqrt),
            "maximum" => Some(Op::Maximum),
            "matmul" => Some(Op::MatMul),
            "select" => Some(Op::Select),
            "stop_gradient" => Some(Op::StopGradient),
            "set_scaling" => Some(Op::SetScaling),
            "get_data_and_scale" => Some(Op::GetDataAndScale),
            "rebalance" => Some(Op::Rebalance),
            "ge" => Some(Op::Ge),
            "is_finite" => Some(Op::IsFinite),
            _ => None,
        };
        if let Some(op) = prim {
            return self.emit(op, args, None);
        }
        match composites::builtin(name) {
            Some(c) => self.emit(Op::Composite(c), args, None),
            None => {
                self.fail(Error::Trace(format!("unsupported operation `{name}`")));
                vec![args.first().map(|a| (*a).clone()).unwrap_or_else(|| self.scalar(0.0, DType::F64))]
            }
        }
    }

    pub fn composite(&self, op: Arc<dyn CompositeOp>, args: &[&Var], dtype: Option<DType>) -> Vec<Var> {
        self.emit(Op::Composite(op), args, dtype)
    }

    /// Copy `g` into this trace, binding its inputs to `args`.
    pub fn inline(&self, g: &Graph, args: &[&Var]) -> Vec<Var> {
        match self.inline_all(g, args) {
            Ok(map) => g.outputs.iter().map(|&o| map[o].clone()).collect(),
            Err(stand_in) => vec![stand_in; g.outputs.len()],
        }
    }

    /// Like [`Tracer::inline`], returning the new var for every value of `g`.
    /// On failure the trace is poisoned and a stand-in var is returned.
    pub(crate) fn inline_all(&self, g: &Graph, args: &[&Var]) -> std::result::Result<Vec<Var>, Var> {
        if args.len() != g.inputs.len() {
            self.fail(Error::Trace(format!(
                "inline: graph takes {} inputs, got {}",
                g.inputs.len(),
                args.len()
            )));
        }
        for (i, (a, &gi)) in args.iter().zip(&g.inputs).enumerate() {
            if a.ty() != g.types[gi] {
                self.fail(Error::Trace(format!(
                    "inline: input {i} expects {}, got {}",
                    g.types[gi],
                    a.ty()
                )));
            }
        }
        if self.is_poisoned() {
            return Err(args.first().map(|a| (*a).clone()).unwrap_or_else(|| self.scalar(0.0, DType::F64)));
        }
        let mut map: Vec<ValueId> = vec![usize::MAX; g.types.len()];
        for (a, &gi) in args.iter().zip(&g.inputs) {
            map[gi] = a.id;
        }
        let mut c = self.ctx.borrow_mut();
        for n in &g.nodes {
            let new_ids = match &n.op {
                Op::Const(k) => {
                    let k = &g.constants[*k];
                    vec![c.b.constant(k.value.clone(), k.meta)]
                }
                op => {
                    let args = n.args.iter().map(|&a| map[a]).collect();
                    let tys = n.outputs.iter().map(|&o| g.types[o].clone()).collect();
                    c.b.push_typed(op.clone(), args, tys)
                }
            };
            for (&old, new) in n.outputs.iter().zip(new_ids) {
                map[old] = new;
            }
        }
        drop(c);
        Ok(map.into_iter().map(|id| self.var(id)).collect())
    }
}

macro_rules! binary_methods {
    ($($name:ident, $name_as:ident => $op:expr;)*) => {
        $(
            pub fn $name(&self, other: &Var) -> Var {
                self.emit1($op, &[other], None)
            }
            pub fn $name_as(&self, other: &Var, dtype: DType) -> Var {
                self.emit1($op, &[other], Some(dtype))
            }
        )*
    };
}

macro_rules! unary_methods {
    ($($name:ident, $name_as:ident => $op:expr;)*) => {
        $(
            pub fn $name(&self) -> Var {
                self.emit1($op, &[], None)
            }
            pub fn $name_as(&self, dtype: DType) -> Var {
                self.emit1($op, &[], Some(dtype))
            }
        )*
    };
}

impl Var {
    pub fn id(&self) -> ValueId {
        self.id
    }

    pub fn tracer(&self) -> Tracer {
        Tracer {
            ctx: self.ctx.clone(),
        }
    }

    pub fn ty(&self) -> ValueType {
        self.ctx.borrow().b.ty(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.ctx.borrow().b.ty(self.id).shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.ctx.borrow().b.ty(self.id).shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.ctx.borrow().b.ty(self.id).dtype
    }

    pub fn same_trace(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.ctx, &other.ctx)
    }

    fn emit1(&self, op: Op, rest: &[&Var], dtype: Option<DType>) -> Var {
        let mut args: Vec<&Var> = vec![self];
        args.extend_from_slice(rest);
        self.tracer().emit(op, &args, dtype).swap_remove(0)
    }

    pub fn op(&self, op: Op, rest: &[&Var], dtype: Option<DType>) -> Vec<Var> {
        let mut args: Vec<&Var> = vec![self];
        args.extend_from_slice(rest);
        self.tracer().emit(op, &args, dtype)
    }

    binary_methods! {
        add, add_as => Op::Add;
        sub, sub_as => Op::Sub;
        mul, mul_as => Op::Mul;
        div, div_as => Op::Div;
        maximum, maximum_as => Op::Maximum;
        matmul, matmul_as => Op::MatMul;
    }

    unary_methods! {
        neg, neg_as => Op::Neg;
        exp, exp_as => Op::Exp;
        log, log_as => Op::Log;
        sqrt, sqrt_as => Op::Sqrt;
    }

    pub fn ge(&self, other: &Var) -> Var {
        self.emit1(Op::Ge, &[other], None)
    }

    pub fn is_finite(&self) -> Var {
        self.emit1(Op::IsFinite, &[], None)
    }

    pub fn pow2_round_down(&self) -> Var {
        self.emit1(Op::Pow2RoundDown, &[], None)
    }

    pub fn assert_pow2(&self) -> Var {
        self.emit1(Op::AssertPow2, &[], None)
    }

    pub fn sum(&self, axes: &[usize]) -> Var {
        self.emit1(Op::ReduceSum { axes: axes.to_vec() }, &[], None)
    }

    pub fn sum_as(&self, axes: &[usize], dtype: DType) -> Var {
        self.emit1(Op::ReduceSum { axes: axes.to_vec() }, &[], Some(dtype))
    }

    /// Sum over every axis.
    pub fn sum_all(&self) -> Var {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.sum(&axes)
    }

    pub fn max(&self, axes: &[usize]) -> Var {
        self.emit1(Op::ReduceMax { axes: axes.to_vec() }, &[], None)
    }

    pub fn transpose(&self, perm: &[usize]) -> Var {
        self.emit1(Op::Transpose { perm: perm.to_vec() }, &[], None)
    }

    /// Swap the two innermost axes.
    pub fn t(&self) -> Var {
        let r = self.rank();
        let mut perm: Vec<usize> = (0..r).collect();
        if r >= 2 {
            perm.swap(r - 1, r - 2);
        }
        self.transpose(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        self.emit1(Op::Reshape { shape: shape.to_vec() }, &[], None)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        self.emit1(Op::Broadcast { shape: shape.to_vec() }, &[], None)
    }

    /// Reduce `axis` and broadcast the result back to this shape.
    pub(crate) fn keep_axis(&self, reduced: &Var, axis: usize) -> Var {
        let mut kept = self.shape();
        kept[axis] = 1;
        reduced.reshape(&kept).broadcast_to(&self.shape())
    }

    pub fn cast(&self, dtype: DType) -> Var {
        self.emit1(Op::Cast { dtype }, &[], None)
    }

    pub fn stop_gradient(&self) -> Var {
        self.emit1(Op::StopGradient, &[], None)
    }

    pub fn set_scaling(&self, scale: &Var) -> Var {
        self.emit1(Op::SetScaling, &[scale], None)
    }

    pub fn get_data_and_scale(&self) -> (Var, Var) {
        let mut v = self.op(Op::GetDataAndScale, &[], None);
        let s = v.pop().unwrap();
        (v.pop().unwrap(), s)
    }

    pub fn rebalance(&self, factor: &Var) -> Var {
        self.emit1(Op::Rebalance, &[factor], None)
    }

    /// `select(self, on_true, on_false)` with `self` as the predicate.
    pub fn select(&self, on_true: &Var, on_false: &Var) -> Var {
        self.emit1(Op::Select, &[on_true, on_false], None)
    }

    pub fn select_as(&self, on_true: &Var, on_false: &Var, dtype: DType) -> Var {
        self.emit1(Op::Select, &[on_true, on_false], Some(dtype))
    }

    /// Scalar `c` in this value's dtype, broadcast to its shape.
    pub fn full_like(&self, c: f64) -> Var {
        let s = self.tracer().scalar(c, self.dtype());
        s.broadcast_to(&self.shape())
    }

    pub fn zeros_like(&self) -> Var {
        self.full_like(0.0)
    }

    pub fn scalar_like(&self, c: f64) -> Var {
        self.tracer().scalar(c, self.dtype())
    }

    pub fn composite(&self, op: Arc<dyn CompositeOp>, rest: &[&Var]) -> Var {
        self.emit1(Op::Composite(op), rest, None)
    }

    pub fn composite_as(&self, op: Arc<dyn CompositeOp>, rest: &[&Var], dtype: DType) -> Var {
        self.emit1(Op::Composite(op), rest, Some(dtype))
    }

    pub fn relu(&self) -> Var {
        self.composite(composites::activation(ActKind::Relu), &[])
    }

    pub fn gelu(&self) -> Var {
        self.composite(composites::activation(ActKind::Gelu), &[])
    }

    pub fn swish(&self) -> Var {
        self.composite(composites::activation(ActKind::Swish), &[])
    }

    /// Mean-variance normalization over the last axis, `eps` added to the std.
    pub fn layer_norm(&self, eps: f64) -> Var {
        self.composite(Arc::new(composites::LayerNorm { eps }), &[])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var {
        self.composite(Arc::new(composites::Softmax { log: false }), &[])
    }

    pub fn log_softmax(&self) -> Var {
        self.composite(Arc::new(composites::Softmax { log: true }), &[])
    }

    pub fn dynamic_rescale_l2(&self, tag: &str) -> Var {
        self.composite(Arc::new(composites::DynamicRescaleL2 { tag: tag.into() }), &[])
    }

    /// Identity whose backward pass dynamically rescales the cotangent.
    pub fn rescale_on_backward(&self, tag: &str) -> Var {
        self.composite(Arc::new(composites::RescaleOnBackward { tag: tag.into() }), &[])
    }

    /// Identity whose backward pass casts the cotangent to `dtype`.
    pub fn cast_on_backward(&self, dtype: DType) -> Var {
        self.composite(Arc::new(composites::CastOnBackward { dtype }), &[])
    }
}

macro_rules! impl_binop {
    ($tr:ident, $m:ident, $method:ident) => {
        impl ops::$tr<&Var> for &Var {
            type Output = Var;
            fn $m(self, rhs: &Var) -> Var {
                self.$method(rhs)
            }
        }
        impl ops::$tr<Var> for Var {
            type Output = Var;
            fn $m(self, rhs: Var) -> Var {
                (&self).$method(&rhs)
            }
        }
        impl ops::$tr<&Var> for Var {
            type Output = Var;
            fn $m(self, rhs: &Var) -> Var {
                (&self).$method(rhs)
            }
        }
        impl ops::$tr<Var> for &Var {
            type Output = Var;
            fn $m(self, rhs: Var) -> Var {
                self.$method(&rhs)
            }
        }
        impl ops::$tr<f64> for &Var {
            type Output = Var;
            fn $m(self, rhs: f64) -> Var {
                self.$method(&self.full_like(rhs))
            }
        }
        impl ops::$tr<f64> for Var {
            type Output = Var;
            fn $m(self, rhs: f64) -> Var {
                (&self).$method(&self.full_like(rhs))
            }
        }
        impl ops::$tr<&Var> for f64 {
            type Output = Var;
            fn $m(self, rhs: &Var) -> Var {
                rhs.full_like(self).$method(rhs)
            }
        }
        impl ops::$tr<Var> for f64 {
            type Output = Var;
            fn $m(self, rhs: Var) -> Var {
                rhs.full_like(self).$method(&rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

impl ops::Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(&self)
    }
}
