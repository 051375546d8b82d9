//! Immutable tensor-program IR: builder with shape/dtype inference, tracer,
//! interpreter and pretty-printer.

mod builder;
pub mod composites;
mod interp;
mod print;
mod trace;

use std::any::Any;
use std::fmt;
use std::sync::Arc;

pub use builder::{infer_node, GraphBuilder};
pub use interp::{eval, eval_observed};
pub use trace::{trace, Tracer, Var};

use crate::error::Result;
use crate::numerics::DType;
use crate::tensor::Tensor;

pub type ValueId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ValueType {
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl ValueType {
    pub fn new(shape: impl Into<Vec<usize>>, dtype: DType) -> Self {
        ValueType {
            shape: shape.into(),
            dtype,
        }
    }

    pub fn scalar(dtype: DType) -> Self {
        ValueType {
            shape: vec![],
            dtype,
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn of(t: &Tensor) -> Self {
        ValueType::new(t.shape(), t.dtype())
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.dtype)?;
        for (i, d) in self.shape.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

/// Metadata attached to graph constants.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConstMeta {
    pub is_broadcast_scalar: bool,
    /// Meaningful only when `is_broadcast_scalar` is set.
    pub scalar_value: f64,
}

impl ConstMeta {
    /// Flag the tensor as a broadcast scalar when all its elements are equal.
    pub fn infer(t: &Tensor) -> Self {
        let d = t.data();
        match d.first() {
            Some(&v0) if d.iter().all(|v| v.to_bits() == v0.to_bits()) => ConstMeta {
                is_broadcast_scalar: true,
                scalar_value: v0,
            },
            _ => ConstMeta::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Constant {
    pub value: Tensor,
    pub meta: ConstMeta,
}

/// A named operation with custom forward, reference decomposition and VJP.
pub trait CompositeOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &str;

    /// Attributes rendered by the printer, e.g. `eps=0.00001`.
    fn attrs(&self) -> String {
        String::new()
    }

    fn infer(&self, args: &[ValueType]) -> std::result::Result<Vec<ValueType>, String>;

    /// Closed-form forward over wide-carrier values. The interpreter rounds the
    /// results into the declared output dtypes.
    fn eval(&self, args: &[&Tensor]) -> Result<Vec<Tensor>>;

    /// Reference decomposition into primitives, when one exists.
    fn decompose(&self, args: &[Var]) -> Option<Vec<Var>> {
        let _ = args;
        None
    }

    /// Cotangents for each argument (`None` for non-differentiable ones).
    fn vjp(&self, args: &[Var], outs: &[Var], cts: &[Option<Var>]) -> Result<Vec<Option<Var>>>;

    fn as_any(&self) -> &dyn Any;
}

#[derive(Debug, Clone)]
pub enum Op {
    Const(usize),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Maximum,
    ReduceSum { axes: Vec<usize> },
    ReduceMax { axes: Vec<usize> },
    MatMul,
    Transpose { perm: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Broadcast { shape: Vec<usize> },
    /// `select(mask, on_true, on_false)`.
    Select,
    Cast { dtype: DType },
    StopGradient,
    /// `set_scaling(x, scale)`: no-op unless scalified.
    SetScaling,
    /// `get_data_and_scale(x) -> (data, scale)`: `(x, 1)` unless scalified.
    GetDataAndScale,
    Composite(Arc<dyn CompositeOp>),
    /// `a >= b` as a predicate.
    Ge,
    IsFinite,
    /// Largest power of two not above each value; non-positive or non-finite
    /// values map to 1.
    Pow2RoundDown,
    /// Identity that fails evaluation unless every value is a finite power of two.
    AssertPow2,
    /// `rebalance(x, factor)`: no-op unless scalified.
    Rebalance,
}

impl Op {
    pub fn name(&self) -> &str {
        match self {
            Op::Const(_) => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Maximum => "maximum",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::ReduceMax { .. } => "reduce_max",
            Op::MatMul => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Broadcast { .. } => "broadcast",
            Op::Select => "select",
            Op::Cast { .. } => "cast",
            Op::StopGradient => "stop_gradient",
            Op::SetScaling => "set_scaling",
            Op::GetDataAndScale => "get_data_and_scale",
            Op::Composite(c) => c.name(),
            Op::Ge => "ge",
            Op::IsFinite => "is_finite",
            Op::Pow2RoundDown => "pow2_round_down",
            Op::AssertPow2 => "assert_pow2",
            Op::Rebalance => "rebalance",
        }
    }

    pub fn arity(&self) -> Option<usize> {
        Some(match self {
            Op::Const(_) => 0,
            Op::Neg
            | Op::Exp
            | Op::Log
            | Op::Sqrt
            | Op::ReduceSum { .. }
            | Op::ReduceMax { .. }
            | Op::Transpose { .. }
            | Op::Reshape { .. }
            | Op::Broadcast { .. }
            | Op::Cast { .. }
            | Op::StopGradient
            | Op::GetDataAndScale
            | Op::IsFinite
            | Op::Pow2RoundDown
            | Op::AssertPow2 => 1,
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Div
            | Op::Maximum
            | Op::MatMul
            | Op::SetScaling
            | Op::Ge
            | Op::Rebalance => 2,
            Op::Select => 3,
            Op::Composite(_) => return None,
        })
    }

    pub fn as_composite(&self) -> Option<&dyn CompositeOp> {
        match self {
            Op::Composite(c) => Some(c.as_ref()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub args: Vec<ValueId>,
    pub outputs: Vec<ValueId>,
}

/// Values are numbered densely; inputs and node outputs share one id space.
#[derive(Debug, Clone)]
pub struct Graph {
    pub(crate) types: Vec<ValueType>,
    pub(crate) inputs: Vec<ValueId>,
    pub(crate) constants: Vec<Constant>,
    pub(crate) nodes: Vec<Node>,
    pub(crate) outputs: Vec<ValueId>,
}

impl Graph {
    pub fn inputs(&self) -> &[ValueId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[ValueId] {
        &self.outputs
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn constants(&self) -> &[Constant] {
        &self.constants
    }

    pub fn num_values(&self) -> usize {
        self.types.len()
    }

    pub fn value_type(&self, id: ValueId) -> &ValueType {
        &self.types[id]
    }

    pub fn input_types(&self) -> Vec<ValueType> {
        self.inputs.iter().map(|&i| self.types[i].clone()).collect()
    }

    pub fn output_types(&self) -> Vec<ValueType> {
        self.outputs.iter().map(|&i| self.types[i].clone()).collect()
    }

    /// Per-node output types, as recorded at construction.
    pub fn infer(&self) -> Vec<Vec<ValueType>> {
        self.nodes
            .iter()
            .map(|n| n.outputs.iter().map(|&o| self.types[o].clone()).collect())
            .collect()
    }

    /// Index of the node whose outputs include `id`, if any.
    pub fn producer(&self, id: ValueId) -> Option<usize> {
        self.nodes.iter().position(|n| n.outputs.contains(&id))
    }

    /// Count of nodes per op name.
    pub fn op_histogram(&self) -> std::collections::BTreeMap<String, usize> {
        let mut h = std::collections::BTreeMap::new();
        for n in &self.nodes {
            *h.entry(n.op.name().to_string()).or_insert(0) += 1;
        }
        h
    }

    /// Keep only nodes that contribute to the outputs, renumbering values.
    /// Inputs are always kept. Returns the pruned graph and an old-to-new id map.
    pub fn prune(&self) -> (Graph, Vec<Option<ValueId>>) {
        let mut live = vec![false; self.types.len()];
        for &o in &self.outputs {
            live[o] = true;
        }
        let mut keep = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate().rev() {
            let needed = n.outputs.iter().any(|&o| live[o])
                || matches!(n.op, Op::AssertPow2) && n.args.iter().any(|&a| live[a]);
            if needed {
                keep[i] = true;
                for &a in &n.args {
                    live[a] = true;
                }
            }
        }
        let mut b = GraphBuilder::new();
        let mut map: Vec<Option<ValueId>> = vec![None; self.types.len()];
        for &i in &self.inputs {
            map[i] = Some(b.input(self.types[i].clone()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !keep[i] {
                continue;
            }
            let new_ids = match &n.op {
                Op::Const(c) => {
                    let k = &self.constants[*c];
                    vec![b.constant(k.value.clone(), k.meta)]
                }
                op => {
                    let args: Vec<ValueId> = n.args.iter().map(|&a| map[a].unwrap()).collect();
                    b.push_typed(op.clone(), args, n.outputs.iter().map(|&o| self.types[o].clone()).collect())
                }
            };
            for (&old, new) in n.outputs.iter().zip(new_ids) {
                map[old] = Some(new);
            }
        }
        let outputs = self.outputs.iter().map(|&o| map[o].unwrap()).collect();
        (b.finish(outputs).expect("pruned graph is well formed"), map)
    }
}
