use super::{ConstMeta, Constant, Graph, Node, Op, ValueId, ValueType};
use crate::error::{Error, Result};
use crate::numerics::DType;
use crate::tensor::{broadcast_shapes, matmul_shape, numel, Tensor};

/// Output types of `op` applied to arguments of the given types.
pub fn infer_node(
    op: &Op,
    args: &[ValueType],
    constants: &[Constant],
) -> std::result::Result<Vec<ValueType>, String> {
    if let Some(n) = op.arity() {
        if args.len() != n {
            return Err(format!("{} takes {n} arguments, got {}", op.name(), args.len()));
        }
    }
    let bcast = |a: &ValueType, b: &ValueType| {
        broadcast_shapes(&a.shape, &b.shape).map_err(|e| e.to_string())
    };
    let same = |a: &ValueType| Ok(vec![a.clone()]);
    match op {
        Op::Const(c) => constants
            .get(*c)
            .map(|k| vec![ValueType::of(&k.value)])
            .ok_or_else(|| format!("constant #{c} does not exist")),
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Maximum => Ok(vec![ValueType::new(
            bcast(&args[0], &args[1])?,
            args[0].dtype.promote(args[1].dtype),
        )]),
        Op::Ge => Ok(vec![ValueType::new(bcast(&args[0], &args[1])?, DType::Pred)]),
        Op::Neg | Op::Exp | Op::Log | Op::Sqrt | Op::StopGradient | Op::AssertPow2 => {
            same(&args[0])
        }
        Op::IsFinite => Ok(vec![ValueType::new(args[0].shape.clone(), DType::Pred)]),
        Op::Pow2RoundDown => Ok(vec![ValueType::new(args[0].shape.clone(), DType::F32)]),
        Op::ReduceSum { axes } | Op::ReduceMax { axes } => {
            let shape = &args[0].shape;
            for (i, &a) in axes.iter().enumerate() {
                if a >= shape.len() || axes[..i].contains(&a) {
                    return Err(format!("invalid axes {axes:?} for shape {shape:?}"));
                }
            }
            let out = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect::<Vec<_>>();
            Ok(vec![ValueType::new(out, args[0].dtype)])
        }
        Op::MatMul => Ok(vec![ValueType::new(
            matmul_shape(&args[0].shape, &args[1].shape).map_err(|e| e.to_string())?,
            args[0].dtype.promote(args[1].dtype),
        )]),
        Op::Transpose { perm } => {
            let r = args[0].rank();
            let mut seen = vec![false; r];
            for &p in perm {
                if p >= r || std::mem::replace(&mut seen[p], true) {
                    return Err(format!("invalid permutation {perm:?} for rank {r}"));
                }
            }
            if perm.len() != r {
                return Err(format!("invalid permutation {perm:?} for rank {r}"));
            }
            let shape = perm.iter().map(|&p| args[0].shape[p]).collect::<Vec<_>>();
            Ok(vec![ValueType::new(shape, args[0].dtype)])
        }
        Op::Reshape { shape } => {
            if numel(shape) != args[0].numel() {
                return Err(format!("cannot reshape {:?} to {shape:?}", args[0].shape));
            }
            Ok(vec![ValueType::new(shape.clone(), args[0].dtype)])
        }
        Op::Broadcast { shape } => {
            match broadcast_shapes(&args[0].shape, shape) {
                Ok(s) if &s == shape => {}
                _ => return Err(format!("cannot broadcast {:?} to {shape:?}", args[0].shape)),
            }
            Ok(vec![ValueType::new(shape.clone(), args[0].dtype)])
        }
        Op::Select => {
            let s = broadcast_shapes(&bcast(&args[0], &args[1])?, &args[2].shape)
                .map_err(|e| e.to_string())?;
            Ok(vec![ValueType::new(s, args[1].dtype.promote(args[2].dtype))])
        }
        Op::Cast { dtype } => Ok(vec![ValueType::new(args[0].shape.clone(), *dtype)]),
        Op::SetScaling | Op::Rebalance => {
            if args[1].numel() != 1 || args[1].rank() != 0 {
                return Err(format!("{} expects a scalar scale, got {}", op.name(), args[1]));
            }
            same(&args[0])
        }
        Op::GetDataAndScale => Ok(vec![args[0].clone(), ValueType::scalar(DType::F32)]),
        Op::Composite(c) => c.infer(args),
    }
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    types: Vec<ValueType>,
    inputs: Vec<ValueId>,
    constants: Vec<Constant>,
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, ty: ValueType) -> ValueId {
        let id = self.types.len();
        self.types.push(ty);
        self.inputs.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor, meta: ConstMeta) -> ValueId {
        let idx = self.constants.len();
        let ty = ValueType::of(&value);
        self.constants.push(Constant { value, meta });
        self.push_typed(Op::Const(idx), vec![], vec![ty])[0]
    }

    pub fn ty(&self, id: ValueId) -> &ValueType {
        &self.types[id]
    }

    pub fn num_values(&self) -> usize {
        self.types.len()
    }

    /// Append a node after inferring its output types. `dtype` overrides the
    /// dtype of the first output.
    pub fn node(&mut self, op: Op, args: &[ValueId], dtype: Option<DType>) -> Result<Vec<ValueId>> {
        for &a in args {
            if a >= self.types.len() {
                return Err(Error::Inference {
                    node: self.nodes.len(),
                    msg: format!("argument %{a} is not defined"),
                });
            }
        }
        let arg_types: Vec<ValueType> = args.iter().map(|&a| self.types[a].clone()).collect();
        let mut out = infer_node(&op, &arg_types, &self.constants).map_err(|msg| Error::Inference {
            node: self.nodes.len(),
            msg: format!("{}: {msg}", op.name()),
        })?;
        if let Some(dt) = dtype {
            out[0].dtype = dt;
        }
        Ok(self.push_typed(op, args.to_vec(), out))
    }

    /// Append a node with known output types.
    pub(crate) fn push_typed(&mut self, op: Op, args: Vec<ValueId>, out: Vec<ValueType>) -> Vec<ValueId> {
        let start = self.types.len();
        self.types.extend(out);
        let outputs: Vec<ValueId> = (start..self.types.len()).collect();
        self.nodes.push(Node {
            op,
            args,
            outputs: outputs.clone(),
        });
        outputs
    }

    pub fn finish(self, outputs: Vec<ValueId>) -> Result<Graph> {
        if let Some(&bad) = outputs.iter().find(|&&o| o >= self.types.len()) {
            return Err(Error::Trace(format!("output %{bad} is not defined")));
        }
        Ok(Graph {
            types: self.types,
            inputs: self.inputs,
            constants: self.constants,
            nodes: self.nodes,
            outputs,
        })
    }
}
