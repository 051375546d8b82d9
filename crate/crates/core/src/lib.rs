pub mod autodiff;
pub mod error;
pub mod graph;
pub mod harness;
pub mod nn;
pub mod numerics;
pub mod scalify;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{trace, Graph, GraphBuilder, Op, Tracer, ValueId, ValueType, Var};
pub use numerics::{DType, E8M0Scale, FloatFormat, Rounding};
pub use tensor::{Array, ScaledArray, Tensor};
