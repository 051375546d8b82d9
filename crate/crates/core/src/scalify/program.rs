use super::{Diagnostics, InputKind};
use crate::error::{Error, Result};
use crate::graph::{eval_observed, Graph, ValueId};
use crate::numerics::{floor_log2, is_pow2, DType, E8M0Scale};
use crate::tensor::{Array, ScaledArray, Tensor};

/// Where an original output lives among the transformed graph's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSlot {
    Plain(usize),
    Scaled { data: usize, scale: usize, any: bool },
}

/// A scaled value of the transformed graph; `orig` is the corresponding value
/// of the source graph when there is one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tracked {
    pub orig: Option<ValueId>,
    pub data: ValueId,
    pub scale: ValueId,
    pub any: bool,
}

/// Statistics of one scaled intermediate, reported by [`ScalifiedGraph::eval_observed`].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub orig: Option<ValueId>,
    /// RMS of the finite data entries.
    pub data_rms: f64,
    pub scale: f64,
    pub any: bool,
    pub dtype: DType,
    pub numel: usize,
}

#[derive(Debug, Clone, Default)]
struct Roles {
    scale_of: Vec<usize>,
    data_of: Vec<usize>,
}

/// Output of the transform: the rewritten graph plus the layout needed to
/// feed and read it.
#[derive(Debug, Clone)]
pub struct ScalifiedGraph {
    pub graph: Graph,
    pub input_kinds: Vec<InputKind>,
    pub outputs: Vec<OutputSlot>,
    pub diagnostics: Diagnostics,
    pub tracked: Vec<Tracked>,
    roles: Vec<Roles>,
}

fn check_scale(id: ValueId, t: &Tensor) -> Result<()> {
    let s = t.item();
    if !is_pow2(s) {
        return Err(Error::NotPow2 {
            at: format!("scale %{id}"),
            value: s,
        });
    }
    E8M0Scale::from_exponent(floor_log2(s)).map(|_| ())
}

fn check_any(id: ValueId, t: &Tensor) -> Result<()> {
    match t.data().iter().find(|v| **v != 0.0 && v.is_finite()) {
        Some(v) => Err(Error::Transform(format!(
            "ANY_SCALE value %{id} holds the finite nonzero value {v}"
        ))),
        None => Ok(()),
    }
}

/// RMS over the finite entries; masks legitimately carry infinities.
fn finite_rms(t: &Tensor) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in t.data().iter().filter(|v| v.is_finite()) {
        sum += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

impl ScalifiedGraph {
    pub(super) fn new(
        graph: Graph,
        input_kinds: Vec<InputKind>,
        outputs: Vec<OutputSlot>,
        diagnostics: Diagnostics,
        tracked: Vec<Tracked>,
    ) -> Self {
        let mut roles = vec![Roles::default(); graph.num_values()];
        for (i, t) in tracked.iter().enumerate() {
            roles[t.scale].scale_of.push(i);
            roles[t.data].data_of.push(i);
        }
        ScalifiedGraph {
            graph,
            input_kinds,
            outputs,
            diagnostics,
            tracked,
            roles,
        }
    }

    pub(super) fn unchanged(g: &Graph) -> Self {
        let diagnostics = Diagnostics {
            unchanged: true,
            rule_counts: [("plain".to_string(), g.nodes().len())].into_iter().collect(),
            node_rules: g
                .nodes()
                .iter()
                .enumerate()
                .map(|(i, n)| (i, n.op.name().to_string(), "plain".to_string()))
                .collect(),
            ..Default::default()
        };
        let outputs = (0..g.outputs().len()).map(OutputSlot::Plain).collect();
        Self::new(
            g.clone(),
            vec![InputKind::Plain; g.inputs().len()],
            outputs,
            diagnostics,
            Vec::new(),
        )
    }

    /// Flatten arrays into the transformed graph's inputs. A plain array fed
    /// to a scaled slot gets scale 1.
    pub fn flatten_inputs(&self, inputs: &[Array]) -> Result<Vec<Tensor>> {
        if inputs.len() != self.input_kinds.len() {
            return Err(Error::Eval(format!(
                "expected {} inputs, got {}",
                self.input_kinds.len(),
                inputs.len()
            )));
        }
        let mut flat = Vec::with_capacity(self.graph.inputs().len());
        for (i, (kind, a)) in self.input_kinds.iter().zip(inputs).enumerate() {
            match (kind, a) {
                (InputKind::Plain, Array::Plain(t)) => flat.push(t.clone()),
                (InputKind::Plain, Array::Scaled(_)) => {
                    return Err(Error::Eval(format!("input {i} is declared plain but a scaled array was given")))
                }
                (InputKind::Scaled, Array::Plain(t)) => {
                    flat.push(t.clone());
                    flat.push(Tensor::scalar(1.0, DType::F32));
                }
                (InputKind::Scaled, Array::Scaled(s)) => {
                    flat.push(s.data.clone());
                    flat.push(Tensor::scalar(s.scale.value(), DType::F32));
                }
            }
        }
        Ok(flat)
    }

    fn assemble(&self, mut flat: Vec<Tensor>) -> Result<Vec<Array>> {
        let mut take = |i: usize| std::mem::replace(&mut flat[i], Tensor::scalar(0.0, DType::F64));
        self.outputs
            .iter()
            .map(|slot| match *slot {
                OutputSlot::Plain(i) => Ok(Array::Plain(take(i))),
                OutputSlot::Scaled { data, scale, any } => {
                    let d = take(data);
                    let s = take(scale);
                    let scale = if any { E8M0Scale::Any } else { E8M0Scale::from_value(s.item())? };
                    Ok(Array::Scaled(ScaledArray::new(d, scale)))
                }
            })
            .collect()
    }

    pub fn eval(&self, inputs: &[Array]) -> Result<Vec<Array>> {
        let flat = self.flatten_inputs(inputs)?;
        let out = self.eval_flat(&flat, None)?;
        self.assemble(out)
    }

    /// Evaluate, reporting every scaled intermediate to `observe`.
    pub fn eval_observed(&self, inputs: &[Array], observe: &mut dyn FnMut(&Observation)) -> Result<Vec<Array>> {
        let flat = self.flatten_inputs(inputs)?;
        let out = self.eval_flat(&flat, Some(observe))?;
        self.assemble(out)
    }

    /// Evaluate on already flattened inputs, checking scale discipline after
    /// every node: scales must be in-range powers of two and ANY_SCALE data
    /// must hold only zeros, infinities and NaN.
    pub fn eval_flat(&self, flat: &[Tensor], mut observe: Option<&mut dyn FnMut(&Observation)>) -> Result<Vec<Tensor>> {
        let n = self.tracked.len();
        let mut rms: Vec<Option<(f64, DType, usize)>> = vec![None; n];
        let mut scales: Vec<Option<f64>> = vec![None; n];
        let want = observe.is_some();
        let mut visit = |id: ValueId, t: &Tensor, obs: &mut Option<&mut dyn FnMut(&Observation)>| -> Result<()> {
            let r = &self.roles[id];
            if !r.scale_of.is_empty() {
                check_scale(id, t)?;
            }
            for &k in &r.data_of {
                if self.tracked[k].any {
                    check_any(id, t)?;
                }
            }
            if !want {
                return Ok(());
            }
            for &k in &r.scale_of {
                scales[k] = Some(t.item());
            }
            for &k in &r.data_of {
                rms[k] = Some((finite_rms(t), t.dtype(), t.len()));
            }
            for &k in r.scale_of.iter().chain(&r.data_of) {
                if let (Some((data_rms, dtype, numel)), Some(scale)) = (rms[k], scales[k]) {
                    if let Some(f) = obs.as_mut() {
                        let t = &self.tracked[k];
                        f(&Observation {
                            orig: t.orig,
                            data_rms,
                            scale,
                            any: t.any,
                            dtype,
                            numel,
                        });
                    }
                    // report once
                    scales[k] = None;
                    rms[k] = Some((f64::NAN, dtype, numel));
                }
            }
            Ok(())
        };
        for (&id, t) in self.graph.inputs().iter().zip(flat) {
            visit(id, t, &mut observe)?;
        }
        let g = &self.graph;
        eval_observed(g, flat, &mut |i, outs| {
            for (&id, t) in g.nodes()[i].outputs.iter().zip(outs) {
                visit(id, t, &mut observe)?;
            }
            Ok(())
        })
    }
}
