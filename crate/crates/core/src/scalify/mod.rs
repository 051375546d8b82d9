//! Scale propagation: rewrite a graph over plain tensors into an equivalent
//! graph over `(data, scale)` pairs.
//!
//! Every rule rescales data only by exact powers of two, so evaluating the
//! transformed graph and multiplying data by scale reproduces the original
//! graph bit for bit, as long as no intermediate leaves the range of its dtype.
//!
//! The propagation constants (`sqrt(K)` for matmul, `sqrt(N)` for sums,
//! `sqrt(s1^2 + s2^2)` for add) are reconstructed from an independent-Gaussian
//! model of the operands and rounded down to powers of two.

mod program;
mod rules;

use std::collections::BTreeMap;
use std::fmt;

pub use program::{Observation, OutputSlot, ScalifiedGraph, Tracked};
pub use crate::graph::composites::EpsPlacement;
pub use rules::{CompositeRule, RuleCtx, ScaleRegistry, ScaleRules};

use crate::error::{Error, Result};
use crate::graph::{trace, Graph, Op, Tracer, ValueId, ValueType, Var};
use crate::numerics::{cast_values, decompose_pow2, floor_log2, pow2, DType, E8M0Scale};

/// How a graph input is presented to the transformed graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputKind {
    Plain,
    /// Split into a data input of the original type and an `f32[]` scale.
    Scaled,
}

/// What is statically known about an unscaled value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlainInfo {
    /// Every element equals this value.
    pub scalar: Option<f64>,
    /// Every element is 0, ±inf or NaN.
    pub special: bool,
}

/// A value of the transformed graph.
#[derive(Debug, Clone)]
pub enum SValue {
    Plain { var: Var, info: PlainInfo },
    /// `any` marks data whose logical value is independent of the scale.
    Scaled { data: Var, scale: Var, any: bool },
}

impl SValue {
    pub fn plain(var: Var) -> Self {
        SValue::Plain {
            var,
            info: PlainInfo::default(),
        }
    }

    pub fn is_scaled(&self) -> bool {
        matches!(self, SValue::Scaled { .. })
    }
}

/// What the transform did, node by node.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// `(node index, primitive, rule)` for every node of the input graph.
    pub node_rules: Vec<(usize, String, String)>,
    pub rule_counts: BTreeMap<String, usize>,
    /// Nodes computed by unscaling to the wide carrier.
    pub fallback_count: usize,
    /// `(value id, reason)` for every value tagged ANY_SCALE.
    pub any_scale: Vec<(ValueId, String)>,
    /// Dynamic rescale sites per tag.
    pub rescale_sites: BTreeMap<String, usize>,
    /// True when the graph was returned unchanged.
    pub unchanged: bool,
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.unchanged {
            writeln!(f, "no scaled inputs: graph unchanged")?;
        }
        writeln!(f, "rules:")?;
        for (r, n) in &self.rule_counts {
            writeln!(f, "  {r}: {n}")?;
        }
        writeln!(f, "fallbacks: {}", self.fallback_count)?;
        if !self.rescale_sites.is_empty() {
            writeln!(f, "dynamic rescale sites:")?;
            for (t, n) in &self.rescale_sites {
                writeln!(f, "  {t}: {n}")?;
            }
        }
        if !self.any_scale.is_empty() {
            writeln!(f, "ANY_SCALE values:")?;
            for (v, why) in &self.any_scale {
                writeln!(f, "  %{v}: {why}")?;
            }
        }
        writeln!(f, "nodes:")?;
        for (i, p, r) in &self.node_rules {
            writeln!(f, "  #{i} {p}: {r}")?;
        }
        Ok(())
    }
}

/// Transform `g` with the built-in rules.
pub fn scalify(g: &Graph, inputs: &[InputKind]) -> Result<ScalifiedGraph> {
    scalify_with(g, inputs, &ScaleRules::builtin())
}

/// Transform `g` with a custom rule set.
pub fn scalify_with(g: &Graph, inputs: &[InputKind], rules: &ScaleRules) -> Result<ScalifiedGraph> {
    if inputs.len() != g.inputs().len() {
        return Err(Error::Transform(format!(
            "graph takes {} inputs, got {} input kinds",
            g.inputs().len(),
            inputs.len()
        )));
    }
    let untouched = inputs.iter().all(|k| *k == InputKind::Plain)
        && !g.nodes().iter().any(|n| matches!(n.op, Op::SetScaling));
    if untouched {
        return Ok(ScalifiedGraph::unchanged(g));
    }

    let mut tr = Transformer::new(rules.clone());
    let mut env: Vec<SValue> = Vec::with_capacity(inputs.len());
    for (&kind, ty) in inputs.iter().zip(g.input_types()) {
        let dt = ty.dtype;
        let data = tr.t.input(ty);
        env.push(match kind {
            InputKind::Plain => SValue::plain(data),
            InputKind::Scaled => {
                if !dt.is_float() {
                    return Err(Error::Transform(format!("cannot scale an input of dtype {dt}")));
                }
                let scale = tr.t.input(ValueType::scalar(DType::F32));
                SValue::Scaled { data, scale, any: false }
            }
        });
    }
    let outs = tr.run(g, env, true)?;

    let mut flat = Vec::new();
    let mut layout = Vec::new();
    for v in &outs {
        match v {
            SValue::Plain { var, .. } => {
                layout.push(OutputSlot::Plain(flat.len()));
                flat.push(var.clone());
            }
            SValue::Scaled { data, scale, any } => {
                layout.push(OutputSlot::Scaled {
                    data: flat.len(),
                    scale: flat.len() + 1,
                    any: *any,
                });
                flat.push(data.clone());
                flat.push(scale.clone());
            }
        }
    }
    let Transformer { t, diag, tracked, .. } = tr;
    let built = t.finish(&flat)?;
    let (graph, map) = built.prune();
    let tracked = tracked
        .into_iter()
        .filter_map(|r| {
            Some(Tracked {
                orig: r.orig,
                data: map[r.data]?,
                scale: map[r.scale]?,
                any: r.any,
            })
        })
        .collect();
    Ok(ScalifiedGraph::new(graph, inputs.to_vec(), layout, diag, tracked))
}

struct TrackedRaw {
    orig: Option<ValueId>,
    data: ValueId,
    scale: ValueId,
    any: bool,
}

pub(crate) struct Transformer {
    t: Tracer,
    rules: ScaleRules,
    one: Option<Var>,
    diag: Diagnostics,
    tracked: Vec<TrackedRaw>,
}

/// `2^floor(log2(sqrt(n)))`: the static rescale for a sum of `n` terms.
pub fn sum_scale_factor(n: usize) -> f64 {
    if n <= 1 {
        1.0
    } else {
        pow2(floor_log2(n as f64) / 2)
    }
}

fn as_f32(v: Var) -> Var {
    if v.dtype() == DType::F32 {
        v
    } else {
        v.cast(DType::F32)
    }
}

/// Values whose every entry is 0, ±inf or NaN.
fn scale_free(v: &SValue) -> bool {
    match v {
        SValue::Scaled { any, .. } => *any,
        SValue::Plain { info, .. } => info.special || info.scalar.is_some_and(is_special),
    }
}

fn is_special(v: f64) -> bool {
    v == 0.0 || !v.is_finite()
}

impl Transformer {
    fn new(rules: ScaleRules) -> Self {
        Transformer {
            t: Tracer::new(),
            rules,
            one: None,
            diag: Diagnostics::default(),
            tracked: Vec::new(),
        }
    }

    fn one(&mut self) -> Var {
        if self.one.is_none() {
            self.one = Some(self.t.scalar(1.0, DType::F32));
        }
        self.one.clone().unwrap()
    }

    fn f32(&self, c: f64) -> Var {
        self.t.scalar(c, DType::F32)
    }

    fn lift(&mut self, v: &SValue) -> (Var, Var, bool) {
        match v {
            SValue::Scaled { data, scale, any } => (data.clone(), scale.clone(), *any),
            SValue::Plain { var, info } => {
                if info.special {
                    return (var.clone(), self.one(), true);
                }
                if let Some(c) = info.scalar {
                    return match decompose_pow2(c) {
                        (_, E8M0Scale::Any) => (var.clone(), self.one(), true),
                        (m, E8M0Scale::Pow2(e)) => {
                            let mv = self.t.scalar(m, var.dtype());
                            let data = mv.broadcast_to(&var.shape());
                            (data, self.f32(pow2(e)), false)
                        }
                    };
                }
                (var.clone(), self.one(), false)
            }
        }
    }

    /// Logical value in the wide carrier.
    fn unscale(&mut self, v: &SValue) -> Var {
        match v {
            SValue::Plain { var, .. } => var.clone(),
            SValue::Scaled { data, scale, any: true } => {
                let _ = scale;
                data.cast(DType::F64)
            }
            SValue::Scaled { data, scale, .. } => data.mul_as(scale, DType::F64),
        }
    }

    /// Bring two operands to a common scale (the larger one).
    fn unify(&mut self, a: &SValue, b: &SValue) -> (Var, Var, Var, bool) {
        let (da, sa, anya) = self.lift(a);
        let (db, sb, anyb) = self.lift(b);
        match (anya, anyb) {
            (true, true) => (da, db, sa, true),
            (true, false) => (da, db, sb, false),
            (false, true) => (da, db, sa, false),
            _ if sa.id() == sb.id() => (da, db, sa, false),
            _ => {
                let s = sa.maximum_as(&sb, DType::F32);
                let ra = sa.div_as(&s, DType::F64);
                let rb = sb.div_as(&s, DType::F64);
                (da.mul_as(&ra, DType::F64), db.mul_as(&rb, DType::F64), s, false)
            }
        }
    }

    fn note_any(&mut self, orig: Option<ValueId>, why: impl Into<String>) {
        if let Some(o) = orig {
            self.diag.any_scale.push((o, why.into()));
        }
    }

    /// Transform every node of `g` given values for its inputs; returns the
    /// values of its outputs. `top` marks the caller's graph (as opposed to a
    /// composite decomposition) for diagnostics.
    fn run(&mut self, g: &Graph, inputs: Vec<SValue>, top: bool) -> Result<Vec<SValue>> {
        let mut env: Vec<Option<SValue>> = vec![None; g.num_values()];
        for (&id, v) in g.inputs().iter().zip(inputs) {
            if let (true, SValue::Scaled { data, scale, any }) = (top, &v) {
                self.tracked.push(TrackedRaw {
                    orig: Some(id),
                    data: data.id(),
                    scale: scale.id(),
                    any: *any,
                });
            }
            env[id] = Some(v);
        }
        for (i, n) in g.nodes().iter().enumerate() {
            let args: Vec<SValue> = n
                .args
                .iter()
                .map(|&a| env[a].clone().expect("argument defined before use"))
                .collect();
            let out_types: Vec<ValueType> = n.outputs.iter().map(|&o| g.value_type(o).clone()).collect();
            let mut rule = String::new();
            let outs = match &n.op {
                Op::Const(k) => {
                    let c = &g.constants()[*k];
                    let d = c.value.data();
                    let info = PlainInfo {
                        scalar: c.meta.is_broadcast_scalar.then_some(c.meta.scalar_value),
                        special: !d.is_empty() && d.iter().all(|&v| is_special(v)),
                    };
                    rule.push_str("constant");
                    vec![SValue::Plain {
                        var: self.t.constant_with(c.value.clone(), c.meta),
                        info,
                    }]
                }
                op => self.node(op, &args, &out_types, &mut rule).map_err(|e| match e {
                    Error::Transform(m) => Error::Transform(format!("node {i} ({}): {m}", op.name())),
                    other => other,
                })?,
            };
            if outs.len() != n.outputs.len() {
                return Err(Error::Transform(format!(
                    "rule for `{}` produced {} outputs, expected {}",
                    n.op.name(),
                    outs.len(),
                    n.outputs.len()
                )));
            }
            for ((&o, v), ty) in n.outputs.iter().zip(&outs).zip(&out_types) {
                let got = match v {
                    SValue::Plain { var, .. } => var,
                    SValue::Scaled { data, .. } => data,
                };
                if got.ty() != *ty && !self.t.is_poisoned() {
                    return Err(Error::Transform(format!(
                        "rule `{rule}` for `{}` produced {}, expected {ty}",
                        n.op.name(),
                        got.ty()
                    )));
                }
                if let SValue::Scaled { data, scale, any } = v {
                    self.tracked.push(TrackedRaw {
                        orig: top.then_some(o),
                        data: data.id(),
                        scale: scale.id(),
                        any: *any,
                    });
                    if *any {
                        self.note_any(top.then_some(o), format!("{} via {rule}", n.op.name()));
                    }
                }
            }
            if rule == "select_any" {
                for (&a, v) in n.args[1..].iter().zip(&args[1..]) {
                    if scale_free(v) {
                        self.note_any(top.then_some(a), format!("scale-free branch of select #{i}"));
                    }
                }
            }
            if top {
                self.diag.node_rules.push((i, n.op.name().to_string(), rule.clone()));
            }
            *self.diag.rule_counts.entry(rule).or_insert(0) += 1;
            for (&o, v) in n.outputs.iter().zip(outs) {
                env[o] = Some(v);
            }
        }
        if self.t.is_poisoned() {
            // surface the recorded error
            let t = std::mem::take(&mut self.t);
            return Err(t.finish(&[]).err().unwrap_or_else(|| Error::Transform("trace failed".into())));
        }
        Ok(g.outputs().iter().map(|&o| env[o].clone().unwrap()).collect())
    }

    fn replay_plain(&mut self, op: &Op, args: &[SValue], out_types: &[ValueType]) -> Vec<SValue> {
        let vars: Vec<Var> = args
            .iter()
            .map(|a| match a {
                SValue::Plain { var, .. } => var.clone(),
                SValue::Scaled { .. } => unreachable!("replay of scaled operand"),
            })
            .collect();
        let rest: Vec<&Var> = vars[1..].iter().collect();
        let outs = vars[0].op(op.clone(), &rest, Some(out_types[0].dtype));
        let info_of = |a: &SValue| match a {
            SValue::Plain { info, .. } => *info,
            _ => PlainInfo::default(),
        };
        let src = info_of(&args[0]);
        let round = |v: f64| {
            let mut v = [v];
            cast_values(&mut v, out_types[0].dtype, Default::default());
            v[0]
        };
        let info = match op {
            // fold known scalars the same way the interpreter evaluates them
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Maximum => {
                let other = info_of(&args[1]);
                let scalar = src.scalar.zip(other.scalar).map(|(a, b)| {
                    round(match op {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        Op::Mul => a * b,
                        Op::Div => a / b,
                        _ if a.is_nan() || b.is_nan() => f64::NAN,
                        _ => {
                            if a >= b {
                                a
                            } else {
                                b
                            }
                        }
                    })
                });
                let special = match op {
                    Op::Mul => src.special || other.special,
                    _ => src.special && other.special,
                } || scalar.is_some_and(is_special);
                PlainInfo { scalar, special }
            }
            Op::Broadcast { .. } | Op::Reshape { .. } | Op::Transpose { .. } | Op::StopGradient => src,
            Op::Neg => PlainInfo {
                scalar: src.scalar.map(|c| -c),
                special: src.special,
            },
            Op::Cast { .. } => PlainInfo {
                scalar: src.scalar.map(round),
                special: src.special,
            },
            _ => PlainInfo::default(),
        };
        let mut it = outs.into_iter();
        let first = SValue::Plain {
            var: it.next().unwrap(),
            info,
        };
        std::iter::once(first).chain(it.map(SValue::plain)).collect()
    }

    fn node(&mut self, op: &Op, args: &[SValue], out_types: &[ValueType], rule: &mut String) -> Result<Vec<SValue>> {
        let dt = out_types[0].dtype;
        let any_scaled = args.iter().any(SValue::is_scaled);
        let set = |rule: &mut String, r: &str| {
            rule.clear();
            rule.push_str(r);
        };

        // ops with scale semantics even on plain operands
        match op {
            Op::SetScaling => {
                set(rule, "set_scaling");
                let target = as_f32(self.unscale(&args[1])).assert_pow2();
                return Ok(vec![match &args[0] {
                    SValue::Plain { var, .. } => SValue::Scaled {
                        data: var.div_as(&target, dt),
                        scale: target,
                        any: false,
                    },
                    SValue::Scaled { data, any: true, .. } => SValue::Scaled {
                        data: data.clone(),
                        scale: target,
                        any: true,
                    },
                    SValue::Scaled { data, scale, .. } => {
                        let r = scale.div_as(&target, DType::F64);
                        SValue::Scaled {
                            data: data.mul_as(&r, dt),
                            scale: target,
                            any: false,
                        }
                    }
                }]);
            }
            Op::GetDataAndScale => {
                set(rule, "get_data_and_scale");
                return Ok(match &args[0] {
                    SValue::Plain { .. } => vec![args[0].clone(), SValue::plain(self.one())],
                    SValue::Scaled { data, scale, .. } => {
                        vec![SValue::plain(data.clone()), SValue::plain(scale.clone())]
                    }
                });
            }
            Op::Rebalance => {
                return Ok(vec![match &args[0] {
                    SValue::Plain { .. } | SValue::Scaled { any: true, .. } => {
                        set(rule, "rebalance_noop");
                        args[0].clone()
                    }
                    SValue::Scaled { data, scale, .. } => {
                        set(rule, "rebalance");
                        let f = as_f32(self.unscale(&args[1]));
                        SValue::Scaled {
                            data: data.div_as(&f, dt),
                            scale: scale.mul_as(&f, DType::F32),
                            any: false,
                        }
                    }
                }]);
            }
            _ => {}
        }

        if !any_scaled {
            set(rule, "plain");
            return Ok(self.replay_plain(op, args, out_types));
        }

        let scaled = |data: Var, scale: Var, any: bool| SValue::Scaled { data, scale, any };
        Ok(match op {
            Op::Add | Op::Sub => {
                let sub = matches!(op, Op::Sub);
                let combine = |a: &Var, b: &Var, dt: DType| if sub { a.sub_as(b, dt) } else { a.add_as(b, dt) };
                let (da, sa, anya) = self.lift(&args[0]);
                let (db, sb, anyb) = self.lift(&args[1]);
                match (anya, anyb) {
                    (true, true) => {
                        set(rule, "add_any_any");
                        vec![scaled(combine(&da, &db, dt), sa, true)]
                    }
                    (true, false) => {
                        set(rule, "add_any");
                        vec![scaled(combine(&da, &db, dt), sb, false)]
                    }
                    (false, true) => {
                        set(rule, "add_any");
                        vec![scaled(combine(&da, &db, dt), sa, false)]
                    }
                    _ if sa.id() == sb.id() => {
                        set(rule, "add_same_scale");
                        vec![scaled(combine(&da, &db, dt), sa, false)]
                    }
                    _ => {
                        set(rule, "add");
                        let sa2 = sa.mul_as(&sa, DType::F64);
                        let sb2 = sb.mul_as(&sb, DType::F64);
                        let s = sa2.add(&sb2).sqrt().pow2_round_down();
                        let xa = da.mul_as(&sa.div_as(&s, DType::F64), DType::F64);
                        let xb = db.mul_as(&sb.div_as(&s, DType::F64), DType::F64);
                        vec![scaled(combine(&xa, &xb, dt), s, false)]
                    }
                }
            }
            Op::Mul | Op::Div => {
                let (da, sa, anya) = self.lift(&args[0]);
                let (db, sb, anyb) = self.lift(&args[1]);
                let div = matches!(op, Op::Div);
                let data = if div { da.div_as(&db, dt) } else { da.mul_as(&db, dt) };
                if anya || anyb {
                    set(rule, "mul_any");
                    vec![scaled(data, self.one(), true)]
                } else {
                    set(rule, if div { "div" } else { "mul" });
                    let s = if div { sa.div_as(&sb, DType::F32) } else { sa.mul_as(&sb, DType::F32) };
                    vec![scaled(data, s, false)]
                }
            }
            Op::MatMul => {
                let (da, sa, anya) = self.lift(&args[0]);
                let (db, sb, anyb) = self.lift(&args[1]);
                if anya || anyb {
                    set(rule, "matmul_any");
                    vec![scaled(da.matmul_as(&db, dt), self.one(), true)]
                } else {
                    set(rule, "matmul");
                    let k = *da.shape().last().unwrap();
                    let c = sum_scale_factor(k);
                    let s = sa.mul_as(&sb, DType::F32);
                    if c == 1.0 {
                        vec![scaled(da.matmul_as(&db, dt), s, false)]
                    } else {
                        let raw = da.matmul_as(&db, DType::F64);
                        let data = raw.mul_as(&self.t.scalar(1.0 / c, DType::F64), dt);
                        vec![scaled(data, s.mul_as(&self.f32(c), DType::F32), false)]
                    }
                }
            }
            Op::ReduceSum { axes } => {
                let (d, s, any) = self.lift(&args[0]);
                let shape = d.shape();
                let n: usize = axes.iter().map(|&a| shape[a]).product();
                let c = sum_scale_factor(n);
                if any || c == 1.0 {
                    set(rule, if any { "reduce_sum_any" } else { "reduce_sum" });
                    vec![scaled(d.sum_as(axes, dt), s, any)]
                } else {
                    set(rule, "reduce_sum");
                    let raw = d.sum_as(axes, DType::F64);
                    let data = raw.mul_as(&self.t.scalar(1.0 / c, DType::F64), dt);
                    vec![scaled(data, s.mul_as(&self.f32(c), DType::F32), false)]
                }
            }
            Op::Neg
            | Op::ReduceMax { .. }
            | Op::Transpose { .. }
            | Op::Reshape { .. }
            | Op::Broadcast { .. }
            | Op::Cast { .. }
            | Op::StopGradient
            | Op::AssertPow2 => {
                set(rule, "keep_scale");
                let (d, s, any) = self.lift(&args[0]);
                let y = d.op(op.clone(), &[], Some(dt)).swap_remove(0);
                vec![scaled(y, s, any)]
            }
            Op::Sqrt => {
                let (d, s, any) = self.lift(&args[0]);
                if any {
                    set(rule, "sqrt_any");
                    vec![scaled(d.sqrt_as(dt), s, true)]
                } else {
                    set(rule, "sqrt");
                    let t = s.sqrt_as(DType::F64).pow2_round_down();
                    let r = s.div_as(&t.mul_as(&t, DType::F64), DType::F64);
                    vec![scaled(d.mul_as(&r, DType::F64).sqrt_as(dt), t, false)]
                }
            }
            Op::Exp | Op::Log => {
                set(rule, &format!("fallback_{}", op.name()));
                self.diag.fallback_count += 1;
                let x = self.unscale(&args[0]);
                let y = x.op(op.clone(), &[], Some(dt)).swap_remove(0);
                vec![scaled(y, self.one(), false)]
            }
            Op::Maximum => {
                set(rule, "maximum");
                let (da, db, s, any) = self.unify(&args[0], &args[1]);
                vec![scaled(da.maximum_as(&db, dt), s, any)]
            }
            Op::Ge => {
                set(rule, "compare");
                let (da, db, _, _) = self.unify(&args[0], &args[1]);
                vec![SValue::plain(da.ge(&db))]
            }
            Op::IsFinite => {
                set(rule, "is_finite");
                let (d, _, _) = self.lift(&args[0]);
                vec![SValue::plain(d.is_finite())]
            }
            Op::Pow2RoundDown => {
                set(rule, "unscale");
                vec![SValue::plain(self.unscale(&args[0]).pow2_round_down())]
            }
            Op::Select => {
                let mask = match &args[0] {
                    SValue::Plain { var, .. } => var.clone(),
                    SValue::Scaled { data, .. } => data.clone(),
                };
                if !args[1].is_scaled() && !args[2].is_scaled() {
                    set(rule, "plain");
                    let a = self.unscale(&args[1]);
                    let b = self.unscale(&args[2]);
                    vec![SValue::plain(mask.select_as(&a, &b, dt))]
                } else {
                    // a scale-free branch (zeros, infinities) takes the other branch's scale
                    let free = args[1..].iter().any(scale_free);
                    set(rule, if free { "select_any" } else { "select" });
                    let (da, db, s, any) = self.unify(&args[1], &args[2]);
                    vec![scaled(mask.select_as(&da, &db, dt), s, any)]
                }
            }
            Op::Composite(c) => {
                let name = c.name().to_string();
                if let Some(r) = self.rules.get(&name).cloned() {
                    set(rule, &format!("custom_{name}"));
                    let mut ctx = RuleCtx::new(self, out_types);
                    let out = r(&mut ctx, c.as_ref(), args)?;
                    if let Some(r) = ctx.rule_override() {
                        set(rule, &r);
                    }
                    out
                } else {
                    set(rule, &format!("decompose_{name}"));
                    self.decompose(c.as_ref(), args)?
                }
            }
            Op::Const(_) | Op::SetScaling | Op::GetDataAndScale | Op::Rebalance => unreachable!(),
        })
    }

    /// Inline a composite through its reference decomposition.
    fn decompose(&mut self, c: &dyn crate::graph::CompositeOp, args: &[SValue]) -> Result<Vec<SValue>> {
        let types: Vec<ValueType> = args
            .iter()
            .map(|a| match a {
                SValue::Plain { var, .. } => var.ty(),
                SValue::Scaled { data, .. } => data.ty(),
            })
            .collect();
        let mut missing = false;
        let sub = trace(&types, |xs| match c.decompose(xs) {
            Some(v) => v,
            None => {
                missing = true;
                xs.to_vec()
            }
        })?;
        if missing {
            return Err(Error::NoScaleRule {
                primitive: c.name().to_string(),
            });
        }
        self.run(&sub, args.to_vec(), false)
    }
}
