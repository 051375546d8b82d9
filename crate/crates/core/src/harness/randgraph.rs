//! Random graphs for checking that scale propagation preserves semantics.
//!
//! Each case is a square-matrix graph of bounded depth built from every
//! primitive and composite, evaluated on inputs whose magnitudes keep all
//! intermediates well inside the normal range. About a third of the cases
//! are differentiated first, so backward composites get exercised too.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad, GradSpec};
use crate::graph::{eval_observed, Graph, Tracer, ValueType, Var};
use crate::numerics::{pow2, DType, E8M0Scale};
use crate::scalify::{scalify, InputKind, ScalifiedGraph};
use crate::tensor::{Array, ScaledArray, Tensor};

pub const MAX_DEPTH: usize = 8;

/// Intermediates outside `[2^-SAFE_EXP, 2^SAFE_EXP]` (zero aside) reject a case.
const SAFE_EXP: i32 = 40;

#[derive(Debug, Clone)]
pub struct Case {
    pub graph: Graph,
    pub kinds: Vec<InputKind>,
    /// Inputs for the transformed graph.
    pub inputs: Vec<Array>,
    /// The same logical inputs for the source graph.
    pub plain: Vec<Tensor>,
    pub backward: bool,
}

#[derive(Clone)]
struct Val {
    v: Var,
    depth: usize,
    positive: bool,
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    pool: Vec<Val>,
    n: usize,
    backward: bool,
}

impl Builder<'_> {
    fn pick(&mut self, positive: bool) -> Option<Val> {
        let ok: Vec<&Val> = self
            .pool
            .iter()
            .filter(|v| v.depth < MAX_DEPTH && (!positive || v.positive))
            .collect();
        if ok.is_empty() {
            return None;
        }
        Some(ok[self.rng.random_range(0..ok.len())].clone())
    }

    fn push(&mut self, v: Var, from: &[&Val], positive: bool) {
        let depth = 1 + from.iter().map(|f| f.depth).max().unwrap_or(0);
        self.pool.push(Val { v, depth, positive });
    }

    fn pow2_scalar(&mut self, t: &Tracer) -> Var {
        let e = self.rng.random_range(-3..=3);
        t.scalar(pow2(e), DType::F32)
    }

    /// Append one randomly chosen operation. Returns false when no operand fits.
    fn step(&mut self, t: &Tracer) -> bool {
        let Some(a) = self.pick(false) else { return false };
        let b = self.pick(false).unwrap_or_else(|| a.clone());
        let n = self.n;
        let x = &a.v;
        let kind = self.rng.random_range(0..34);
        let (v, positive, from): (Var, bool, Vec<&Val>) = match kind {
            0 => (x + &b.v, false, vec![&a, &b]),
            1 => (x - &b.v, false, vec![&a, &b]),
            2 => (x * &b.v, false, vec![&a, &b]),
            3 => match self.pick(true) {
                Some(p) => {
                    let d = x / &p.v;
                    return {
                        self.push(d, &[&a, &p], false);
                        true
                    };
                }
                None => (x.neg(), false, vec![&a]),
            },
            4 => (x.maximum(&b.v), a.positive && b.positive, vec![&a, &b]),
            5 => (x.neg(), false, vec![&a]),
            6 => ((x * 0.25).exp(), true, vec![&a]),
            7 | 8 => match self.pick(true) {
                Some(p) => {
                    let r = if kind == 7 { p.v.log() } else { p.v.sqrt() };
                    self.push(r, &[&p], kind == 8);
                    return true;
                }
                None => (x * x, true, vec![&a]),
            },
            9 => (x * x, true, vec![&a]),
            10 => (x.ge(&b.v).select(x, &b.v), false, vec![&a, &b]),
            11 => (x.is_finite().select(x, &x.zeros_like()), a.positive, vec![&a]),
            12 => (x.keep_axis(&x.sum(&[1]), 1), false, vec![&a]),
            13 => (x.keep_axis(&x.max(&[0]), 0), a.positive, vec![&a]),
            14 => (x.matmul(&b.v), false, vec![&a, &b]),
            15 => (x.t(), a.positive, vec![&a]),
            16 => (x.reshape(&[1, n * n]).reshape(&[n, n]), a.positive, vec![&a]),
            17 => (x.cast(DType::F32).cast(DType::F64), a.positive, vec![&a]),
            18 => (x.stop_gradient(), a.positive, vec![&a]),
            19 => {
                let s = self.pow2_scalar(t);
                (x.set_scaling(&s), a.positive, vec![&a])
            }
            // the split exposes the representation, so its gradient would too
            20 if !self.backward => {
                let (d, s) = x.get_data_and_scale();
                let s = s.assert_pow2().cast(DType::F64);
                (&d * &s, a.positive, vec![&a])
            }
            21 => {
                let s = self.pow2_scalar(t);
                (x.rebalance(&s), a.positive, vec![&a])
            }
            22 => match self.pick(true) {
                Some(p) => {
                    let r = p.v.pow2_round_down().cast(DType::F64);
                    self.push(&r * x, &[&a, &p], false);
                    return true;
                }
                None => (x.relu(), true, vec![&a]),
            },
            23 => (x.relu(), true, vec![&a]),
            24 => (x.gelu(), false, vec![&a]),
            25 => (x.swish(), false, vec![&a]),
            // the default rule adds eps to the data's std, which is exact only without eps
            26 if n >= 2 => (x.layer_norm(0.0), false, vec![&a]),
            27 => (x.softmax(), true, vec![&a]),
            28 if n >= 2 => (x.log_softmax(), false, vec![&a]),
            29 => (x.dynamic_rescale_l2("check"), a.positive, vec![&a]),
            30 => (x.rescale_on_backward("check"), a.positive, vec![&a]),
            31 => (x.cast_on_backward(DType::F32), a.positive, vec![&a]),
            32 => (x * 0.75 + 1.5, false, vec![&a]),
            _ => (crate::nn::logsumexp(x).reshape(&[n, 1]).broadcast_to(&[n, n]), false, vec![&a]),
        };
        self.push(v, &from, positive);
        true
    }
}

fn safe(t: &Tensor) -> bool {
    let (lo, hi) = (pow2(-SAFE_EXP), pow2(SAFE_EXP));
    t.data().iter().all(|&v| v == 0.0 || (v.is_finite() && (lo..=hi).contains(&v.abs())))
}

/// A candidate case; `None` when some intermediate leaves the safe range.
fn candidate(rng: &mut ChaCha8Rng) -> Option<Case> {
    let n = rng.random_range(1..=4);
    let n_inputs = rng.random_range(1..=3);
    let backward = rng.random_bool(1.0 / 3.0);
    let t = Tracer::new();
    let ty = ValueType::new([n, n], DType::F64);
    let inputs: Vec<Var> = (0..n_inputs).map(|_| t.input(ty.clone())).collect();
    let mut b = Builder {
        rng,
        pool: inputs
            .iter()
            .map(|v| Val {
                v: v.clone(),
                depth: 0,
                positive: false,
            })
            .collect(),
        n,
        backward,
    };
    let ops = b.rng.random_range(2..=16);
    for _ in 0..ops {
        if !b.step(&t) {
            break;
        }
    }
    let last = b.pool.last().expect("inputs").v.clone();
    let mut outs = vec![last.clone()];
    if b.pool.len() > n_inputs + 1 && b.rng.random_bool(0.5) {
        let k = b.rng.random_range(n_inputs..b.pool.len());
        outs.push(b.pool[k].v.clone());
    }
    let graph = if backward {
        let g = t.finish(&[last.sum_all()]).ok()?;
        grad(&g, &GradSpec::wrt(0..n_inputs)).ok()?
    } else {
        t.finish(&outs).ok()?
    };

    let rng = b.rng;
    let mut kinds = Vec::new();
    let mut scaled = Vec::new();
    let mut plain = Vec::new();
    for _ in 0..n_inputs {
        let mag = rng.random_range(-4..=4);
        let x = Tensor::randn([n, n], 0.0, pow2(mag), DType::F64, rng);
        if rng.random_bool(0.85) {
            // scale unrelated to the magnitude, so data need not be unit
            let e = rng.random_range(-12..=12);
            let data = x.map(|v| v * pow2(-e));
            kinds.push(InputKind::Scaled);
            scaled.push(Array::Scaled(ScaledArray::new(data, E8M0Scale::Pow2(e))));
        } else {
            kinds.push(InputKind::Plain);
            scaled.push(Array::Plain(x.clone()));
        }
        plain.push(x);
    }
    let mut ok = plain.iter().all(safe);
    let res = eval_observed(&graph, &plain, &mut |_, outs| {
        ok &= outs.iter().all(safe);
        Ok(())
    });
    if res.is_err() || !ok {
        return None;
    }
    Some(Case {
        graph,
        kinds,
        inputs: scaled,
        plain,
        backward,
    })
}

/// Next accepted case from `rng`.
pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    loop {
        if let Some(c) = candidate(rng) {
            return c;
        }
    }
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()))
}

/// Scalify `case` and compare its outputs with the source graph bit for bit.
pub fn check_case(case: &Case) -> Result<ScalifiedGraph, String> {
    let sg = scalify(&case.graph, &case.kinds).map_err(|e| format!("scalify failed: {e}"))?;
    let expect = crate::graph::eval(&case.graph, &case.plain).map_err(|e| format!("eval failed: {e}"))?;
    let got = sg.eval(&case.inputs).map_err(|e| format!("scaled eval failed: {e}"))?;
    for (i, (e, g)) in expect.iter().zip(&got).enumerate() {
        let g = g.to_tensor();
        if !same_bits(e, &g) {
            return Err(format!("output {i} differs:\n  plain  {:?}\n  scaled {:?}", e.data(), g.data()));
        }
    }
    Ok(sg)
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub cases: usize,
    pub backward_cases: usize,
    pub failures: Vec<String>,
    /// Source primitives seen, by name.
    pub primitives: BTreeMap<String, usize>,
    /// Scale rules applied, by name.
    pub rules: BTreeMap<String, usize>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Run `n` random cases derived from `seed`.
pub fn check_random_graphs(n: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport::default();
    for i in 0..n {
        let case = random_case(&mut rng);
        report.cases += 1;
        report.backward_cases += case.backward as usize;
        for (p, c) in case.graph.op_histogram() {
            *report.primitives.entry(p).or_default() += c;
        }
        match check_case(&case) {
            Ok(sg) => {
                for (r, c) in &sg.diagnostics.rule_counts {
                    *report.rules.entry(r.clone()).or_default() += c;
                }
            }
            Err(e) => report.failures.push(format!("case {i}: {e}\n{}", case.graph)),
        }
    }
    report
}
