use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::Batcher;
use super::report;
use crate::autodiff::{grad, GradSpec};
use crate::error::{Error, Result};
use crate::graph::{eval, eval_observed, trace, Graph, Tracer, ValueType, Var};
use crate::nn::{cast_to, init_params, lr_input, one_hot, AdamConfig, AdamState, Transformer, LAYERNORM_BWD_TAG};
use crate::numerics::{floor_log2, pow2, DType, E8M0Scale};
use crate::scalify::{scalify_with, EpsPlacement, InputKind, ScaleRules, ScalifiedGraph};
use crate::tensor::{Array, ScaledArray, Tensor};

/// Tag of the optional per-step gradient rescaling.
pub const GRADS_TAG: &str = "grads";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Number of scaled tensors summarized.
    pub tensors: usize,
}

impl RmsSummary {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        Some(RmsSummary {
            min,
            max,
            mean: sum / values.len() as f64,
            tensors: values.len(),
        })
    }
}

/// Telemetry of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// RMS of the data of every scaled intermediate; absent for plain runs.
    pub rms: Option<RmsSummary>,
    /// Scale exponent of every parameter after the step; `null` for plain
    /// or ANY_SCALE parameters.
    pub scale_exponents: BTreeMap<String, Option<i32>>,
    pub fallback_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub step: usize,
    pub last_good_step: Option<usize>,
    /// First non-finite tensor of the failing step.
    pub tensor: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub steps_requested: usize,
    pub steps_completed: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Mean loss over the last tenth of the completed steps.
    pub tail_loss: Option<f64>,
    pub rule_usage: BTreeMap<String, usize>,
    pub fallback_count: usize,
    pub rescale_sites: BTreeMap<String, usize>,
    pub blocks: usize,
    pub layernorm_rescale_sites_per_block: f64,
    pub aborted: Option<Abort>,
}

/// Mean of the last `max(1, n / 10)` losses.
pub fn tail_mean(losses: &[f64]) -> Option<f64> {
    if losses.is_empty() {
        return None;
    }
    let k = (losses.len() / 10).max(1);
    Some(losses[losses.len() - k..].iter().sum::<f64>() / k as f64)
}

/// The traced training step: loss, gradients and Adam.
///
/// Inputs: params, m, v (each in parameter order), x, y, lr, bc1, bc2.
/// Outputs: loss, params', m', v'.
pub struct StepGraph {
    pub graph: Graph,
    pub paths: Vec<String>,
    pub model: Transformer,
}

impl StepGraph {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let prec = cfg.precision();
        let model = Transformer::new(cfg.model.clone(), prec, cfg.dynamic_rescaling.layernorm_bwd);
        let specs = model.param_specs();
        let n = specs.len();
        let mut types: Vec<ValueType> = specs.iter().map(|s| ValueType::new(s.shape.clone(), prec.master)).collect();
        let io = ValueType::new([cfg.model.tokens(), cfg.model.vocab], DType::F32);
        types.extend([io.clone(), io.clone()]);
        let loss = trace(&types, |v| vec![model.loss(&v[..n], &v[n], &v[n + 1])])?;
        let grads = grad(&loss, &GradSpec::wrt(0..n))?;

        let t = Tracer::new();
        let state = |dt: DType| -> Vec<Var> {
            specs.iter().map(|s| t.input(ValueType::new(s.shape.clone(), dt))).collect()
        };
        let p = state(prec.master);
        let m = state(prec.optimizer);
        let v = state(prec.optimizer);
        let x = t.input(io.clone());
        let y = t.input(io);
        let scalar = || t.input(ValueType::scalar(DType::F32));
        let (lr, bc1, bc2) = (scalar(), scalar(), scalar());
        let args: Vec<&Var> = p.iter().chain([&x, &y]).collect();
        let outs = t.inline(&grads, &args);
        let adam = AdamConfig::default();
        let mut new = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
        for i in 0..n {
            let mut g = outs[1 + i].clone();
            if cfg.dynamic_rescaling.grads {
                g = g.dynamic_rescale_l2(GRADS_TAG);
            }
            let g = cast_to(&g, prec.grad);
            let (a, b, c) = adam.trace_update(&p[i], &m[i], &v[i], &g, &lr, &bc1, &bc2, prec.optimizer);
            new[0].push(a);
            new[1].push(b);
            new[2].push(c);
        }
        let mut all = vec![outs[0].clone()];
        all.extend(new.concat());
        let graph = t.finish(&all)?;
        Ok(StepGraph {
            graph,
            paths: specs.into_iter().map(|s| s.path).collect(),
            model,
        })
    }

    pub fn num_params(&self) -> usize {
        self.paths.len()
    }

    /// Scaled slots for everything but the bias corrections.
    pub fn input_kinds(&self) -> Vec<InputKind> {
        let mut k = vec![InputKind::Scaled; 3 * self.num_params() + 3];
        k.extend([InputKind::Plain, InputKind::Plain]);
        k
    }
}

/// Divide the data by the power of two at or below its RMS, moving the
/// factor into the scale. Leaves zero or non-finite data alone.
pub fn rebalance_l2(x: &ScaledArray) -> ScaledArray {
    let rms = x.data.rms();
    let E8M0Scale::Pow2(e0) = x.scale else {
        return x.clone();
    };
    if !(rms.is_finite() && rms > 0.0) {
        return x.clone();
    }
    let e = floor_log2(rms).clamp(E8M0Scale::MIN_EXP - e0, E8M0Scale::MAX_EXP - e0);
    let inv = pow2(-e);
    let data = Tensor::new(
        x.data.shape().to_vec(),
        x.data.dtype(),
        x.data.data().iter().map(|v| v * inv).collect(),
    )
    .expect("same shape");
    ScaledArray::new(data, E8M0Scale::Pow2(e0 + e))
}

enum Outcome {
    Ok(StepRecord),
    Abort(Abort, String),
}

/// Training loop state.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub step_graph: StepGraph,
    pub program: Option<ScalifiedGraph>,
    pub params: Vec<Array>,
    pub opt: AdamState,
    batcher: Batcher,
    adam: AdamConfig,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let step_graph = StepGraph::build(cfg)?;
        let program = if cfg.scalify {
            let rules = match cfg.layer_norm_eps {
                EpsPlacement::Data => ScaleRules::builtin(),
                EpsPlacement::Logical => ScaleRules::exact(),
            };
            Some(scalify_with(&step_graph.graph, &step_graph.input_kinds(), &rules)?)
        } else {
            None
        };
        let prec = cfg.precision();
        let specs = step_graph.model.param_specs();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = init_params(&specs, prec.master, &mut rng);
        let params = init
            .into_iter()
            .map(|p| {
                if cfg.scalify {
                    Array::Scaled(p)
                } else {
                    Array::Plain(p.to_tensor().cast(prec.master, Default::default()))
                }
            })
            .collect();
        let shapes: Vec<Vec<usize>> = specs.iter().map(|s| s.shape.clone()).collect();
        let m = &cfg.model;
        Ok(Trainer {
            batcher: Batcher::new(&cfg.data, m.vocab, m.batch, m.seq_len, cfg.seed.wrapping_add(0x9e37_79b9))?,
            opt: AdamState::zeros(&shapes, prec.optimizer, cfg.scalify),
            cfg: cfg.clone(),
            step_graph,
            program,
            params,
            adam: AdamConfig::default(),
            step: 0,
        })
    }

    pub fn paths(&self) -> &[String] {
        &self.step_graph.paths
    }

    fn inputs(&mut self) -> (Vec<Array>, f64) {
        let m = &self.cfg.model;
        let (xt, yt) = self.batcher.next_batch();
        let lr = self.cfg.lr.at(self.step, self.cfg.steps);
        let (bc1, bc2) = self.adam.bias_corrections(self.step as u64 + 1);
        let mut inputs = self.params.clone();
        inputs.extend(self.opt.m.iter().cloned());
        inputs.extend(self.opt.v.iter().cloned());
        inputs.push(one_hot(&xt, m.vocab, DType::F32).into());
        inputs.push(one_hot(&yt, m.vocab, DType::F32).into());
        inputs.push(lr_input(lr, self.cfg.scalify));
        inputs.push(Tensor::scalar(bc1, DType::F32).into());
        inputs.push(Tensor::scalar(bc2, DType::F32).into());
        (inputs, lr)
    }

    fn run_step(&mut self) -> Result<Outcome> {
        let (inputs, lr) = self.inputs();
        let mut rms = Vec::new();
        let result = match &self.program {
            Some(p) => p.eval_observed(&inputs, &mut |o| {
                if !o.any && o.numel > 0 {
                    rms.push(o.data_rms);
                }
            }),
            None => {
                let plain: Vec<Tensor> = inputs.iter().map(Array::to_tensor).collect();
                eval(&self.step_graph.graph, &plain).map(|v| v.into_iter().map(Array::Plain).collect())
            }
        };
        let mut outs = match result {
            Ok(o) => o,
            Err(e @ (Error::NotPow2 { .. } | Error::ScaleRange { .. } | Error::Transform(_))) => {
                let dump = self.locate_non_finite(&inputs);
                return Ok(Outcome::Abort(self.abort("scale discipline violated", e.to_string()), dump));
            }
            Err(e) => return Err(e),
        };
        let n = self.step_graph.num_params();
        let loss = outs[0].to_tensor().item();
        let paths = &self.step_graph.paths;
        let bad = if !loss.is_finite() {
            Some("loss".to_string())
        } else {
            (0..n)
                .find(|&i| !outs[1 + n + i].to_tensor().all_finite())
                .map(|i| format!("grad/{}", paths[i]))
                .or_else(|| {
                    (0..n)
                        .find(|&i| !outs[1 + i].to_tensor().all_finite())
                        .map(|i| format!("param/{}", paths[i]))
                })
        };
        if let Some(tensor) = bad {
            let dump = self.locate_non_finite(&inputs);
            return Ok(Outcome::Abort(self.abort(&format!("non-finite loss {loss}"), tensor), dump));
        }
        let v = outs.split_off(1 + 2 * n);
        let m = outs.split_off(1 + n);
        self.params = outs.split_off(1);
        self.opt.m = m;
        self.opt.v = v;
        self.opt.step += 1;
        if let Some(every) = self.cfg.dynamic_rescaling.state_every {
            if (self.step + 1).is_multiple_of(every) {
                for p in &mut self.params {
                    if let Array::Scaled(s) = p {
                        *s = rebalance_l2(s);
                    }
                }
            }
        }
        let scale_exponents = paths
            .iter()
            .zip(&self.params)
            .map(|(path, p)| (path.clone(), p.as_scaled().and_then(|s| s.scale.exponent())))
            .collect();
        let record = StepRecord {
            step: self.step,
            loss,
            lr,
            rms: RmsSummary::of(&rms),
            scale_exponents,
            fallback_count: self.program.as_ref().map_or(0, |p| p.diagnostics.fallback_count),
        };
        self.step += 1;
        Ok(Outcome::Ok(record))
    }

    fn abort(&self, reason: &str, tensor: String) -> Abort {
        Abort {
            step: self.step,
            last_good_step: self.step.checked_sub(1),
            tensor,
            reason: reason.to_string(),
        }
    }

    /// Re-run the failing step and describe the first value holding NaN,
    /// falling back to the first one holding an infinity.
    fn locate_non_finite(&self, inputs: &[Array]) -> String {
        let (g, flat) = match &self.program {
            Some(p) => match p.flatten_inputs(inputs) {
                Ok(f) => (&p.graph, f),
                Err(e) => return format!("could not re-run the step: {e}"),
            },
            None => (&self.step_graph.graph, inputs.iter().map(Array::to_tensor).collect()),
        };
        let mut nan: Option<String> = None;
        let mut inf: Option<String> = None;
        let describe = |i: usize, t: &Tensor| {
            let n = &g.nodes()[i];
            format!("node #{i} `{}` producing {}{:?}", n.op.name(), t.dtype(), t.shape())
        };
        let res = eval_observed(g, &flat, &mut |i, outs| {
            for t in outs {
                if nan.is_none() && t.data().iter().any(|v| v.is_nan()) {
                    nan = Some(describe(i, t));
                }
                let is_const = matches!(g.nodes()[i].op, crate::graph::Op::Const(_));
                if inf.is_none() && !is_const && t.data().iter().any(|v| v.is_infinite()) {
                    inf = Some(describe(i, t));
                }
            }
            Ok(())
        });
        let mut out = String::new();
        if let Err(e) = res {
            out.push_str(&format!("re-run stopped: {e}\n"));
        }
        match (nan, inf) {
            (Some(s), _) => out.push_str(&format!("first NaN: {s}\n")),
            (None, Some(s)) => out.push_str(&format!("first infinity: {s}\n")),
            (None, None) => out.push_str("no non-finite intermediate found\n"),
        }
        out
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<StepRecord>,
    pub summary: Summary,
    pub paths: Vec<String>,
    pub params: Vec<Array>,
    /// Text of the diagnostics dump, present when the run aborted.
    pub diagnostics: Option<String>,
}

impl RunResult {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Train for `cfg.steps` steps, writing telemetry into `out` when given.
///
/// Configuration problems are errors; a numerical blow-up ends the run early
/// with `summary.aborted` set and a diagnostics dump.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunResult> {
    let mut tr = Trainer::new(cfg)?;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut aborted = None;
    let mut dump = None;
    log::info!("{}: {} parameters, {} steps", cfg.name, tr.paths().len(), cfg.steps);
    for _ in 0..cfg.steps {
        match tr.run_step()? {
            Outcome::Ok(r) => {
                log::debug!("step {} loss {:.5} lr {:.3e}", r.step, r.loss, r.lr);
                if r.step % 50 == 0 {
                    log::info!("step {} loss {:.4}", r.step, r.loss);
                }
                records.push(r);
            }
            Outcome::Abort(a, text) => {
                log::error!("aborted at step {}: {} ({})", a.step, a.reason, a.tensor);
                let mut d = format!(
                    "run `{}` aborted at step {}\nreason: {}\nfirst non-finite tensor: {}\nlast good step: {}\n",
                    cfg.name,
                    a.step,
                    a.reason,
                    a.tensor,
                    a.last_good_step.map_or("none".into(), |s| s.to_string())
                );
                d.push_str(&text);
                if let Some(p) = &tr.program {
                    d.push_str(&format!("\nscalify diagnostics:\n{}", p.diagnostics));
                }
                aborted = Some(a);
                dump = Some(d);
                break;
            }
        }
    }
    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let diag = tr.program.as_ref().map(|p| &p.diagnostics);
    let rescale_sites = diag.map(|d| d.rescale_sites.clone()).unwrap_or_default();
    let blocks = cfg.model.layers;
    let summary = Summary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        steps_requested: cfg.steps,
        steps_completed: records.len(),
        initial_loss: losses.first().copied(),
        final_loss: losses.last().copied(),
        tail_loss: tail_mean(&losses),
        rule_usage: diag.map(|d| d.rule_counts.clone()).unwrap_or_default(),
        fallback_count: diag.map_or(0, |d| d.fallback_count),
        layernorm_rescale_sites_per_block: rescale_sites.get(LAYERNORM_BWD_TAG).copied().unwrap_or(0) as f64
            / blocks as f64,
        rescale_sites,
        blocks,
        aborted,
    };
    let result = RunResult {
        records,
        summary,
        paths: tr.paths().to_vec(),
        params: tr.params,
        diagnostics: dump,
    };
    if let Some(dir) = out {
        report::write_run(dir, &result)?;
    }
    Ok(result)
}
