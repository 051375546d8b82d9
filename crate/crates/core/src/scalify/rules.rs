use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use super::{SValue, Transformer};
use crate::error::{Error, Result};
use crate::graph::composites::{
    Activation, ActivationGrad, DynamicRescaleL2, EpsPlacement, LayerNorm, LayerNormGrad, ScaledActivation,
    ScaledActivationGrad, ScaledLayerNorm, ScaledLayerNormGrad, ScaledSoftmax, ScaledSoftmaxGrad,
    Softmax, SoftmaxGrad,
};
use crate::graph::{CompositeOp, ValueType, Var};
use crate::numerics::{floor_log2, pow2, DType};

/// Scale rule for a composite: maps operand values to output values.
pub type CompositeRule =
    Arc<dyn Fn(&mut RuleCtx<'_>, &dyn CompositeOp, &[SValue]) -> Result<Vec<SValue>> + Send + Sync>;

/// Mutable rule table; [`ScaleRegistry::freeze`] turns it into shareable [`ScaleRules`].
#[derive(Default)]
pub struct ScaleRegistry {
    rules: HashMap<String, CompositeRule>,
}

impl ScaleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        Self::with_builtins_placing(EpsPlacement::Data)
    }

    /// Built-in rules with a chosen layer-norm eps placement.
    pub fn with_builtins_placing(placement: EpsPlacement) -> Self {
        let mut r = Self::new();
        for (name, rule) in builtin_rules(placement) {
            r.register(name, rule).expect("built-in names are unique");
        }
        r
    }

    /// Registering a name twice is an error.
    pub fn register(&mut self, name: &str, rule: CompositeRule) -> Result<()> {
        if self.rules.contains_key(name) {
            return Err(Error::Transform(format!("a scale rule for `{name}` is already registered")));
        }
        self.rules.insert(name.to_string(), rule);
        Ok(())
    }

    pub fn freeze(self) -> ScaleRules {
        ScaleRules(Arc::new(self.rules))
    }
}

/// Frozen rule table; cheap to clone and safe to share between threads.
#[derive(Clone)]
pub struct ScaleRules(Arc<HashMap<String, CompositeRule>>);

impl ScaleRules {
    pub fn builtin() -> Self {
        static RULES: OnceLock<ScaleRules> = OnceLock::new();
        RULES.get_or_init(|| ScaleRegistry::with_builtins().freeze()).clone()
    }

    /// Built-ins whose layer norm keeps eps on the logical value, making every
    /// rule an exact rewrite.
    pub fn exact() -> Self {
        static RULES: OnceLock<ScaleRules> = OnceLock::new();
        RULES
            .get_or_init(|| ScaleRegistry::with_builtins_placing(EpsPlacement::Logical).freeze())
            .clone()
    }

    pub fn get(&self, name: &str) -> Option<&CompositeRule> {
        self.0.get(name)
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.0.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

/// Handle given to composite rules for emitting nodes into the transformed graph.
pub struct RuleCtx<'a> {
    tr: &'a mut Transformer,
    out_types: &'a [ValueType],
    rule: Option<String>,
}

impl<'a> RuleCtx<'a> {
    pub(crate) fn new(tr: &'a mut Transformer, out_types: &'a [ValueType]) -> Self {
        RuleCtx {
            tr,
            out_types,
            rule: None,
        }
    }

    pub(crate) fn rule_override(&mut self) -> Option<String> {
        self.rule.take()
    }

    /// Type the original node declared for output `i`.
    pub fn out_type(&self, i: usize) -> &ValueType {
        &self.out_types[i]
    }

    pub fn out_dtype(&self) -> DType {
        self.out_types[0].dtype
    }

    /// The shared `f32` constant 1 used as a scale.
    pub fn one(&mut self) -> Var {
        self.tr.one()
    }

    pub fn scalar_f32(&self, c: f64) -> Var {
        self.tr.f32(c)
    }

    /// `(data, scale, any)` view of a value; plain values get scale 1, or a
    /// power-of-two split when they are known scalars.
    pub fn lift(&mut self, v: &SValue) -> (Var, Var, bool) {
        self.tr.lift(v)
    }

    /// Logical value computed in the wide carrier.
    pub fn unscale(&mut self, v: &SValue) -> Var {
        self.tr.unscale(v)
    }

    /// Rename the rule in diagnostics.
    pub fn note(&mut self, rule: &str) {
        self.rule = Some(rule.to_string());
    }

    pub fn count_fallback(&mut self) {
        self.tr.diag.fallback_count += 1;
    }

    pub fn record_rescale(&mut self, tag: &str) {
        *self.tr.diag.rescale_sites.entry(tag.to_string()).or_insert(0) += 1;
    }

    /// Apply the default treatment: inline the composite's decomposition.
    pub fn decompose(&mut self, op: &dyn CompositeOp, args: &[SValue]) -> Result<Vec<SValue>> {
        self.tr.decompose(op, args)
    }
}

fn downcast<T: 'static>(op: &dyn CompositeOp) -> Result<&T> {
    op.as_any()
        .downcast_ref::<T>()
        .ok_or_else(|| Error::Transform(format!("rule registered for `{}` got a different op", op.name())))
}

fn rule(f: impl Fn(&mut RuleCtx<'_>, &dyn CompositeOp, &[SValue]) -> Result<Vec<SValue>> + Send + Sync + 'static) -> CompositeRule {
    Arc::new(f)
}

fn scaled(data: Var, scale: Var, any: bool) -> Vec<SValue> {
    vec![SValue::Scaled { data, scale, any }]
}

fn builtin_rules(placement: EpsPlacement) -> Vec<(&'static str, CompositeRule)> {
    // activations x * g(x): gate evaluated on the logical value, same output scale
    let act = rule(|ctx, op, args| {
        let kind = downcast::<Activation>(op)?.kind;
        let (xd, xs, any) = ctx.lift(&args[0]);
        let y = xd.composite_as(Arc::new(ScaledActivation { kind }), &[&xs], ctx.out_dtype());
        Ok(scaled(y, xs, any))
    });
    // f' is bounded, so the cotangent keeps its scale
    let act_grad = rule(|ctx, op, args| {
        let kind = downcast::<ActivationGrad>(op)?.kind;
        let (xd, xs, _) = ctx.lift(&args[0]);
        let (cd, cs, cany) = ctx.lift(&args[1]);
        let y = xd.composite_as(Arc::new(ScaledActivationGrad { kind }), &[&xs, &cd], ctx.out_dtype());
        Ok(scaled(y, cs, cany))
    });
    let layer_norm = rule(move |ctx, op, args| {
        let eps = downcast::<LayerNorm>(op)?.eps;
        let (xd, xs, _) = ctx.lift(&args[0]);
        let y = xd.composite_as(Arc::new(ScaledLayerNorm { eps, placement }), &[&xs], ctx.out_dtype());
        let one = ctx.one();
        Ok(scaled(y, one, false))
    });
    let layer_norm_grad = rule(move |ctx, op, args| {
        let eps = downcast::<LayerNormGrad>(op)?.eps;
        let (xd, xs, _) = ctx.lift(&args[0]);
        let (cd, cs, cany) = ctx.lift(&args[1]);
        let y = xd.composite_as(Arc::new(ScaledLayerNormGrad { eps, placement }), &[&xs, &cd], ctx.out_dtype());
        let s = if cany { ctx.one() } else { cs.div_as(&xs, DType::F32) };
        Ok(scaled(y, s, cany))
    });
    let softmax = rule(|ctx, op, args| {
        let log = downcast::<Softmax>(op)?.log;
        let (xd, xs, _) = ctx.lift(&args[0]);
        let y = xd.composite_as(Arc::new(ScaledSoftmax { log }), &[&xs], ctx.out_dtype());
        let one = ctx.one();
        Ok(scaled(y, one, false))
    });
    let softmax_grad = rule(|ctx, op, args| {
        let log = downcast::<SoftmaxGrad>(op)?.log;
        let (yd, ys, _) = ctx.lift(&args[0]);
        let (cd, cs, cany) = ctx.lift(&args[1]);
        let g = yd.composite_as(Arc::new(ScaledSoftmaxGrad { log }), &[&ys, &cd], ctx.out_dtype());
        if cany {
            let one = ctx.one();
            return Ok(scaled(g, one, true));
        }
        if log {
            return Ok(scaled(g, cs, false));
        }
        // probabilities are about 1/n each, and so is the cotangent they gate
        let n = *yd.shape().last().unwrap_or(&1);
        let k = floor_log2(n.max(1) as f64);
        if k == 0 {
            return Ok(scaled(g, ys.mul_as(&cs, DType::F32), false));
        }
        let up = ctx.scalar_f32(pow2(k));
        let down = ctx.scalar_f32(pow2(-k));
        let s = ys.mul_as(&cs, DType::F32).mul_as(&down, DType::F32);
        Ok(scaled(g.mul_as(&up.broadcast_to(&g.shape()), ctx.out_dtype()), s, false))
    });
    let dynamic_rescale = rule(|ctx, op, args| {
        let tag = &downcast::<DynamicRescaleL2>(op)?.tag;
        match &args[0] {
            SValue::Plain { .. } | SValue::Scaled { any: true, .. } => {
                ctx.note("dynamic_rescale_noop");
                Ok(vec![args[0].clone()])
            }
            SValue::Scaled { data, scale, .. } => {
                ctx.record_rescale(tag);
                let n = data.ty().numel().max(1) as f64;
                let sq = data.mul_as(data, DType::F64);
                let axes: Vec<usize> = (0..data.rank()).collect();
                let ms = sq.sum_as(&axes, DType::F64) / n;
                let f = ms.sqrt().pow2_round_down();
                Ok(scaled(data.div_as(&f, ctx.out_dtype()), scale.mul_as(&f, DType::F32), false))
            }
        }
    });
    let identity = rule(|_, _, args| Ok(vec![args[0].clone()]));

    vec![
        ("relu", act.clone()),
        ("gelu", act.clone()),
        ("swish", act),
        ("relu_grad", act_grad.clone()),
        ("gelu_grad", act_grad.clone()),
        ("swish_grad", act_grad),
        ("layer_norm", layer_norm),
        ("layer_norm_grad", layer_norm_grad),
        ("softmax", softmax.clone()),
        ("log_softmax", softmax),
        ("softmax_grad", softmax_grad.clone()),
        ("log_softmax_grad", softmax_grad),
        ("dynamic_rescale_l2", dynamic_rescale),
        ("rescale_on_backward", identity.clone()),
        ("cast_on_backward", identity),
    ]
}
