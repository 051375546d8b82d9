use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{attention, cast_to, cross_entropy, layer_norm_rescaled, linear, mlp, AttentionWeights, LinearConfig, LN_EPS};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::numerics::{floor_log2, DType, E8M0Scale};
use crate::tensor::{ScaledArray, Tensor};

/// Tag of the dynamic rescaling applied to layer-norm input cotangents.
pub const LAYERNORM_BWD_TAG: &str = "layernorm_bwd";

/// Shape of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Sequences per step.
    pub batch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            dim: 64,
            heads: 4,
            vocab: 256,
            seq_len: 64,
            batch: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.layers, self.dim, self.heads, self.vocab, self.seq_len, self.batch];
        if positive.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config("layer norm needs dim >= 2".into()));
        }
        Ok(())
    }

    /// Tokens per step.
    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Number formats of the model and its training state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precision {
    /// Matmul operands on the forward pass.
    pub matmul: DType,
    /// Stored parameters.
    pub master: DType,
    /// Backward cotangents through linear layers and parameter gradients.
    pub grad: DType,
    /// Adam moments.
    pub optimizer: DType,
}

impl Precision {
    pub fn wide(dt: DType) -> Self {
        Precision {
            matmul: dt,
            master: dt,
            grad: dt,
            optimizer: dt,
        }
    }

    /// Format of activations and elementwise work: the matmul format, widened
    /// to FP16 when that is an 8-bit format.
    pub fn compute(&self) -> DType {
        if matches!(self.matmul, DType::E4M3 | DType::E5M2) {
            DType::F16
        } else {
            self.matmul
        }
    }

    pub fn linear(&self) -> LinearConfig {
        LinearConfig {
            forward_act_fmt: self.matmul,
            forward_weight_fmt: self.matmul,
            backward_grad_fmt: self.grad,
            output_fmt: self.compute(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, 1)` data with scale `2^exp`.
    Normal { exp: i32 },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// `1 / sqrt(fan_in)` rounded to a power of two, as an exponent.
fn fan_in_exp(fan_in: usize) -> i32 {
    -(floor_log2(fan_in as f64) / 2)
}

/// Parameters in the order the model consumes them.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, v) = (cfg.dim, cfg.vocab);
    let mut out = Vec::new();
    let mut push = |path: String, shape: Vec<usize>, init| out.push(ParamSpec { path, shape, init });
    let weight = |fan_in| Init::Normal { exp: fan_in_exp(fan_in) };
    push("embed".into(), vec![v, d], Init::Normal { exp: 0 });
    push("pos".into(), vec![cfg.seq_len, d], Init::Normal { exp: 0 });
    for i in 0..cfg.layers {
        let p = |s: &str| format!("blocks.{i}.{s}");
        push(p("ln1.gamma"), vec![d], Init::Ones);
        push(p("ln1.beta"), vec![d], Init::Zeros);
        for w in ["wq", "wk", "wv", "wo"] {
            push(p(&format!("attn.{w}")), vec![d, d], weight(d));
        }
        push(p("ln2.gamma"), vec![d], Init::Ones);
        push(p("ln2.beta"), vec![d], Init::Zeros);
        push(p("mlp.w1"), vec![d, 4 * d], weight(d));
        push(p("mlp.b1"), vec![4 * d], Init::Zeros);
        push(p("mlp.w2"), vec![4 * d, d], weight(4 * d));
        push(p("mlp.b2"), vec![d], Init::Zeros);
    }
    push("ln_f.gamma".into(), vec![d], Init::Ones);
    push("ln_f.beta".into(), vec![d], Init::Zeros);
    push("head.w".into(), vec![d, v], weight(d));
    out
}

/// Initial parameters with the scales the initializer knows: Gaussian data
/// in `dtype` paired with `2^exp`; ones and zeros get scale 1.
pub fn init_params<R: Rng + ?Sized>(specs: &[ParamSpec], dtype: DType, rng: &mut R) -> Vec<ScaledArray> {
    specs
        .iter()
        .map(|s| match s.init {
            Init::Normal { exp } => {
                ScaledArray::new(Tensor::randn(s.shape.clone(), 0.0, 1.0, dtype, rng), E8M0Scale::Pow2(exp))
            }
            Init::Ones => ScaledArray::new(Tensor::full(s.shape.clone(), 1.0, dtype), E8M0Scale::ONE),
            Init::Zeros => ScaledArray::new(Tensor::zeros(s.shape.clone(), dtype), E8M0Scale::ONE),
        })
        .collect()
}

/// The transformer's forward graph builder.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub cfg: ModelConfig,
    pub precision: Precision,
    /// Rescale layer-norm input cotangents in every block.
    pub rescale_layernorm_bwd: bool,
}

impl Transformer {
    pub fn new(cfg: ModelConfig, precision: Precision, rescale_layernorm_bwd: bool) -> Self {
        Transformer {
            cfg,
            precision,
            rescale_layernorm_bwd,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        param_specs(&self.cfg)
    }

    /// Mean next-token cross entropy. `params` follow [`param_specs`];
    /// `x` and `y` are one-hot `[batch * seq, vocab]`.
    pub fn loss(&self, params: &[Var], x: &Var, y: &Var) -> Var {
        let logits = self.logits(params, x);
        cross_entropy(&logits, y)
    }

    pub fn logits(&self, params: &[Var], x: &Var) -> Var {
        let c = &self.cfg;
        let dt = self.precision.compute();
        let lin = self.precision.linear();
        let tag = self.rescale_layernorm_bwd.then_some(LAYERNORM_BWD_TAG);
        let mut p = params.iter();
        let mut next = || p.next().expect("one Var per parameter");
        let n = c.tokens();

        let tok = cast_to(x, dt).matmul_as(next(), dt);
        let pos = cast_to(next(), dt);
        let mut h = tok
            .reshape(&[c.batch, c.seq_len, c.dim])
            .add_as(&pos, dt)
            .reshape(&[n, c.dim]);
        for _ in 0..c.layers {
            let (g1, b1) = (next(), next());
            let a = layer_norm_rescaled(&h, g1, b1, LN_EPS, tag);
            let w = AttentionWeights {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
            };
            h = h.add_as(&attention(&a, &w, c.batch, c.seq_len, c.heads, &lin), dt);
            let (g2, b2) = (next(), next());
            let m = layer_norm_rescaled(&h, g2, b2, LN_EPS, tag);
            let (w1, c1, w2, c2) = (next(), next(), next(), next());
            h = h.add_as(&mlp(&m, w1, c1, w2, c2, &lin), dt);
        }
        let (gf, bf) = (next(), next());
        let h = layer_norm_rescaled(&h, gf, bf, LN_EPS, None);
        linear(&h, next(), None, &lin)
    }
}

/// A small perceptron with GELU hidden layers and loss `mean(out * target)`,
/// used to exercise the transforms away from the transformer.
pub fn mlp_loss(x: &Var, weights: &[Var], target: &Var) -> Var {
    let mut h = x.clone();
    for (i, w) in weights.iter().enumerate() {
        h = h.matmul(w);
        if i + 1 < weights.len() {
            h = h.gelu();
        }
    }
    let n = h.shape().iter().product::<usize>() as f64;
    (&h * target).sum_all() * (1.0 / n)
}

/// One-hot rows for `tokens`.
pub fn one_hot(tokens: &[usize], vocab: usize, dtype: DType) -> Tensor {
    let mut data = vec![0.0; tokens.len() * vocab];
    for (r, &t) in tokens.iter().enumerate() {
        data[r * vocab + t] = 1.0;
    }
    Tensor::new([tokens.len(), vocab], dtype, data).expect("one-hot shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{eval, trace, ValueType};
    use crate::scalify::{scalify_with, InputKind, ScaleRules};
    use crate::tensor::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            vocab: 16,
            seq_len: 4,
            batch: 1,
        }
    }

    fn loss_graph(m: &Transformer) -> crate::graph::Graph {
        let specs = m.param_specs();
        let dt = m.precision.master;
        let mut types: Vec<ValueType> = specs.iter().map(|s| ValueType::new(s.shape.clone(), dt)).collect();
        let io = ValueType::new([m.cfg.tokens(), m.cfg.vocab], DType::F32);
        types.push(io.clone());
        types.push(io);
        let n = specs.len();
        trace(&types, |v| vec![m.loss(&v[..n], &v[n], &v[n + 1])]).unwrap()
    }

    #[test]
    fn specs_are_congruent_with_the_model() {
        let specs = param_specs(&ModelConfig::default());
        assert_eq!(specs.len(), 2 + 2 * 12 + 3);
        assert_eq!(specs[2].path, "blocks.0.ln1.gamma");
        assert_eq!(specs.last().unwrap().path, "head.w");
        let mlp_w2 = specs.iter().find(|s| s.path == "blocks.1.mlp.w2").unwrap();
        assert_eq!(mlp_w2.init, Init::Normal { exp: -4 });
    }

    #[test]
    fn zeros_forward_gives_finite_loss() {
        let m = Transformer::new(tiny(), Precision::wide(DType::F32), true);
        let g = loss_graph(&m);
        let args: Vec<_> = g.input_types().iter().map(|t| Tensor::zeros(t.shape.clone(), t.dtype)).collect();
        let loss = eval(&g, &args).unwrap()[0].item();
        assert!(loss.is_finite());
        // zero targets make the loss exactly zero
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn untrained_loss_is_near_log_vocab() {
        let m = Transformer::new(tiny(), Precision::wide(DType::F32), false);
        let g = loss_graph(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut args: Vec<Tensor> = init_params(&m.param_specs(), DType::F32, &mut rng)
            .iter()
            .map(|p| p.to_tensor().cast(DType::F32, Default::default()))
            .collect();
        let tokens: Vec<usize> = (0..m.cfg.tokens()).map(|i| (i * 5) % 16).collect();
        args.push(one_hot(&tokens, 16, DType::F32));
        args.push(one_hot(&tokens, 16, DType::F32));
        let loss = eval(&g, &args).unwrap()[0].item();
        assert!(loss.is_finite() && loss > 0.5 * 16f64.ln() && loss < 3.0 * 16f64.ln(), "{loss}");
    }

    #[test]
    fn scalified_wide_forward_matches_plain() {
        let m = Transformer::new(tiny(), Precision::wide(DType::F32), true);
        let g = loss_graph(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&m.param_specs(), DType::F32, &mut rng);
        let tokens: Vec<usize> = (0..m.cfg.tokens()).map(|i| (i * 3 + 1) % 16).collect();
        let targets: Vec<usize> = tokens.iter().map(|t| (t + 1) % 16).collect();
        let x = one_hot(&tokens, 16, DType::F32);
        let y = one_hot(&targets, 16, DType::F32);
        let mut plain: Vec<Tensor> = params.iter().map(|p| p.to_tensor().cast(DType::F32, Default::default())).collect();
        plain.push(x.clone());
        plain.push(y.clone());
        let expect = eval(&g, &plain).unwrap()[0].clone();

        let kinds = vec![InputKind::Scaled; g.inputs().len()];
        let sg = scalify_with(&g, &kinds, &ScaleRules::exact()).unwrap();
        let mut scaled: Vec<Array> = params.into_iter().map(Array::Scaled).collect();
        scaled.push(x.into());
        scaled.push(y.into());
        let got = sg.eval(&scaled).unwrap()[0].to_tensor();
        assert_eq!(got.item().to_bits(), expect.item().to_bits());
        assert_eq!(sg.diagnostics.fallback_count, 0, "{}", sg.diagnostics);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let zero = ModelConfig { layers: 0, ..ModelConfig::default() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn fp8_precision_layout() {
        let p = Precision {
            matmul: DType::E4M3,
            master: DType::F16,
            grad: DType::E5M2,
            optimizer: DType::F32,
        };
        assert_eq!(p.compute(), DType::F16);
        assert_eq!(p.linear(), LinearConfig::fp8(DType::F16));
    }
}
