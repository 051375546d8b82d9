//! Layers, the transformer used by the training harness and a traced Adam.

mod adam;
mod checkpoint;
mod layers;
mod model;

pub use adam::{adam_update, lr_input, update_graph, AdamConfig, AdamState, OPT_STATE_TAG};
pub use checkpoint::{load_params, param_stem, save_params};
pub use layers::{
    attention, cast_to, causal_mask, cross_entropy, layer_norm_rescaled, linear, logsumexp, mlp, AttentionWeights,
    LinearConfig, LN_EPS,
};
pub use model::{init_params, mlp_loss, one_hot, param_specs, Init, ModelConfig, ParamSpec, Precision, Transformer, LAYERNORM_BWD_TAG};
