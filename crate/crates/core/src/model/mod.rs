//! Decoder-only transformer with trace capture.

pub mod config;
pub mod forward;
pub mod params;
pub mod trace;

pub use config::ModelConfig;
pub use forward::{
    argmax_among, build_forward, logits, unembed, unembed_on_tape, validate_tokens, Bound, ForwardNodes, LayerNodes,
};
pub use params::{
    init_params, init_trained_embeddings, names, param_specs, InitScheme, ParamKind, ParamSpec, Parameters, INIT_STD,
};
pub use trace::{forward_trace, icl_slice, AttentionMap, Capture, ForwardTrace, OutputSite, Setting};
