//! A small laboratory for comparing in-context learning (ICL) with
//! gradient-descent finetuning on a decoder-only transformer.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: `f64` tensors, a define-by-run tape with stop-gradient,
//!   and seeded ChaCha streams.
//! - [`model`]: the transformer, trace capture of attention outputs and
//!   pre-softmax attention maps, the unembedding head and the untrained
//!   baselines.
//! - [`optim`]: sequential vanilla GD, layer-causal GD (LCGD), pretraining
//!   and gradient-norm traces.
//! - [`metrics`]: SimAOU, SimAOU_norm, SimAM, SimAM_Δ, the GD/LCGD α metric,
//!   the constructed-noise check and layerwise aggregation.
//! - [`tasks`]: synthetic episodes with per-episode label remapping, prompt
//!   formatting and a JSONL loader.
//! - [`harness`]: checkpoints, the benchmark protocol, gradient checking and
//!   report emission.

// `!(x > 0.0)` is how config checks reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod tasks;

pub use error::{Error, Result};
