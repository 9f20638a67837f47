//! Finetuning procedures and pretraining.
//!
//! Vanilla GD backpropagates the final-layer loss through the whole network,
//! so the update of a layer depends on every layer above it. Layer-causal GD
//! (LCGD) gives each attention layer its own early-exit loss through the
//! frozen unembedding head and detaches the layer's inputs, so the update of
//! layer `ℓ` depends only on layers `≤ ℓ`.

pub mod config;
pub mod finetune;
pub mod gradnorm;
pub mod pretrain;

pub use config::{FinetuneConfig, LcgdHeadInput, LossTokenPolicy, Method, TrainableSet};
pub use finetune::{finetune, finetune_gd, finetune_lcgd, gd_gradients, lcgd_gradients, lcgd_loss, LcgdLeaves};
pub use gradnorm::{write_grad_norms_csv, GradNormTrace};
pub use pretrain::{pretrain, pretrain_with, sample_batch, LossRecord, PretrainConfig, Pretrained};
