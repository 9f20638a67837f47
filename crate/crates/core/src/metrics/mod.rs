//! ICL-vs-finetuning similarity metrics.
//!
//! All comparisons are cosines of update vectors (or raw maps) computed per
//! layer, or per head and then averaged within the layer. Near-zero vectors
//! are excluded rather than scored.

mod aggregate;
mod noise;
mod similarity;

pub use aggregate::{aggregate_layerwise, LayerAggregate};
pub use noise::{noise_simaou_check, NoiseCheck};
pub use similarity::{
    alpha_gd_lcgd, cosine, sim_am, sim_am_delta, sim_aou, Cosine, Metric, SimilarityScore, EXCLUSION_EPS,
};
