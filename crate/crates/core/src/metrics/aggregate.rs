use serde::{Deserialize, Serialize};

use super::similarity::{mean_std, SimilarityScore};
use crate::error::{Error, Result};

/// One layer's score across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAggregate {
    pub layer: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 for a single value.
    pub std: Option<f64>,
    /// Runs contributing a value.
    pub count: usize,
    /// Runs whose layer value was excluded.
    pub excluded: usize,
}

/// Per-layer mean and std across a set of scores (tasks × seeds).
pub fn aggregate_layerwise(scores: &[SimilarityScore]) -> Result<Vec<LayerAggregate>> {
    let first = scores
        .first()
        .ok_or_else(|| Error::InvalidArgument("aggregate_layerwise of no scores".into()))?;
    let n_layers = first.per_layer.len();
    if let Some(bad) = scores.iter().find(|s| s.per_layer.len() != n_layers) {
        return Err(Error::Shape(format!(
            "scores have {} and {} layers",
            n_layers,
            bad.per_layer.len()
        )));
    }
    Ok((0..n_layers)
        .map(|layer| {
            let vals: Vec<f64> = scores.iter().filter_map(|s| s.per_layer[layer]).collect();
            let (mean, std) = mean_std(vals.iter().copied());
            LayerAggregate {
                layer,
                mean,
                std,
                count: vals.len(),
                excluded: scores.len() - vals.len(),
            }
        })
        .collect())
}
