//! Held-out accuracy with and without demonstrations.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{argmax_among, logits, Parameters};
use crate::numerics::Prng;
use crate::tasks::{format_icl_prompt, format_zsl_prompt, sample_episode, TaskConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub episodes: usize,
    /// Fraction answered correctly with demonstrations in the prompt.
    pub icl: f64,
    /// Fraction answered correctly from the bare query.
    pub zero_shot: f64,
}

impl Accuracy {
    /// ICL minus zero-shot accuracy, in percentage points.
    pub fn gap_points(&self) -> f64 {
        100.0 * (self.icl - self.zero_shot)
    }
}

/// Predicted label token at the last position, argmax over label tokens only.
pub fn predict_label(params: &Parameters, task: &TaskConfig, tokens: &[usize]) -> Result<usize> {
    let l = logits(params, tokens)?;
    Ok(argmax_among(l.row(l.rows() - 1), task.label_tokens()))
}

/// Accuracy on `n` episodes drawn from a stream keyed by `seed`.
pub fn evaluate_icl(params: &Parameters, task: &TaskConfig, n: usize, seed: u64) -> Result<Accuracy> {
    let mut prng = Prng::new(seed).split_named("eval-episodes");
    let max_len = params.config().max_seq_len;
    let (mut icl, mut zs) = (0usize, 0usize);
    for _ in 0..n {
        let e = sample_episode(task, &mut prng)?;
        if predict_label(params, task, &format_icl_prompt(task, &e, max_len)?)? == e.gold {
            icl += 1;
        }
        if predict_label(params, task, &format_zsl_prompt(task, &e, max_len)?)? == e.gold {
            zs += 1;
        }
    }
    Ok(Accuracy {
        episodes: n,
        icl: icl as f64 / n as f64,
        zero_shot: zs as f64 / n as f64,
    })
}
