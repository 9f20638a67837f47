use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::forward::{build_forward, validate_tokens, Bound};
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

/// Which forward pass a trace came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Setting {
    /// Bare query prompt, original weights.
    Zsl,
    /// Demonstrations in the prompt, original weights.
    Icl,
    /// Bare query prompt after vanilla GD finetuning.
    FtGd,
    /// Bare query prompt after layer-causal finetuning.
    FtLcgd,
}

/// Where the per-layer "attention output" vector is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSite {
    /// Attention sublayer output after `W_O`, before the residual add.
    #[default]
    AttentionSublayer,
    /// Residual stream after the attention sublayer.
    PostResidual,
}

/// What a forward pass records besides logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Capture {
    pub attention_outputs: bool,
    pub attention_maps: bool,
    pub hidden_states: bool,
    pub output_site: OutputSite,
}

impl Capture {
    pub const ALL: Capture = Capture {
        attention_outputs: true,
        attention_maps: true,
        hidden_states: true,
        output_site: OutputSite::AttentionSublayer,
    };
    pub const NONE: Capture = Capture {
        attention_outputs: false,
        attention_maps: false,
        hidden_states: false,
        output_site: OutputSite::AttentionSublayer,
    };
}

impl Default for Capture {
    fn default() -> Self {
        Capture {
            attention_outputs: true,
            attention_maps: true,
            hidden_states: false,
            output_site: OutputSite::AttentionSublayer,
        }
    }
}

/// Pre-softmax attention logits of one head over a causal block.
///
/// Only the unmasked lower triangle (`key <= query`) is stored, packed row by
/// row; masked positions have no value at all, so they cannot leak into a
/// metric.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    size: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    /// Packs the lower triangle of a square score matrix.
    pub fn from_scores(scores: &Tensor) -> Self {
        let t = scores.rows();
        assert_eq!(t, scores.cols(), "attention scores must be square");
        let mut values = Vec::with_capacity(t * (t + 1) / 2);
        for i in 0..t {
            values.extend_from_slice(&scores.row(i)[..=i]);
        }
        Self { size: t, values }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Value at `(query, key)`, `None` where masked.
    pub fn get(&self, query: usize, key: usize) -> Option<f64> {
        if query >= self.size || key > query {
            return None;
        }
        Some(self.values[query * (query + 1) / 2 + key])
    }

    /// Unmasked entries, row-major.
    pub fn unmasked(&self) -> &[f64] {
        &self.values
    }

    /// Block where both query and key fall in `span`.
    pub fn restrict(&self, span: Range<usize>) -> Self {
        let mut values = Vec::new();
        for q in span.clone() {
            for k in span.start..=q {
                values.push(self.get(q, k).expect("restricted entry is unmasked"));
            }
        }
        Self {
            size: span.len(),
            values,
        }
    }
}

/// Captured quantities of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `[T, V]`
    pub logits: Tensor,
    /// Per layer, `[T, d_model]` at the configured [`OutputSite`]. Empty when
    /// not captured.
    pub attention_outputs: Vec<Tensor>,
    /// Per layer, per head.
    pub attention_maps: Vec<Vec<AttentionMap>>,
    /// Per layer, residual stream after the block.
    pub hidden_states: Option<Vec<Tensor>>,
    /// Residual stream before the final layer norm, `[T, d_model]`.
    pub final_hidden: Tensor,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_layers(&self) -> usize {
        self.attention_outputs.len().max(self.attention_maps.len())
    }

    /// Attention output of layer `l` at the last position.
    pub fn last_attention_output(&self, l: usize) -> &[f64] {
        let t = &self.attention_outputs[l];
        t.row(t.rows() - 1)
    }

    pub fn bitwise_eq(&self, other: &ForwardTrace) -> bool {
        let tensors_eq =
            |a: &[Tensor], b: &[Tensor]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y));
        let maps_eq = self.attention_maps.len() == other.attention_maps.len()
            && self.attention_maps.iter().zip(&other.attention_maps).all(|(a, b)| {
                a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| {
                        x.size == y.size && x.values.iter().zip(&y.values).all(|(p, q)| p.to_bits() == q.to_bits())
                    })
            });
        let hidden_eq = match (&self.hidden_states, &other.hidden_states) {
            (None, None) => true,
            (Some(a), Some(b)) => tensors_eq(a, b),
            _ => false,
        };
        self.logits.bitwise_eq(&other.logits)
            && self.final_hidden.bitwise_eq(&other.final_hidden)
            && tensors_eq(&self.attention_outputs, &other.attention_outputs)
            && maps_eq
            && hidden_eq
    }
}

/// Runs the model on one prompt and records the requested quantities.
pub fn forward_trace(params: &Parameters, tokens: &[usize], capture: Capture) -> Result<ForwardTrace> {
    let cfg = params.config();
    validate_tokens(cfg, tokens)?;
    let mut tape = Tape::new();
    let bound = Bound::constants(&mut tape, params);
    let nodes = build_forward(&mut tape, &bound, cfg, &[tokens]);

    let attention_outputs = if capture.attention_outputs {
        nodes
            .layers
            .iter()
            .map(|l| match capture.output_site {
                OutputSite::AttentionSublayer => tape.value(l.attn_out).clone(),
                OutputSite::PostResidual => tape.value(l.mid).clone(),
            })
            .collect()
    } else {
        Vec::new()
    };
    let attention_maps = if capture.attention_maps {
        nodes
            .layers
            .iter()
            .map(|l| {
                l.scores
                    .iter()
                    .map(|s| AttentionMap::from_scores(tape.value(*s)))
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let hidden_states = capture
        .hidden_states
        .then(|| nodes.layers.iter().map(|l| tape.value(l.output).clone()).collect());
    Ok(ForwardTrace {
        logits: tape.value(nodes.logits).clone(),
        attention_outputs,
        attention_maps,
        hidden_states,
        final_hidden: tape.value(nodes.final_hidden).clone(),
    })
}

fn slice_rows(t: &Tensor, span: &Range<usize>) -> Tensor {
    let c = t.cols();
    Tensor::from_parts(vec![span.len(), c], t.data()[span.start * c..span.end * c].to_vec())
}

/// Restricts a trace to the positions in `test_span`.
///
/// Row quantities keep only rows in the span; attention maps keep only the
/// block where both query and key lie in the span, so the result lines up
/// with a trace of the bare test prompt.
pub fn icl_slice(trace: &ForwardTrace, test_span: Range<usize>) -> Result<ForwardTrace> {
    if test_span.is_empty() {
        return Err(Error::InvalidArgument("empty test span".into()));
    }
    if test_span.end > trace.len() {
        return Err(Error::InvalidArgument(format!(
            "test span {:?} exceeds trace length {}",
            test_span,
            trace.len()
        )));
    }
    Ok(ForwardTrace {
        logits: slice_rows(&trace.logits, &test_span),
        attention_outputs: trace
            .attention_outputs
            .iter()
            .map(|t| slice_rows(t, &test_span))
            .collect(),
        attention_maps: trace
            .attention_maps
            .iter()
            .map(|layer| layer.iter().map(|m| m.restrict(test_span.clone())).collect())
            .collect(),
        hidden_states: trace
            .hidden_states
            .as_ref()
            .map(|hs| hs.iter().map(|t| slice_rows(t, &test_span)).collect()),
        final_hidden: slice_rows(&trace.final_hidden, &test_span),
    })
}
