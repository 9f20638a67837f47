//! Pre-layer-norm decoder forward pass recorded on a [`Tape`].
//!
//! ```text
//! x  = tok_emb[ids] + pos_emb[0..T]
//! x += W_O · MultiHead(LN1(x))          (causal)
//! x += MLP(LN2(x))
//! logits = LN_f(x) · unembed
//! ```
//!
//! Row-vector convention throughout: activations are `[rows, d_model]` and
//! weights multiply on the right.

use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::params::{names, Parameters};
use crate::error::{Error, Result};
use crate::numerics::{Mask, Tape, Tensor, Var};

/// Parameters placed on a tape, each as a leaf or a constant.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Places every tensor on `tape`; names accepted by `is_leaf` become
    /// differentiable leaves, everything else a constant.
    pub fn new(tape: &mut Tape, params: &Parameters, is_leaf: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|(name, t)| {
                let v = if is_leaf(name) {
                    tape.leaf(name.clone(), t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn constants(tape: &mut Tape, params: &Parameters) -> Self {
        Self::new(tape, params, |_| false)
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }
}

/// Nodes of one attention block.
#[derive(Clone, Debug)]
pub struct LayerNodes {
    /// Residual stream entering the block.
    pub input: Var,
    /// `LN1(input)`: the rows that keys, values and queries are computed from.
    pub normed: Var,
    pub queries: Var,
    /// Scaled `q·kᵀ` logits before masking, one per `(sequence, head)` in
    /// `sequence * n_heads + head` order.
    pub scores: Vec<Var>,
    /// Attention sublayer output after `W_O`, before the residual add.
    pub attn_out: Var,
    /// Residual stream after the attention sublayer.
    pub mid: Var,
    /// Residual stream after the MLP sublayer.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub layers: Vec<LayerNodes>,
    /// Residual stream after the last block, before the final layer norm.
    pub final_hidden: Var,
    pub logits: Var,
}

/// Checks a prompt against the model limits.
pub fn validate_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token list".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "prompt of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} out of range for vocab size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Records the forward pass over a batch of equal-length sequences.
///
/// Rows of every activation are the sequences stacked in order.
pub fn build_forward(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, batch: &[&[usize]]) -> ForwardNodes {
    let t = batch[0].len();
    assert!(
        batch.iter().all(|s| s.len() == t),
        "batch sequences must share a length"
    );
    let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..t).collect();

    let tok = tape.gather(bound.var(names::TOKEN_EMBEDDING), &ids);
    let pos = tape.gather(bound.var(names::POSITIONAL_EMBEDDING), &positions);
    let mut x = tape.add(tok, pos);

    let mask = Mask::causal(t);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let input = x;
        let normed = tape.layer_norm(
            x,
            bound.var(&names::ln1_gain(l)),
            bound.var(&names::ln1_bias(l)),
            cfg.layer_norm_eps,
        );
        let queries = tape.matmul(normed, bound.var(&names::w_q(l)));
        let keys = tape.matmul(normed, bound.var(&names::w_k(l)));
        let values = tape.matmul(normed, bound.var(&names::w_v(l)));
        let (heads, scores) = multi_head(tape, cfg, queries, keys, values, batch.len(), t, Some(&mask));
        let attn_out = tape.matmul(heads, bound.var(&names::w_o(l)));
        let mid = tape.add(x, attn_out);

        let m = tape.layer_norm(
            mid,
            bound.var(&names::ln2_gain(l)),
            bound.var(&names::ln2_bias(l)),
            cfg.layer_norm_eps,
        );
        let h = tape.matmul(m, bound.var(&names::mlp_w_in(l)));
        let h = tape.add_row(h, bound.var(&names::mlp_b_in(l)));
        let h = tape.gelu(h);
        let h = tape.matmul(h, bound.var(&names::mlp_w_out(l)));
        let h = tape.add_row(h, bound.var(&names::mlp_b_out(l)));
        x = tape.add(mid, h);

        layers.push(LayerNodes {
            input,
            normed,
            queries,
            scores,
            attn_out,
            mid,
            output: x,
        });
    }
    let logits = unembed_on_tape(tape, bound, cfg, x);
    ForwardNodes {
        layers,
        final_hidden: x,
        logits,
    }
}

/// Scaled dot-product attention for every `(sequence, head)` block.
///
/// `queries` holds `n_seq * q_len` rows, `keys`/`values` hold `n_seq * k_len`
/// rows. Returns the concatenated head outputs and the pre-mask score nodes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend(
    tape: &mut Tape,
    cfg: &ModelConfig,
    queries: Var,
    keys: Var,
    values: Var,
    n_seq: usize,
    q_len: usize,
    k_len: usize,
    mask: Option<&Mask>,
) -> (Var, Vec<Var>) {
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = Vec::with_capacity(n_seq * cfg.n_heads);
    let mut seq_outputs = Vec::with_capacity(n_seq);
    for b in 0..n_seq {
        let mut head_outputs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let q = tape.slice(queries, b * q_len, q_len, h * dh, dh);
            let k = tape.slice(keys, b * k_len, k_len, h * dh, dh);
            let v = tape.slice(values, b * k_len, k_len, h * dh, dh);
            let s = tape.matmul_ext(q, k, true);
            let s = tape.scale(s, scale);
            scores.push(s);
            let p = tape.softmax(s, mask);
            head_outputs.push(tape.matmul(p, v));
        }
        seq_outputs.push(if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            tape.concat_cols(&head_outputs)
        });
    }
    let out = if seq_outputs.len() == 1 {
        seq_outputs[0]
    } else {
        tape.concat_rows(&seq_outputs)
    };
    (out, scores)
}

#[allow(clippy::too_many_arguments)]
fn multi_head(
    tape: &mut Tape,
    cfg: &ModelConfig,
    queries: Var,
    keys: Var,
    values: Var,
    n_seq: usize,
    t: usize,
    mask: Option<&Mask>,
) -> (Var, Vec<Var>) {
    attend(tape, cfg, queries, keys, values, n_seq, t, t, mask)
}

/// The unembedding head `U(h) = LN_f(h) · unembed`, applied row-wise.
pub fn unembed_on_tape(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, h: Var) -> Var {
    let n = tape.layer_norm(
        h,
        bound.var(names::FINAL_NORM_GAIN),
        bound.var(names::FINAL_NORM_BIAS),
        cfg.layer_norm_eps,
    );
    tape.matmul(n, bound.var(names::UNEMBEDDING))
}

/// Vocabulary logits of a single hidden state through the unembedding head.
pub fn unembed(params: &Parameters, h: &[f64]) -> Result<Vec<f64>> {
    let cfg = params.config();
    if h.len() != cfg.d_model {
        return Err(Error::Shape(format!(
            "hidden state has length {}, expected d_model {}",
            h.len(),
            cfg.d_model
        )));
    }
    let mut tape = Tape::new();
    let gain = tape.constant(params.get(names::FINAL_NORM_GAIN).clone());
    let bias = tape.constant(params.get(names::FINAL_NORM_BIAS).clone());
    let w = tape.constant(params.get(names::UNEMBEDDING).clone());
    let x = tape.constant(Tensor::from_parts(vec![1, h.len()], h.to_vec()));
    let n = tape.layer_norm(x, gain, bias, cfg.layer_norm_eps);
    let out = tape.matmul(n, w);
    Ok(tape.value(out).data().to_vec())
}

/// Logits `[T, V]` of a single prompt.
pub fn logits(params: &Parameters, tokens: &[usize]) -> Result<Tensor> {
    validate_tokens(params.config(), tokens)?;
    let mut tape = Tape::new();
    let bound = Bound::constants(&mut tape, params);
    let nodes = build_forward(&mut tape, &bound, params.config(), &[tokens]);
    Ok(tape.value(nodes.logits).clone())
}

/// Index of the largest entry among `candidates`, ties to the first.
pub fn argmax_among(row: &[f64], candidates: impl IntoIterator<Item = usize>) -> usize {
    let mut best = None;
    for c in candidates {
        match best {
            Some((_, v)) if row[c] <= v => {}
            _ => best = Some((c, row[c])),
        }
    }
    best.map(|(c, _)| c).expect("no candidates")
}
