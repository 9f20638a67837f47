//! Sequential vanilla GD and layer-causal GD on demonstration sequences.

use std::collections::{BTreeMap, BTreeSet};

use super::config::{key_value_names, FinetuneConfig, LcgdHeadInput, Method};
use super::gradnorm::GradNormTrace;
use crate::error::{Error, Result};
use crate::model::forward::attend;
use crate::model::{build_forward, names, validate_tokens, Bound, Parameters};
use crate::numerics::{Tape, Tensor};
use crate::tasks::{format_demo, Demo, TaskConfig};

/// Loss and gradients of the full-network next-token cross-entropy.
///
/// `targets` are `(position, next token)` pairs; their losses are summed.
/// Gradients are returned for every name in `trainable`.
pub fn gd_gradients(
    params: &Parameters,
    tokens: &[usize],
    targets: &[(usize, usize)],
    trainable: &[String],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    validate_tokens(params.config(), tokens)?;
    let leaves: BTreeSet<&str> = trainable.iter().map(String::as_str).collect();
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, |n| leaves.contains(n));
    let nodes = build_forward(&mut tape, &bound, params.config(), &[tokens]);
    let loss = tape.cross_entropy(nodes.logits, targets);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?.into_named();
    Ok((value, grads))
}

/// Which tensors are differentiable leaves in [`lcgd_gradients`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LcgdLeaves {
    /// `W_K`, `W_V` of every layer, the tensors LCGD updates.
    KeyValue,
    /// Every tensor; the stop-gradients decide what receives a gradient.
    All,
}

/// Layer-causal loss at position `i`:
/// `Σ_ℓ CE(U(ĥ_i^ℓ), tokens[i + 1])` with
/// `ĥ_i^ℓ = Attn(W_V SG(X^ℓ), W_K SG(X^ℓ), SG(q_i^ℓ))`.
pub fn lcgd_loss(params: &Parameters, tokens: &[usize], i: usize) -> Result<f64> {
    lcgd_gradients(params, tokens, i, LcgdHeadInput::default(), LcgdLeaves::KeyValue).map(|(l, _)| l)
}

/// [`lcgd_loss`] together with its gradients.
///
/// `X^ℓ` is the normalized input of block `ℓ` at positions `0..=i` and
/// `q_i^ℓ` its query at `i`; both are detached. `W_O` and the unembedding
/// head (final norm and unembedding matrix) are detached as well, so the
/// only tensors that can receive gradient are `W_K^ℓ` and `W_V^ℓ`, and each
/// layer's pair only through its own loss term.
pub fn lcgd_gradients(
    params: &Parameters,
    tokens: &[usize],
    i: usize,
    head_input: LcgdHeadInput,
    leaves: LcgdLeaves,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let cfg = params.config();
    validate_tokens(cfg, tokens)?;
    if i + 1 >= tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "position {i} has no next token in a sequence of {}",
            tokens.len()
        )));
    }
    let kv: BTreeSet<String> = key_value_names(cfg.n_layers).into_iter().collect();
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, |n| match leaves {
        LcgdLeaves::KeyValue => kv.contains(n),
        LcgdLeaves::All => true,
    });
    let prefix = &tokens[..=i];
    let nodes = build_forward(&mut tape, &bound, cfg, &[prefix]);

    let gain = tape.stop_gradient(bound.var(names::FINAL_NORM_GAIN));
    let bias = tape.stop_gradient(bound.var(names::FINAL_NORM_BIAS));
    let unembed = tape.stop_gradient(bound.var(names::UNEMBEDDING));
    let target = tokens[i + 1];

    let mut terms = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in nodes.layers.iter().enumerate() {
        let x = tape.stop_gradient(layer.normed);
        let q_row = tape.rows(layer.queries, i, 1);
        let q = tape.stop_gradient(q_row);
        let keys = tape.matmul(x, bound.var(&names::w_k(l)));
        let values = tape.matmul(x, bound.var(&names::w_v(l)));
        let (heads, _) = attend(&mut tape, cfg, q, keys, values, 1, 1, i + 1, None);
        let w_o = tape.stop_gradient(bound.var(&names::w_o(l)));
        let out = tape.matmul(heads, w_o);
        let h = match head_input {
            LcgdHeadInput::AttentionOutput => out,
            LcgdHeadInput::Residual => {
                let resid_row = tape.rows(layer.input, i, 1);
                let resid = tape.stop_gradient(resid_row);
                tape.add(resid, out)
            }
        };
        let normed = tape.layer_norm(h, gain, bias, cfg.layer_norm_eps);
        let logits = tape.matmul(normed, unembed);
        terms.push(tape.cross_entropy(logits, &[(0, target)]));
    }
    let loss = tape.add_all(&terms);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?.into_named();
    Ok((value, grads))
}

fn demo_tokens(params: &Parameters, task: &TaskConfig, demo: &Demo) -> Result<Vec<usize>> {
    let tokens = format_demo(task, demo);
    validate_tokens(params.config(), &tokens)?;
    Ok(tokens)
}

fn apply_update(
    params: &mut Parameters,
    grads: &BTreeMap<String, Tensor>,
    names: &[String],
    lr: f64,
    loss: f64,
    step: usize,
) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "loss", step });
    }
    if names.iter().any(|n| !grads[n].is_finite()) {
        return Err(Error::NonFinite { what: "gradient", step });
    }
    for n in names {
        params.get_mut(n).axpy(-lr, &grads[n]);
    }
    Ok(())
}

/// Sequential vanilla GD: one full-backpropagation step per demonstration
/// (times `steps_per_demo`), visiting demonstrations in `cfg.demo_order`.
///
/// Returns an updated copy; `params` is left untouched.
pub fn finetune_gd(
    params: &Parameters,
    task: &TaskConfig,
    demos: &[Demo],
    cfg: &FinetuneConfig,
) -> Result<(Parameters, GradNormTrace)> {
    cfg.validate()?;
    let trainable = cfg.trainable.resolve(params)?;
    let policy = cfg.loss_tokens_for(Method::Gd);
    let order = cfg.order(demos.len())?;
    let mut out = params.clone();
    let mut trace = GradNormTrace::new(Method::Gd, params.config().n_layers);
    let mut step = 0;
    for &d in &order {
        let tokens = demo_tokens(params, task, &demos[d])?;
        let targets = policy.positions(&tokens);
        for _ in 0..cfg.steps_per_demo {
            let (loss, grads) = gd_gradients(&out, &tokens, &targets, &trainable)?;
            trace.record(&grads);
            apply_update(&mut out, &grads, &trainable, cfg.learning_rate, loss, step)?;
            step += 1;
        }
    }
    Ok((out, trace))
}

/// Layer-causal GD: walks each demonstration one position at a time and
/// steps `W_K`, `W_V` of all layers on the layer-causal loss. An update takes
/// effect from the next position on.
pub fn finetune_lcgd(
    params: &Parameters,
    task: &TaskConfig,
    demos: &[Demo],
    cfg: &FinetuneConfig,
) -> Result<(Parameters, GradNormTrace)> {
    cfg.validate()?;
    let trainable = key_value_names(params.config().n_layers);
    let policy = cfg.loss_tokens_for(Method::Lcgd);
    let order = cfg.order(demos.len())?;
    let mut out = params.clone();
    let mut trace = GradNormTrace::new(Method::Lcgd, params.config().n_layers);
    let mut step = 0;
    for &d in &order {
        let tokens = demo_tokens(params, task, &demos[d])?;
        for (i, _) in policy.positions(&tokens) {
            for _ in 0..cfg.steps_per_demo {
                let (loss, grads) = lcgd_gradients(&out, &tokens, i, cfg.lcgd_head_input, LcgdLeaves::KeyValue)?;
                trace.record(&grads);
                apply_update(&mut out, &grads, &trainable, cfg.learning_rate, loss, step)?;
                step += 1;
            }
        }
    }
    Ok((out, trace))
}

/// Dispatches on `method`.
pub fn finetune(
    method: Method,
    params: &Parameters,
    task: &TaskConfig,
    demos: &[Demo],
    cfg: &FinetuneConfig,
) -> Result<(Parameters, GradNormTrace)> {
    match method {
        Method::Gd => finetune_gd(params, task, demos, cfg),
        Method::Lcgd => finetune_lcgd(params, task, demos, cfg),
    }
}
