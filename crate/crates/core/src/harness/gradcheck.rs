//! Finite-difference audit of both finetuning losses on a small model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_forward, init_params, logits, names, Bound, InitScheme, ModelConfig, Parameters};
use crate::numerics::{
    central_difference, cross_entropy_logits, layer_norm, matmul, relative_error, softmax_rows, Prng, Tape, Tensor,
    FD_STEP,
};
use crate::optim::{gd_gradients, lcgd_gradients, LcgdHeadInput, LcgdLeaves};
use crate::tasks::{format_icl_prompt, sample_episode_with_k, TaskConfig};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    /// `GD` or `LCGD`.
    pub loss: String,
    pub tensor: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_err: f64,
    pub grad_norm: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<TensorCheck>,
    pub max_rel_err: f64,
    /// `loss:tensor` of every failing check.
    pub failing: Vec<String>,
    pub passed: bool,
}

/// Compares `analytic[name]` with central differences of `loss` for each name.
pub fn check_tensors(
    label: &str,
    params: &Parameters,
    names: &[String],
    analytic: &BTreeMap<String, Tensor>,
    mut loss: impl FnMut(&Parameters) -> f64,
) -> Result<Vec<TensorCheck>> {
    let mut scratch = params.clone();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no analytic gradient for {name}")))?;
        let numeric = central_difference(
            |t| {
                *scratch.get_mut(name) = t.clone();
                loss(&scratch)
            },
            params.get(name),
            FD_STEP,
        );
        *scratch.get_mut(name) = params.get(name).clone();
        let rel_err = relative_error(a, &numeric);
        out.push(TensorCheck {
            loss: label.to_string(),
            tensor: name.clone(),
            rel_err,
            grad_norm: a.norm(),
            passed: rel_err <= GRADCHECK_TOLERANCE,
        });
    }
    Ok(out)
}

/// Model, prompt and perturbed parameters used by [`run_gradcheck`].
pub fn gradcheck_fixture(seed: u64) -> Result<(Parameters, Vec<usize>)> {
    let task = TaskConfig::default();
    let mut prng = Prng::new(seed).split_named("gradcheck");
    let e = sample_episode_with_k(&task, 2, &mut prng)?;
    let mut tokens = format_icl_prompt(&task, &e, usize::MAX)?;
    tokens.push(e.gold);
    let cfg = ModelConfig::tiny(task.vocab_size(), tokens.len());
    let mut params = init_params(&cfg, seed, &InitScheme::Random)?;
    // Spread weights away from the tiny init scale so gradients are not
    // dominated by round-off, and make gains and biases non-trivial.
    let all: Vec<String> = params.names().map(String::from).collect();
    for n in &all {
        let noise = prng.gaussian(params.get(n).shape(), 0.3);
        params.get_mut(n).axpy(1.0, &noise);
    }
    Ok((params, tokens))
}

/// Detached activations of the layer-causal loss at one position.
#[derive(Clone, Debug)]
pub struct LcgdInputs {
    /// Normalized block input `X^ℓ` over the prefix, `[i + 1, d]`.
    pub normed: Vec<Tensor>,
    /// Query row `q_i^ℓ`.
    pub query: Vec<Vec<f64>>,
    /// Block input row `i`, the residual the attention output is added to.
    pub residual: Vec<Vec<f64>>,
    pub target: usize,
}

/// Records the detached inputs of the layer-causal loss at position `i`.
pub fn lcgd_inputs(params: &Parameters, tokens: &[usize], i: usize) -> Result<LcgdInputs> {
    if i + 1 >= tokens.len() {
        return Err(Error::InvalidArgument(format!("position {i} has no next token")));
    }
    let mut tape = Tape::new();
    let bound = Bound::constants(&mut tape, params);
    let nodes = build_forward(&mut tape, &bound, params.config(), &[&tokens[..=i]]);
    Ok(LcgdInputs {
        normed: nodes.layers.iter().map(|l| tape.value(l.normed).clone()).collect(),
        query: nodes
            .layers
            .iter()
            .map(|l| tape.value(l.queries).row(i).to_vec())
            .collect(),
        residual: nodes
            .layers
            .iter()
            .map(|l| tape.value(l.input).row(i).to_vec())
            .collect(),
        target: tokens[i + 1],
    })
}

/// The layer-causal loss with its detached inputs held at `inputs`, written
/// with plain tensor arithmetic. As a function of `W_K`, `W_V` its gradient
/// is exactly what the stop-gradients leave of the taped loss.
pub fn lcgd_reference_loss(params: &Parameters, inputs: &LcgdInputs, head_input: LcgdHeadInput) -> Result<f64> {
    let cfg = params.config();
    let dh = cfg.d_head();
    let mut total = 0.0;
    for l in 0..cfg.n_layers {
        let x = &inputs.normed[l];
        let keys = matmul(x, params.get(&names::w_k(l)))?;
        let values = matmul(x, params.get(&names::w_v(l)))?;
        let n = x.rows();
        let mut heads = vec![0.0; cfg.d_model];
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let k = &keys.row(j)[cols.clone()];
                    inputs.query[l][cols.clone()]
                        .iter()
                        .zip(k)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let p = softmax_rows(&Tensor::matrix(1, n, scores)?, None)?;
            for (j, w) in p.data().iter().enumerate() {
                for c in cols.clone() {
                    heads[c] += w * values.row(j)[c];
                }
            }
        }
        let out = matmul(&Tensor::matrix(1, cfg.d_model, heads)?, params.get(&names::w_o(l)))?;
        let h: Vec<f64> = match head_input {
            LcgdHeadInput::AttentionOutput => out.data().to_vec(),
            LcgdHeadInput::Residual => out.data().iter().zip(&inputs.residual[l]).map(|(a, b)| a + b).collect(),
        };
        let normed = layer_norm(
            &h,
            params.get(names::FINAL_NORM_GAIN).data(),
            params.get(names::FINAL_NORM_BIAS).data(),
            cfg.layer_norm_eps,
        )?;
        let logits = matmul(&Tensor::matrix(1, cfg.d_model, normed)?, params.get(names::UNEMBEDDING))?;
        total += cross_entropy_logits(logits.data(), inputs.target)?;
    }
    Ok(total)
}

fn forward_ce(params: &Parameters, tokens: &[usize], targets: &[(usize, usize)]) -> f64 {
    let l = logits(params, tokens).expect("validated tokens");
    targets
        .iter()
        .map(|&(i, t)| cross_entropy_logits(l.row(i), t).expect("target in vocabulary"))
        .sum()
}

/// Checks the vanilla-GD loss (every tensor) and the layer-causal loss (every
/// `W_K`, `W_V`) against central differences.
///
/// `corrupt` adds a perturbation to the analytic gradient of the named tensor
/// before comparison, as a negative control.
pub fn run_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let (params, tokens) = gradcheck_fixture(seed)?;
    if let Some(c) = corrupt {
        if !params.contains(c) {
            return Err(Error::InvalidArgument(format!("cannot corrupt unknown tensor {c}")));
        }
    }
    let damage = |grads: &mut BTreeMap<String, Tensor>| {
        if let Some(g) = corrupt.and_then(|c| grads.get_mut(c)) {
            let bump = g.norm().max(1e-3) * 0.01;
            g.data_mut()[0] += bump;
        }
    };

    let all: Vec<String> = params.names().map(String::from).collect();
    let targets: Vec<(usize, usize)> = (0..tokens.len() - 1).map(|i| (i, tokens[i + 1])).collect();
    let (_, mut gd) = gd_gradients(&params, &tokens, &targets, &all)?;
    damage(&mut gd);
    let mut checks = check_tensors("GD", &params, &all, &gd, |p| forward_ce(p, &tokens, &targets))?;

    let i = tokens.len() - 2;
    let kv: Vec<String> = (0..params.config().n_layers)
        .flat_map(|l| [names::w_k(l), names::w_v(l)])
        .collect();
    let (_, mut lc) = lcgd_gradients(&params, &tokens, i, LcgdHeadInput::default(), LcgdLeaves::KeyValue)?;
    damage(&mut lc);
    let inputs = lcgd_inputs(&params, &tokens, i)?;
    checks.extend(check_tensors("LCGD", &params, &kv, &lc, |p| {
        lcgd_reference_loss(p, &inputs, LcgdHeadInput::default()).expect("shapes fixed by the config")
    })?);

    let failing: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}:{}", c.loss, c.tensor))
        .collect();
    Ok(GradcheckReport {
        seed,
        tolerance: GRADCHECK_TOLERANCE,
        max_rel_err: checks.iter().map(|c| c.rel_err).fold(0.0, f64::max),
        passed: failing.is_empty(),
        failing,
        checks,
    })
}
