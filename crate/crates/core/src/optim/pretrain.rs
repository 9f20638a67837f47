//! Next-token pretraining on freshly sampled ICL episodes.
//!
//! The loss is the cross-entropy at every position whose next token is a
//! label, i.e. at each `→` of the prompt plus the query's answer. Other
//! positions predict uniformly random symbols and only add noise.
//!
//! Updates use Adam with global-norm clipping.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_forward, init_params, Bound, InitScheme, ModelConfig, Parameters};
use crate::numerics::{Prng, Tape, Tensor};
use crate::tasks::{format_icl_prompt, sample_episode_with_k, TaskConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Warmup steps of linear learning-rate ramp.
    #[serde(default = "defaults::warmup")]
    pub warmup: usize,
    #[serde(default = "defaults::clip")]
    pub grad_clip: f64,
    /// Each batch draws `k` uniformly from `min_demonstrations..=task.k_demonstrations`.
    #[serde(default = "defaults::min_demonstrations")]
    pub min_demonstrations: usize,
}

mod defaults {
    pub fn batch() -> usize {
        16
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn warmup() -> usize {
        100
    }
    pub fn clip() -> f64 {
        1.0
    }
    pub fn min_demonstrations() -> usize {
        1
    }
}

impl PretrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch: defaults::batch(),
            learning_rate: defaults::lr(),
            seed,
            warmup: defaults::warmup(),
            grad_clip: defaults::clip(),
            min_demonstrations: defaults::min_demonstrations(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("pretrain.batch must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("pretrain.learning_rate must be > 0".into()));
        }
        if self.min_demonstrations == 0 {
            return Err(Error::Config("pretrain.min_demonstrations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean training loss of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: Parameters,
    pub log: Vec<LossRecord>,
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    fn new(params: &Parameters) -> Self {
        let zeros: Vec<Tensor> = params.tensors().values().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, params: &mut Parameters, grads: &[&Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let names: Vec<String> = params.names().map(String::from).collect();
        for (k, name) in names.iter().enumerate() {
            let g = grads[k].data();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = params.get_mut(name).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Token sequences and `(flat row, target token)` pairs.
pub type Batch = (Vec<Vec<usize>>, Vec<(usize, usize)>);

/// Samples a batch of equal-length training sequences and their loss targets.
/// All sequences share one `k` drawn uniformly from `k_range`.
pub fn sample_batch(
    model: &ModelConfig,
    task: &TaskConfig,
    batch: usize,
    k_range: RangeInclusive<usize>,
    prng: &mut Prng,
) -> Result<Batch> {
    let k = k_range.start() + prng.below(k_range.end() - k_range.start() + 1);
    let mut seqs = Vec::with_capacity(batch);
    let mut targets = Vec::new();
    for b in 0..batch {
        let e = sample_episode_with_k(task, k, prng)?;
        let mut tokens = format_icl_prompt(task, &e, model.max_seq_len)?;
        tokens.push(e.gold);
        if tokens.len() > model.max_seq_len {
            return Err(Error::Config(format!(
                "training sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                model.max_seq_len
            )));
        }
        let t = tokens.len();
        for i in 0..t - 1 {
            if task.is_label(tokens[i + 1]) {
                targets.push((b * t + i, tokens[i + 1]));
            }
        }
        seqs.push(tokens);
    }
    Ok((seqs, targets))
}

/// Mean cross-entropy over `targets` and its gradient for every tensor.
pub fn batch_loss_and_grads(
    params: &Parameters,
    seqs: &[Vec<usize>],
    targets: &[(usize, usize)],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, |_| true);
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let nodes = build_forward(&mut tape, &bound, params.config(), &refs);
    let total = tape.cross_entropy(nodes.logits, targets);
    let loss = tape.scale(total, 1.0 / targets.len() as f64);
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?.into_named();
    let ordered = params
        .names()
        .map(|n| grads.remove(n).expect("every tensor is a leaf"))
        .collect();
    Ok((value, ordered))
}

/// Trains a fresh model. `on_step` sees every loss record as it is produced.
pub fn pretrain_with(
    model: &ModelConfig,
    task: &TaskConfig,
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Pretrained> {
    model.validate()?;
    task.validate()?;
    task.check_vocab(model.vocab_size)?;
    cfg.validate()?;
    if cfg.min_demonstrations > task.k_demonstrations {
        return Err(Error::Config(format!(
            "pretrain.min_demonstrations ({}) exceeds task.k_demonstrations ({})",
            cfg.min_demonstrations, task.k_demonstrations
        )));
    }
    let mut params = init_params(model, cfg.seed, &InitScheme::Random)?;
    let mut prng = Prng::new(cfg.seed).split_named("pretrain-data");
    let mut adam = Adam::new(&params);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let k_range = cfg.min_demonstrations..=task.k_demonstrations;
        let (seqs, targets) = sample_batch(model, task, cfg.batch, k_range, &mut prng)?;
        let (loss, mut grads) = batch_loss_and_grads(&params, &seqs, &targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss", step });
        }
        let norm = grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { what: "gradient", step });
        }
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        let warm = if cfg.warmup == 0 {
            1.0
        } else {
            ((step + 1) as f64 / cfg.warmup as f64).min(1.0)
        };
        let refs: Vec<&Tensor> = grads.iter().collect();
        adam.step(&mut params, &refs, cfg.learning_rate * warm);
        let rec = LossRecord { step, loss };
        on_step(&rec);
        log.push(rec);
    }
    Ok(Pretrained { params, log })
}

pub fn pretrain(model: &ModelConfig, task: &TaskConfig, cfg: &PretrainConfig) -> Result<Pretrained> {
    pretrain_with(model, task, cfg, |_| {})
}
