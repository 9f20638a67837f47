use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, Parameters};

/// Finetuning procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "GD")]
    Gd,
    #[serde(rename = "LCGD")]
    Lcgd,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Gd => "GD",
            Method::Lcgd => "LCGD",
        })
    }
}

/// Which positions of a demonstration contribute a loss term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTokenPolicy {
    /// Only the position that predicts the label.
    LabelOnly,
    /// Every position that has a next token.
    EveryToken,
}

impl LossTokenPolicy {
    pub fn default_for(method: Method) -> Self {
        match method {
            Method::Gd => LossTokenPolicy::LabelOnly,
            Method::Lcgd => LossTokenPolicy::EveryToken,
        }
    }

    /// `(position, next token)` pairs of a demonstration sequence ending in its label.
    pub fn positions(self, tokens: &[usize]) -> Vec<(usize, usize)> {
        let n = tokens.len();
        match self {
            LossTokenPolicy::LabelOnly => vec![(n - 2, tokens[n - 1])],
            LossTokenPolicy::EveryToken => (0..n - 1).map(|i| (i, tokens[i + 1])).collect(),
        }
    }
}

/// Parameters updated by vanilla GD.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    /// `W_K` and `W_V` of every layer.
    #[default]
    KeyValue,
    /// Every tensor.
    All,
    /// An explicit list of parameter names.
    Names(Vec<String>),
}

impl TrainableSet {
    pub fn resolve(&self, params: &Parameters) -> Result<Vec<String>> {
        match self {
            TrainableSet::KeyValue => Ok(key_value_names(params.config().n_layers)),
            TrainableSet::All => Ok(params.names().map(String::from).collect()),
            TrainableSet::Names(list) => {
                if let Some(bad) = list.iter().find(|n| !params.contains(n)) {
                    return Err(Error::Config(format!(
                        "finetune.trainable names unknown parameter {bad}"
                    )));
                }
                Ok(list.clone())
            }
        }
    }
}

pub(crate) fn key_value_names(n_layers: usize) -> Vec<String> {
    (0..n_layers).flat_map(|l| [names::w_k(l), names::w_v(l)]).collect()
}

/// Input fed to the unembedding head in the layer-causal loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LcgdHeadInput {
    /// Residual stream after the attention sublayer: detached layer input
    /// plus the attention output.
    #[default]
    Residual,
    /// The attention output alone.
    AttentionOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Vanilla GD only; LCGD always trains `W_K`, `W_V`.
    #[serde(default)]
    pub trainable: TrainableSet,
    /// `None` picks the method default: label-only for GD, every token for LCGD.
    #[serde(default)]
    pub loss_tokens: Option<LossTokenPolicy>,
    /// Permutation of demonstration indices; `None` keeps the given order.
    #[serde(default)]
    pub demo_order: Option<Vec<usize>>,
    #[serde(default = "default_steps")]
    pub steps_per_demo: usize,
    #[serde(default)]
    pub lcgd_head_input: LcgdHeadInput,
}

fn default_lr() -> f64 {
    0.01
}

fn default_steps() -> usize {
    1
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            trainable: TrainableSet::default(),
            loss_tokens: None,
            demo_order: None,
            steps_per_demo: default_steps(),
            lcgd_head_input: LcgdHeadInput::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("finetune.learning_rate must be finite and >= 0".into()));
        }
        if self.steps_per_demo == 0 {
            return Err(Error::Config("finetune.steps_per_demo must be >= 1".into()));
        }
        Ok(())
    }

    pub fn loss_tokens_for(&self, method: Method) -> LossTokenPolicy {
        self.loss_tokens.unwrap_or(LossTokenPolicy::default_for(method))
    }

    /// Demonstration visiting order for `n` demonstrations.
    pub fn order(&self, n: usize) -> Result<Vec<usize>> {
        match &self.demo_order {
            None => Ok((0..n).collect()),
            Some(order) => {
                let mut seen = vec![false; n];
                let ok = order.len() == n && order.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true));
                if !ok {
                    return Err(Error::Config(format!(
                        "finetune.demo_order {order:?} is not a permutation of 0..{n}"
                    )));
                }
                Ok(order.clone())
            }
        }
    }
}
