use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Prng;

/// Synthetic classification task.
///
/// Vocabulary layout: input symbols `0..n_input_symbols`, then `n_labels`
/// label tokens, then the separator `→` and the delimiter `;`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "defaults::n_input_symbols")]
    pub n_input_symbols: usize,
    #[serde(default = "defaults::n_labels")]
    pub n_labels: usize,
    #[serde(default = "defaults::pattern_length")]
    pub pattern_length: usize,
    #[serde(default = "defaults::k_demonstrations")]
    pub k_demonstrations: usize,
}

mod defaults {
    pub fn n_input_symbols() -> usize {
        16
    }
    pub fn n_labels() -> usize {
        4
    }
    pub fn pattern_length() -> usize {
        1
    }
    pub fn k_demonstrations() -> usize {
        8
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_input_symbols: defaults::n_input_symbols(),
            n_labels: defaults::n_labels(),
            pattern_length: defaults::pattern_length(),
            k_demonstrations: defaults::k_demonstrations(),
        }
    }
}

impl TaskConfig {
    pub fn vocab_size(&self) -> usize {
        self.n_input_symbols + self.n_labels + 2
    }

    pub fn label_token(&self, label_index: usize) -> usize {
        self.n_input_symbols + label_index
    }

    pub fn label_tokens(&self) -> std::ops::Range<usize> {
        self.n_input_symbols..self.n_input_symbols + self.n_labels
    }

    pub fn is_label(&self, token: usize) -> bool {
        self.label_tokens().contains(&token)
    }

    pub fn arrow(&self) -> usize {
        self.n_input_symbols + self.n_labels
    }

    pub fn delimiter(&self) -> usize {
        self.n_input_symbols + self.n_labels + 1
    }

    /// Length of the ICL prompt for `k` demonstrations.
    pub fn icl_prompt_len(&self, k: usize) -> usize {
        k * (self.pattern_length + 3) + self.pattern_length + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_input_symbols == 0 {
            return Err(Error::Config("task.n_input_symbols must be >= 1".into()));
        }
        if self.n_labels < 2 {
            return Err(Error::Config("task.n_labels must be >= 2".into()));
        }
        if self.pattern_length == 0 {
            return Err(Error::Config("task.pattern_length must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks that the task vocabulary fits a model vocabulary.
    pub fn check_vocab(&self, model_vocab: usize) -> Result<()> {
        if self.vocab_size() > model_vocab {
            return Err(Error::Config(format!(
                "task vocabulary ({}) exceeds model.vocab_size ({})",
                self.vocab_size(),
                model_vocab
            )));
        }
        Ok(())
    }

    /// Equivalence class of a pattern: its first symbol.
    pub fn class_of(&self, pattern: &[usize]) -> usize {
        pattern[0]
    }
}

/// One labelled example.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Demo {
    pub input: Vec<usize>,
    /// Label token id.
    pub label: usize,
}

/// Demonstrations plus a query whose answer must be read from them.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Episode {
    pub demonstrations: Vec<Demo>,
    pub query: Vec<usize>,
    /// Gold label token id.
    pub gold: usize,
    /// Seed of the class-to-label mapping; zero for loaded episodes.
    pub mapping_seed: u64,
}

impl Episode {
    /// Same episode without demonstrations.
    pub fn without_demonstrations(&self) -> Episode {
        Episode {
            demonstrations: Vec::new(),
            ..self.clone()
        }
    }
}

/// Per-episode class-to-label assignment, uniform over labels per class.
pub fn episode_mapping(cfg: &TaskConfig, mapping_seed: u64) -> Vec<usize> {
    let mut prng = Prng::new(mapping_seed);
    (0..cfg.n_input_symbols)
        .map(|_| cfg.label_token(prng.below(cfg.n_labels)))
        .collect()
}

/// Samples an episode with `cfg.k_demonstrations` demonstrations.
pub fn sample_episode(cfg: &TaskConfig, prng: &mut Prng) -> Result<Episode> {
    sample_episode_with_k(cfg, cfg.k_demonstrations, prng)
}

/// Samples an episode with `k` demonstrations.
///
/// The mapping is redrawn for every episode, so a label is only predictable
/// from the demonstrations. One demonstration, at a random slot, shares the
/// query's class.
pub fn sample_episode_with_k(cfg: &TaskConfig, k: usize, prng: &mut Prng) -> Result<Episode> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::InvalidArgument(
            "k_demonstrations = 0 cannot cover the query class".into(),
        ));
    }
    let mapping_seed = prng.next_u64();
    let mapping = episode_mapping(cfg, mapping_seed);
    let pattern = |prng: &mut Prng| -> Vec<usize> {
        (0..cfg.pattern_length)
            .map(|_| prng.below(cfg.n_input_symbols))
            .collect()
    };
    let query = pattern(prng);
    let witness = prng.below(k);
    let demonstrations = (0..k)
        .map(|i| {
            let mut input = pattern(prng);
            if i == witness {
                input[0] = query[0];
            }
            let label = mapping[cfg.class_of(&input)];
            Demo { input, label }
        })
        .collect();
    Ok(Episode {
        demonstrations,
        gold: mapping[cfg.class_of(&query)],
        query,
        mapping_seed,
    })
}
