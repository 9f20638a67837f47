//! Run configuration files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, OutputSite};
use crate::optim::{FinetuneConfig, Method, PretrainConfig};
use crate::tasks::TaskConfig;

/// Environment variable naming the root directory for relative output paths.
pub const OUTPUT_ROOT_ENV: &str = "ICL_LAB_OUT";

/// Reads a JSON config, reporting the path of the offending field on error.
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        Error::Config(format!("at `{at}`: {}", e.into_inner()))
    })
}

/// `dir` under `root` unless `dir` is absolute or no root is given.
pub fn resolve_output(root: Option<&Path>, dir: &Path) -> PathBuf {
    match root {
        Some(r) if dir.is_relative() => r.join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Model variant a benchmark arm starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Baseline {
    /// The pretrained checkpoint.
    Trained,
    /// Pretrained embeddings and layer norms, everything else re-drawn.
    TrainedEmbeddings,
    /// Fresh random initialization.
    NoTraining,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Trained, Baseline::TrainedEmbeddings, Baseline::NoTraining];

    pub fn needs_checkpoint(self) -> bool {
        self != Baseline::NoTraining
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Trained => "Trained",
            Baseline::TrainedEmbeddings => "TrainedEmbeddings",
            Baseline::NoTraining => "NoTraining",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Defaults to the checkpoint's config, or the default model without one.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub task: TaskConfig,
    /// Label written to the `task` column.
    #[serde(default = "defaults::task_name")]
    pub task_name: String,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::baselines")]
    pub baselines: Vec<Baseline>,
    #[serde(default = "defaults::methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    /// Sampled test episodes per seed; ignored when `episodes_path` is set.
    #[serde(default = "defaults::n_test_episodes")]
    pub n_test_episodes: usize,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// JSONL episodes used for every seed instead of sampled ones.
    #[serde(default)]
    pub episodes_path: Option<PathBuf>,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "defaults::plots")]
    pub plots: bool,
    #[serde(default)]
    pub output_site: OutputSite,
}

mod defaults {
    use super::*;

    pub fn task_name() -> String {
        "synthetic".into()
    }
    pub fn seeds() -> Vec<u64> {
        vec![0, 1, 2]
    }
    pub fn baselines() -> Vec<Baseline> {
        Baseline::ALL.to_vec()
    }
    pub fn methods() -> Vec<Method> {
        vec![Method::Gd, Method::Lcgd]
    }
    pub fn n_test_episodes() -> usize {
        32
    }
    pub fn output_dir() -> PathBuf {
        "benchmark".into()
    }
    pub fn plots() -> bool {
        true
    }
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        parse_config("{}").expect("every field has a default")
    }
}

fn check_unique<T: PartialEq + fmt::Debug>(what: &str, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Config(format!("{what} must not be empty")));
    }
    for (i, a) in items.iter().enumerate() {
        if items[..i].contains(a) {
            return Err(Error::Config(format!("{what} lists {a:?} twice")));
        }
    }
    Ok(())
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        check_unique("seeds", &self.seeds)?;
        check_unique("baselines", &self.baselines)?;
        check_unique("methods", &self.methods)?;
        if self.episodes_path.is_none() && self.n_test_episodes == 0 {
            return Err(Error::Config("n_test_episodes must be >= 1".into()));
        }
        if self.baselines.iter().any(|b| b.needs_checkpoint()) && self.checkpoint.is_none() {
            return Err(Error::Config(
                "checkpoint is required for the Trained and TrainedEmbeddings baselines".into(),
            ));
        }
        self.task.validate()?;
        self.finetune.validate()?;
        if let Some(m) = &self.model {
            m.validate()?;
        }
        Ok(())
    }
}

/// Pretraining run: model, task, optimizer settings and where to save.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRun {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: TaskConfig,
    pub pretrain: PretrainConfig,
    /// Checkpoint path; the loss log is written next to it.
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    /// Held-out episodes for the accuracy check after training.
    #[serde(default = "default_eval")]
    pub eval_episodes: usize,
}

fn default_checkpoint() -> PathBuf {
    "trained.ckpt".into()
}

fn default_eval() -> usize {
    1000
}
