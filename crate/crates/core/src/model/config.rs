use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    /// The desk-scale model used for pretraining and the benchmark.
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            vocab_size: 22,
            max_seq_len: 40,
            mlp_ratio: 4,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// The 2-layer, 2-head, width-16 model used for gradient checking.
    pub fn tiny(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            vocab_size,
            max_seq_len,
            mlp_ratio: 4,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("model.layer_norm_eps must be > 0".into()));
        }
        Ok(())
    }

    /// Names of the fields that differ from `other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.n_layers != other.n_layers {
            out.push("n_layers");
        }
        if self.n_heads != other.n_heads {
            out.push("n_heads");
        }
        if self.d_model != other.d_model {
            out.push("d_model");
        }
        if self.vocab_size != other.vocab_size {
            out.push("vocab_size");
        }
        if self.max_seq_len != other.max_seq_len {
            out.push("max_seq_len");
        }
        if self.mlp_ratio != other.mlp_ratio {
            out.push("mlp_ratio");
        }
        if self.layer_norm_eps.to_bits() != other.layer_norm_eps.to_bits() {
            out.push("layer_norm_eps");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("divisible"));
    }

    #[test]
    fn zero_sizes_are_rejected() {
        let cfg = ModelConfig {
            n_layers: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("n_layers"));
    }

    #[test]
    fn diff_names_fields() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            d_model: 32,
            ..a.clone()
        };
        assert_eq!(a.diff(&b), vec!["d_model"]);
    }
}
