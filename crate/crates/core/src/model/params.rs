use std::collections::BTreeMap;
use std::path::PathBuf;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Prng, Tensor};

/// Standard deviation of freshly drawn weights.
pub const INIT_STD: f64 = 0.02;

/// How a parameter tensor is initialized and which baseline keeps it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Token, positional or unembedding matrix.
    Embedding,
    /// Attention or MLP weight matrix.
    Weight,
    /// MLP bias.
    WeightBias,
    NormGain,
    NormBias,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Block index for per-layer tensors.
    pub layer: Option<usize>,
}

/// Canonical parameter names.
pub mod names {
    pub const TOKEN_EMBEDDING: &str = "tok_emb";
    pub const POSITIONAL_EMBEDDING: &str = "pos_emb";
    pub const FINAL_NORM_GAIN: &str = "ln_f.gain";
    pub const FINAL_NORM_BIAS: &str = "ln_f.bias";
    pub const UNEMBEDDING: &str = "unembed";

    pub fn w_q(layer: usize) -> String {
        format!("layers.{layer}.attn.w_q")
    }
    pub fn w_k(layer: usize) -> String {
        format!("layers.{layer}.attn.w_k")
    }
    pub fn w_v(layer: usize) -> String {
        format!("layers.{layer}.attn.w_v")
    }
    pub fn w_o(layer: usize) -> String {
        format!("layers.{layer}.attn.w_o")
    }
    pub fn ln1_gain(layer: usize) -> String {
        format!("layers.{layer}.ln1.gain")
    }
    pub fn ln1_bias(layer: usize) -> String {
        format!("layers.{layer}.ln1.bias")
    }
    pub fn ln2_gain(layer: usize) -> String {
        format!("layers.{layer}.ln2.gain")
    }
    pub fn ln2_bias(layer: usize) -> String {
        format!("layers.{layer}.ln2.bias")
    }
    pub fn mlp_w_in(layer: usize) -> String {
        format!("layers.{layer}.mlp.w_in")
    }
    pub fn mlp_b_in(layer: usize) -> String {
        format!("layers.{layer}.mlp.b_in")
    }
    pub fn mlp_w_out(layer: usize) -> String {
        format!("layers.{layer}.mlp.w_out")
    }
    pub fn mlp_b_out(layer: usize) -> String {
        format!("layers.{layer}.mlp.b_out")
    }

    /// Block index encoded in a per-layer name.
    pub fn layer_of(name: &str) -> Option<usize> {
        name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
    }
}

/// Every tensor of a model in canonical (draw and storage) order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    use ParamKind::*;
    let d = cfg.d_model;
    let spec = |name: String, shape: Vec<usize>, kind, layer| ParamSpec {
        name,
        shape,
        kind,
        layer,
    };
    let mut out = vec![
        spec(names::TOKEN_EMBEDDING.into(), vec![cfg.vocab_size, d], Embedding, None),
        spec(
            names::POSITIONAL_EMBEDDING.into(),
            vec![cfg.max_seq_len, d],
            Embedding,
            None,
        ),
    ];
    for l in 0..cfg.n_layers {
        let at = Some(l);
        out.extend([
            spec(names::ln1_gain(l), vec![d], NormGain, at),
            spec(names::ln1_bias(l), vec![d], NormBias, at),
            spec(names::w_q(l), vec![d, d], Weight, at),
            spec(names::w_k(l), vec![d, d], Weight, at),
            spec(names::w_v(l), vec![d, d], Weight, at),
            spec(names::w_o(l), vec![d, d], Weight, at),
            spec(names::ln2_gain(l), vec![d], NormGain, at),
            spec(names::ln2_bias(l), vec![d], NormBias, at),
            spec(names::mlp_w_in(l), vec![d, cfg.d_mlp()], Weight, at),
            spec(names::mlp_b_in(l), vec![cfg.d_mlp()], WeightBias, at),
            spec(names::mlp_w_out(l), vec![cfg.d_mlp(), d], Weight, at),
            spec(names::mlp_b_out(l), vec![d], WeightBias, at),
        ]);
    }
    out.extend([
        spec(names::FINAL_NORM_GAIN.into(), vec![d], NormGain, None),
        spec(names::FINAL_NORM_BIAS.into(), vec![d], NormBias, None),
        spec(names::UNEMBEDDING.into(), vec![d, cfg.vocab_size], Embedding, None),
    ]);
    out
}

/// Named tensors of one transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

/// Where initial weights come from.
#[derive(Clone, Debug)]
pub enum InitScheme {
    Random,
    TrainedCheckpoint(PathBuf),
}

impl Parameters {
    /// Assembles parameters, checking names and shapes against `config`.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        let mut problems = Vec::new();
        for s in &specs {
            match tensors.get(&s.name) {
                None => problems.push(format!("{} (missing)", s.name)),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    problems.push(format!("{} (shape {:?}, expected {:?})", s.name, t.shape(), s.shape))
                }
                Some(t) if !t.is_finite() => problems.push(format!("{} (non-finite)", s.name)),
                _ => {}
            }
        }
        for name in tensors.keys() {
            if !specs.iter().any(|s| &s.name == name) {
                problems.push(format!("{name} (unknown)"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ParamMismatch(problems.join(", ")));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Largest absolute entry-wise difference over all tensors.
    pub fn max_abs_diff(&self, other: &Parameters) -> f64 {
        self.tensors
            .iter()
            .map(|(k, t)| t.max_abs_diff(other.get(k)))
            .fold(0.0, f64::max)
    }

    pub fn bitwise_eq(&self, other: &Parameters) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .all(|(k, t)| other.try_get(k).is_some_and(|o| t.bitwise_eq(o)))
    }
}

/// Builds the initial parameters.
///
/// The random scheme draws every embedding and weight matrix from
/// `N(0, 0.02²)` in [`param_specs`] order, sets layer-norm gains to one and all
/// biases to zero.
pub fn init_params(config: &ModelConfig, seed: u64, scheme: &InitScheme) -> Result<Parameters> {
    config.validate()?;
    match scheme {
        InitScheme::Random => Ok(random_params(config, seed)),
        InitScheme::TrainedCheckpoint(path) => {
            let params = crate::harness::checkpoint::load_checkpoint(path)?;
            let diff = params.config().diff(config);
            if !diff.is_empty() {
                let offending: Vec<String> = param_specs(config)
                    .iter()
                    .filter(|s| params.try_get(&s.name).map(|t| t.shape()) != Some(s.shape.as_slice()))
                    .map(|s| s.name.clone())
                    .collect();
                return Err(Error::ParamMismatch(format!(
                    "checkpoint config differs in {}; offending tensors: [{}]",
                    diff.join(", "),
                    offending.join(", ")
                )));
            }
            Ok(params)
        }
    }
}

fn random_params(config: &ModelConfig, seed: u64) -> Parameters {
    let mut prng = Prng::new(seed).split_named("init");
    let tensors = param_specs(config)
        .into_iter()
        .map(|s| {
            let t = match s.kind {
                ParamKind::Embedding | ParamKind::Weight => prng.gaussian(&s.shape, INIT_STD),
                ParamKind::NormGain => Tensor::full(&s.shape, 1.0),
                ParamKind::WeightBias | ParamKind::NormBias => Tensor::zeros(&s.shape),
            };
            (s.name, t)
        })
        .collect();
    Parameters {
        config: config.clone(),
        tensors,
    }
}

/// "Trained Embeddings" baseline.
///
/// Keeps token, positional and unembedding matrices and every layer-norm
/// gain and bias from `trained`. Attention and MLP tensors come from
/// `init_params(config, seed, Random)`, so they match that draw exactly.
pub fn init_trained_embeddings(config: &ModelConfig, trained: &Parameters, seed: u64) -> Result<Parameters> {
    let diff = trained.config().diff(config);
    if !diff.is_empty() {
        return Err(Error::ParamMismatch(format!(
            "trained parameters differ from config in {}",
            diff.join(", ")
        )));
    }
    let mut out = random_params(config, seed);
    for s in param_specs(config) {
        if matches!(s.kind, ParamKind::Embedding | ParamKind::NormGain | ParamKind::NormBias) {
            *out.get_mut(&s.name) = trained.get(&s.name).clone();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny(12, 10)
    }

    #[test]
    fn random_init_is_deterministic() {
        let a = init_params(&cfg(), 5, &InitScheme::Random).unwrap();
        let b = init_params(&cfg(), 5, &InitScheme::Random).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = init_params(&cfg(), 6, &InitScheme::Random).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn norms_start_at_identity() {
        let p = init_params(&cfg(), 1, &InitScheme::Random).unwrap();
        for s in param_specs(&cfg()) {
            match s.kind {
                ParamKind::NormGain => assert!(p.get(&s.name).data().iter().all(|v| *v == 1.0)),
                ParamKind::NormBias | ParamKind::WeightBias => {
                    assert!(p.get(&s.name).data().iter().all(|v| *v == 0.0))
                }
                _ => {}
            }
        }
    }

    #[test]
    fn weight_std_matches_init_scale() {
        // Statistical oracle: sample std of >= 10^5 N(0, 0.02²) draws has
        // standard error ~ 0.02 / sqrt(2n) ~ 4.5e-5.
        let big = ModelConfig::default();
        let p = init_params(&big, 9, &InitScheme::Random).unwrap();
        let values: Vec<f64> = param_specs(&big)
            .iter()
            .filter(|s| s.kind == ParamKind::Weight)
            .flat_map(|s| p.get(&s.name).data().to_vec())
            .collect();
        assert!(values.len() >= 100_000);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.02).abs() <= 0.001, "std {std}");
    }

    #[test]
    fn trained_embeddings_keeps_embeddings_and_norms() {
        let trained = init_params(&cfg(), 100, &InitScheme::Random).unwrap();
        let te = init_trained_embeddings(&cfg(), &trained, 7).unwrap();
        let fresh = init_params(&cfg(), 7, &InitScheme::Random).unwrap();
        for s in param_specs(&cfg()) {
            match s.kind {
                ParamKind::Embedding | ParamKind::NormGain | ParamKind::NormBias => {
                    assert!(te.get(&s.name).bitwise_eq(trained.get(&s.name)), "{}", s.name)
                }
                ParamKind::Weight | ParamKind::WeightBias => {
                    assert!(te.get(&s.name).bitwise_eq(fresh.get(&s.name)), "{}", s.name)
                }
            }
        }
        for l in 0..cfg().n_layers {
            let name = names::w_q(l);
            assert!(te.get(&name).max_abs_diff(trained.get(&name)) > 0.0);
        }
    }

    #[test]
    fn mismatched_shapes_are_listed() {
        let p = init_params(&cfg(), 1, &InitScheme::Random).unwrap();
        let mut tensors = p.tensors().clone();
        tensors.insert(names::w_k(1), Tensor::zeros(&[3, 3]));
        tensors.remove(names::UNEMBEDDING);
        let err = Parameters::from_tensors(cfg(), tensors).unwrap_err().to_string();
        assert!(err.contains("layers.1.attn.w_k"), "{err}");
        assert!(err.contains("unembed (missing)"), "{err}");
    }

    #[test]
    fn layer_of_parses_names() {
        assert_eq!(names::layer_of(&names::w_v(3)), Some(3));
        assert_eq!(names::layer_of(names::UNEMBEDDING), None);
    }
}
