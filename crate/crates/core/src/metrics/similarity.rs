use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMap, ForwardTrace};

/// Norm below which an update vector counts as degenerate.
pub const EXCLUSION_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "SimAOU")]
    SimAou,
    #[serde(rename = "SimAOU_norm")]
    SimAouNorm,
    #[serde(rename = "SimAM")]
    SimAm,
    #[serde(rename = "SimAM_delta")]
    SimAmDelta,
    #[serde(rename = "alpha")]
    Alpha,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::SimAou,
        Metric::SimAouNorm,
        Metric::SimAm,
        Metric::SimAmDelta,
        Metric::Alpha,
    ];

    /// Whether the metric is computed per head.
    pub fn per_head(self) -> bool {
        matches!(self, Metric::SimAm | Metric::SimAmDelta | Metric::Alpha)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::SimAou => "SimAOU",
            Metric::SimAouNorm => "SimAOU_norm",
            Metric::SimAm => "SimAM",
            Metric::SimAmDelta => "SimAM_delta",
            Metric::Alpha => "alpha",
        })
    }
}

/// Result of [`cosine`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cosine {
    Value(f64),
    /// One of the vectors had norm below `eps`.
    Excluded,
}

impl Cosine {
    pub fn value(self) -> Option<f64> {
        match self {
            Cosine::Value(v) => Some(v),
            Cosine::Excluded => None,
        }
    }
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]` against round-off.
pub fn cosine(u: &[f64], v: &[f64], eps: f64) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nu >= eps && nv >= eps) {
        return Ok(Cosine::Excluded);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(Cosine::Value((dot / (nu * nv)).clamp(-1.0, 1.0)))
}

/// Per-layer cosine scores with their layer mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub metric: Metric,
    /// Layer values; `None` when every contributing entry was excluded.
    pub per_layer: Vec<Option<f64>>,
    /// `[layer][head]` values for map metrics.
    pub per_head: Option<Vec<Vec<Option<f64>>>>,
    /// Mean over non-excluded layers.
    pub mean: Option<f64>,
    /// Sample std over non-excluded layers (0 for a single layer).
    pub std: Option<f64>,
    /// Excluded layer (vector metrics) or head (map metrics) entries.
    pub excluded_count: usize,
}

impl SimilarityScore {
    /// Score from per-layer values; mean and std skip `None`.
    pub fn from_layers(metric: Metric, per_layer: Vec<Option<f64>>, excluded_count: usize) -> Self {
        let (mean, std) = mean_std(per_layer.iter().flatten().copied());
        Self {
            metric,
            per_layer,
            per_head: None,
            mean,
            std,
            excluded_count,
        }
    }

    fn from_heads(metric: Metric, per_head: Vec<Vec<Option<f64>>>) -> Self {
        let excluded = per_head.iter().flatten().filter(|v| v.is_none()).count();
        let per_layer = per_head
            .iter()
            .map(|hs| mean_std(hs.iter().flatten().copied()).0)
            .collect();
        Self {
            per_head: Some(per_head),
            ..Self::from_layers(metric, per_layer, excluded)
        }
    }
}

/// Mean and sample standard deviation; `None` for an empty input.
pub(crate) fn mean_std(values: impl Iterator<Item = f64>) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(std))
}

fn check_layers(traces: &[&ForwardTrace]) -> Result<usize> {
    let l = traces[0].n_layers();
    if traces.iter().any(|t| t.n_layers() != l) {
        let counts: Vec<usize> = traces.iter().map(|t| t.n_layers()).collect();
        return Err(Error::Shape(format!("traces have layer counts {counts:?}")));
    }
    Ok(l)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Attention-output update similarity at the last position of each trace:
/// `cos(h_icl - h_zsl, h_ft - h_zsl)` per layer. With `normalize`, every
/// `h` is scaled to unit norm first.
pub fn sim_aou(icl: &ForwardTrace, ft: &ForwardTrace, zsl: &ForwardTrace, normalize: bool) -> Result<SimilarityScore> {
    let n_layers = check_layers(&[icl, ft, zsl])?;
    let mut per_layer = Vec::with_capacity(n_layers);
    let mut excluded = 0;
    for l in 0..n_layers {
        let (mut hi, mut hf, mut hz) = (
            icl.last_attention_output(l).to_vec(),
            ft.last_attention_output(l).to_vec(),
            zsl.last_attention_output(l).to_vec(),
        );
        if normalize {
            (hi, hf, hz) = (unit(&hi), unit(&hf), unit(&hz));
        }
        let c = cosine(&diff(&hi, &hz), &diff(&hf, &hz), EXCLUSION_EPS)?;
        if c == Cosine::Excluded {
            excluded += 1;
        }
        per_layer.push(c.value());
    }
    let metric = if normalize { Metric::SimAouNorm } else { Metric::SimAou };
    Ok(SimilarityScore::from_layers(metric, per_layer, excluded))
}

fn check_maps(traces: &[&ForwardTrace]) -> Result<()> {
    check_layers(traces)?;
    let shape = |t: &ForwardTrace| -> Vec<Vec<usize>> {
        t.attention_maps
            .iter()
            .map(|hs| hs.iter().map(AttentionMap::size).collect())
            .collect()
    };
    let first = shape(traces[0]);
    if first.iter().all(Vec::is_empty) && traces[0].n_layers() > 0 {
        return Err(Error::Shape("trace has no attention maps".into()));
    }
    for t in &traces[1..] {
        let other = shape(t);
        if other != first {
            return Err(Error::Shape(format!(
                "attention map shapes differ: {first:?} vs {other:?}"
            )));
        }
    }
    Ok(())
}

fn per_head_scores(
    a: &ForwardTrace,
    b: &ForwardTrace,
    f: impl Fn(&AttentionMap, &AttentionMap) -> Result<Cosine>,
) -> Result<Vec<Vec<Option<f64>>>> {
    a.attention_maps
        .iter()
        .zip(&b.attention_maps)
        .map(|(ha, hb)| ha.iter().zip(hb).map(|(x, y)| f(x, y).map(Cosine::value)).collect())
        .collect()
}

/// Cosine of the raw unmasked pre-softmax maps, per head.
pub fn sim_am(icl: &ForwardTrace, ft: &ForwardTrace) -> Result<SimilarityScore> {
    check_maps(&[icl, ft])?;
    let heads = per_head_scores(icl, ft, |a, b| cosine(a.unmasked(), b.unmasked(), EXCLUSION_EPS))?;
    Ok(SimilarityScore::from_heads(Metric::SimAm, heads))
}

fn delta_heads(a: &ForwardTrace, b: &ForwardTrace, zsl: &ForwardTrace) -> Result<Vec<Vec<Option<f64>>>> {
    check_maps(&[a, b, zsl])?;
    let mut out = Vec::with_capacity(a.n_layers());
    for l in 0..a.n_layers() {
        let mut row = Vec::new();
        for h in 0..a.attention_maps[l].len() {
            let z = zsl.attention_maps[l][h].unmasked();
            let da = diff(a.attention_maps[l][h].unmasked(), z);
            let db = diff(b.attention_maps[l][h].unmasked(), z);
            row.push(cosine(&da, &db, EXCLUSION_EPS)?.value());
        }
        out.push(row);
    }
    Ok(out)
}

/// Cosine of the map updates `m_icl - m_zsl` and `m_ft - m_zsl`, per head.
pub fn sim_am_delta(icl: &ForwardTrace, ft: &ForwardTrace, zsl: &ForwardTrace) -> Result<SimilarityScore> {
    Ok(SimilarityScore::from_heads(
        Metric::SimAmDelta,
        delta_heads(icl, ft, zsl)?,
    ))
}

/// Map-update similarity between the two finetuning methods.
pub fn alpha_gd_lcgd(gd: &ForwardTrace, lcgd: &ForwardTrace, zsl: &ForwardTrace) -> Result<SimilarityScore> {
    Ok(SimilarityScore::from_heads(Metric::Alpha, delta_heads(lcgd, gd, zsl)?))
}
