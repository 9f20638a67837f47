//! The ICL-vs-finetuning benchmark.
//!
//! Every (baseline, seed) arm is independent: it builds its model variant,
//! then for each test episode traces the bare query (ZSL), the full prompt
//! (ICL, sliced to the query) and the bare query again after finetuning a
//! fresh copy on the episode's demonstrations with each method.
//!
//! Per episode and method the rows CSV holds, for `L` layers and `H` heads,
//! `L + 1` rows for each attention-output metric (layers, then the mean) and
//! `L·H + L + 1` rows for each map metric (heads, layer means, overall mean).
//! With both methods there is one more `L·H + L + 1` block for `alpha`. So an
//! episode contributes `M·(2(L+1) + 2(LH+L+1)) + [M = 2]·(LH+L+1)` rows for
//! `M` methods.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Baseline, BenchmarkConfig};
use super::svg;
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_layerwise, alpha_gd_lcgd, sim_am, sim_am_delta, sim_aou, LayerAggregate, Metric, SimilarityScore,
};
use crate::model::{
    argmax_among, forward_trace, icl_slice, init_params, init_trained_embeddings, Capture, ForwardTrace, InitScheme,
    ModelConfig, Parameters,
};
use crate::numerics::Prng;
use crate::optim::{finetune, write_grad_norms_csv, GradNormTrace, Method};
use crate::tasks::{format_icl_prompt, format_zsl_prompt, load_jsonl, sample_episode, test_span, Episode, TaskConfig};

/// `method` column value of the rows comparing the two finetuning methods.
pub const ALPHA_METHOD: &str = "GD_vs_LCGD";

/// One line of the rows CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: Metric,
    pub baseline: Baseline,
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub episode: usize,
    /// Layer index or `mean`.
    pub layer: String,
    /// Head index or `mean`.
    pub head: String,
    /// Empty when every contributing entry was excluded.
    pub value: Option<f64>,
    pub excluded_count: usize,
}

/// Rows per episode for `m` methods on an `l`-layer, `h`-head model.
pub fn rows_per_episode(m: usize, l: usize, h: usize) -> usize {
    let map_block = l * h + l + 1;
    m * (2 * (l + 1) + 2 * map_block) + if m == 2 { map_block } else { 0 }
}

/// Per-layer statistics across seeds for one (metric, baseline, method).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseRow {
    pub metric: Metric,
    pub baseline: Baseline,
    pub method: String,
    pub layer: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Seeds contributing a value.
    pub count: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMean {
    pub seed: u64,
    pub mean: Option<f64>,
}

/// Aggregate of the overall-mean rows of one (metric, baseline, method).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub metric: Metric,
    pub baseline: Baseline,
    pub method: String,
    /// Mean of the non-empty `layer = mean, head = mean` rows.
    pub mean: Option<f64>,
    /// Sample std of the per-seed means.
    pub std: Option<f64>,
    pub n_values: usize,
    /// Overall-mean rows that were empty.
    pub n_excluded: usize,
    pub per_seed: Vec<SeedMean>,
}

/// Label accuracy of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmAccuracy {
    pub baseline: Baseline,
    pub seed: u64,
    pub episodes: usize,
    pub icl: f64,
    pub zero_shot: f64,
    pub finetuned: BTreeMap<Method, f64>,
}

/// Whether LCGD scored at least as high as GD, logged but never asserted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Directional {
    pub baseline: Baseline,
    pub metric: Metric,
    pub gd: Option<f64>,
    pub lcgd: Option<f64>,
    pub lcgd_ge_gd: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub notes: Vec<String>,
    pub model: ModelConfig,
    pub config: BenchmarkConfig,
    pub n_rows: usize,
    pub rows_per_episode: usize,
    pub entries: Vec<SummaryEntry>,
    pub accuracy: Vec<ArmAccuracy>,
    pub directional: Vec<Directional>,
}

/// Everything a benchmark run produces, before it is written out.
#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub rows: Vec<ReportRow>,
    pub layerwise: Vec<LayerwiseRow>,
    /// Per baseline, one step-averaged trace per method.
    pub grad_norms: BTreeMap<Baseline, Vec<GradNormTrace>>,
    pub summary: Summary,
}

const NOTES: &[&str] = &[
    "Finetuning runs per test episode on that episode's demonstrations, since every episode has its own label mapping.",
    "ZSL and finetuned traces use the bare query prompt at offset 0; ICL traces are sliced to the query span.",
    "Map metrics average heads within a layer first, then layers.",
    "Update vectors with norm below 1e-12 are excluded, not scored; excluded counts are reported.",
    "Layerwise std is across seeds of per-seed episode means; summary std is across seed means.",
];

struct Arm {
    baseline: Baseline,
    seed: u64,
    rows: Vec<ReportRow>,
    scores: BTreeMap<(Metric, String), Vec<SimilarityScore>>,
    norms: BTreeMap<Method, Vec<GradNormTrace>>,
    accuracy: ArmAccuracy,
}

struct Prepared {
    model: ModelConfig,
    trained: Option<Parameters>,
    episodes: BTreeMap<u64, Vec<Episode>>,
}

fn prepare(cfg: &BenchmarkConfig) -> Result<Prepared> {
    cfg.validate()?;
    let trained = match &cfg.checkpoint {
        Some(path) if cfg.baselines.iter().any(|b| b.needs_checkpoint()) => {
            if !path.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
            }
            let model = match &cfg.model {
                Some(m) => m.clone(),
                None => super::checkpoint::read_header(path)?.config,
            };
            Some(init_params(&model, 0, &InitScheme::TrainedCheckpoint(path.clone()))?)
        }
        _ => None,
    };
    let model = match (&cfg.model, &trained) {
        (Some(m), _) => m.clone(),
        (None, Some(p)) => p.config().clone(),
        (None, None) => ModelConfig::default(),
    };
    model.validate()?;
    cfg.task.check_vocab(model.vocab_size)?;

    let loaded = match &cfg.episodes_path {
        Some(p) => Some(load_jsonl(p, cfg.task.vocab_size())?),
        None => None,
    };
    let mut episodes = BTreeMap::new();
    for &seed in &cfg.seeds {
        let list = match &loaded {
            Some(l) => l.clone(),
            None => {
                let mut prng = Prng::new(seed).split_named("test-episodes");
                (0..cfg.n_test_episodes)
                    .map(|_| sample_episode(&cfg.task, &mut prng))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        for e in &list {
            format_icl_prompt(&cfg.task, e, model.max_seq_len)?;
            cfg.finetune.order(e.demonstrations.len())?;
        }
        episodes.insert(seed, list);
    }
    Ok(Prepared {
        model,
        trained,
        episodes,
    })
}

/// Model variant of an arm. Random draws are keyed by the seed.
pub fn baseline_params(
    baseline: Baseline,
    seed: u64,
    model: &ModelConfig,
    trained: Option<&Parameters>,
) -> Result<Parameters> {
    let init_seed = Prng::new(seed).split_named("baseline-init").next_u64();
    let need = || trained.ok_or_else(|| Error::Config(format!("baseline {baseline} needs a checkpoint")));
    match baseline {
        Baseline::Trained => Ok(need()?.clone()),
        Baseline::TrainedEmbeddings => init_trained_embeddings(model, need()?, init_seed),
        Baseline::NoTraining => init_params(model, init_seed, &InitScheme::Random),
    }
}

struct RowKey<'a> {
    baseline: Baseline,
    method: &'a str,
    task: &'a str,
    seed: u64,
    episode: usize,
}

fn push_score_rows(rows: &mut Vec<ReportRow>, key: &RowKey, score: &SimilarityScore) {
    let row = |layer: String, head: String, value: Option<f64>, excluded_count: usize| ReportRow {
        metric: score.metric,
        baseline: key.baseline,
        method: key.method.to_string(),
        task: key.task.to_string(),
        seed: key.seed,
        episode: key.episode,
        layer,
        head,
        value,
        excluded_count,
    };
    let mean = || "mean".to_string();
    match &score.per_head {
        Some(heads) => {
            for (l, hs) in heads.iter().enumerate() {
                for (h, v) in hs.iter().enumerate() {
                    rows.push(row(l.to_string(), h.to_string(), *v, v.is_none() as usize));
                }
            }
            for (l, hs) in heads.iter().enumerate() {
                let excl = hs.iter().filter(|v| v.is_none()).count();
                rows.push(row(l.to_string(), mean(), score.per_layer[l], excl));
            }
        }
        None => {
            for (l, v) in score.per_layer.iter().enumerate() {
                rows.push(row(l.to_string(), mean(), *v, v.is_none() as usize));
            }
        }
    }
    rows.push(row(mean(), mean(), score.mean, score.excluded_count));
}

fn predicted(trace: &ForwardTrace, task: &TaskConfig) -> usize {
    argmax_among(trace.logits.row(trace.len() - 1), task.label_tokens())
}

fn run_arm(cfg: &BenchmarkConfig, prep: &Prepared, baseline: Baseline, seed: u64) -> Result<Arm> {
    let params = baseline_params(baseline, seed, &prep.model, prep.trained.as_ref())?;
    let capture = Capture {
        output_site: cfg.output_site,
        ..Capture::default()
    };
    let episodes = &prep.episodes[&seed];
    let max_len = prep.model.max_seq_len;
    let mut rows = Vec::new();
    let mut scores: BTreeMap<(Metric, String), Vec<SimilarityScore>> = BTreeMap::new();
    let mut norms: BTreeMap<Method, Vec<GradNormTrace>> = BTreeMap::new();
    let (mut icl_ok, mut zsl_ok) = (0, 0);
    let mut ft_ok: BTreeMap<Method, usize> = BTreeMap::new();

    for (idx, e) in episodes.iter().enumerate() {
        let zsl_tokens = format_zsl_prompt(&cfg.task, e, max_len)?;
        let icl_tokens = format_icl_prompt(&cfg.task, e, max_len)?;
        let zsl = forward_trace(&params, &zsl_tokens, capture)?;
        let icl = icl_slice(&forward_trace(&params, &icl_tokens, capture)?, test_span(&cfg.task, e))?;
        icl_ok += (predicted(&icl, &cfg.task) == e.gold) as usize;
        zsl_ok += (predicted(&zsl, &cfg.task) == e.gold) as usize;

        let mut ft_traces = BTreeMap::new();
        for &method in &cfg.methods {
            let (ft_params, trace) = finetune(method, &params, &cfg.task, &e.demonstrations, &cfg.finetune)?;
            norms.entry(method).or_default().push(trace);
            let ft = forward_trace(&ft_params, &zsl_tokens, capture)?;
            *ft_ok.entry(method).or_default() += (predicted(&ft, &cfg.task) == e.gold) as usize;
            let key = RowKey {
                baseline,
                method: &method.to_string(),
                task: &cfg.task_name,
                seed,
                episode: idx,
            };
            for score in [
                sim_aou(&icl, &ft, &zsl, false)?,
                sim_aou(&icl, &ft, &zsl, true)?,
                sim_am(&icl, &ft)?,
                sim_am_delta(&icl, &ft, &zsl)?,
            ] {
                push_score_rows(&mut rows, &key, &score);
                scores
                    .entry((score.metric, method.to_string()))
                    .or_default()
                    .push(score);
            }
            ft_traces.insert(method, ft);
        }
        if let (Some(gd), Some(lcgd)) = (ft_traces.get(&Method::Gd), ft_traces.get(&Method::Lcgd)) {
            let score = alpha_gd_lcgd(gd, lcgd, &zsl)?;
            let key = RowKey {
                baseline,
                method: ALPHA_METHOD,
                task: &cfg.task_name,
                seed,
                episode: idx,
            };
            push_score_rows(&mut rows, &key, &score);
            scores
                .entry((Metric::Alpha, ALPHA_METHOD.to_string()))
                .or_default()
                .push(score);
        }
    }
    let n = episodes.len().max(1) as f64;
    Ok(Arm {
        baseline,
        seed,
        rows,
        scores,
        norms,
        accuracy: ArmAccuracy {
            baseline,
            seed,
            episodes: episodes.len(),
            icl: icl_ok as f64 / n,
            zero_shot: zsl_ok as f64 / n,
            finetuned: ft_ok.into_iter().map(|(m, c)| (m, c as f64 / n)).collect(),
        },
    })
}

fn mean_of(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn sample_std(values: &[f64]) -> Option<f64> {
    let m = mean_of(values)?;
    if values.len() < 2 {
        return Some(0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Step-wise mean of several traces; steps beyond a trace's length are skipped.
fn average_traces(method: Method, traces: &[GradNormTrace]) -> GradNormTrace {
    let n_layers = traces.first().map_or(0, GradNormTrace::n_layers);
    let n_steps = traces.iter().map(GradNormTrace::n_steps).max().unwrap_or(0);
    let mut out = GradNormTrace::new(method, n_layers);
    for (l, row) in out.norms.iter_mut().enumerate() {
        for s in 0..n_steps {
            let vals: Vec<f64> = traces.iter().filter_map(|t| t.norms[l].get(s).copied()).collect();
            row.push(mean_of(&vals).unwrap_or(0.0));
        }
    }
    out
}

fn method_labels(cfg: &BenchmarkConfig) -> Vec<String> {
    let mut labels: Vec<String> = cfg.methods.iter().map(Method::to_string).collect();
    if cfg.methods.len() == 2 {
        labels.push(ALPHA_METHOD.into());
    }
    labels
}

/// Runs the benchmark in memory.
pub fn compute_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let prep = prepare(cfg)?;
    let jobs: Vec<(Baseline, u64)> = cfg
        .baselines
        .iter()
        .flat_map(|&b| cfg.seeds.iter().map(move |&s| (b, s)))
        .collect();
    let arms = jobs
        .par_iter()
        .map(|&(b, s)| run_arm(cfg, &prep, b, s))
        .collect::<Result<Vec<Arm>>>()?;

    let rows: Vec<ReportRow> = arms.iter().flat_map(|a| a.rows.iter().cloned()).collect();
    let mut layerwise = Vec::new();
    let mut entries = Vec::new();
    for metric in Metric::ALL {
        for &baseline in &cfg.baselines {
            for method in method_labels(cfg) {
                if (metric == Metric::Alpha) != (method == ALPHA_METHOD) {
                    continue;
                }
                let key = (metric, method.clone());
                let mut per_seed_scores = Vec::new();
                let mut per_seed = Vec::new();
                for arm in arms.iter().filter(|a| a.baseline == baseline) {
                    let Some(list) = arm.scores.get(&key) else { continue };
                    let n_layers = list.first().map_or(0, |s| s.per_layer.len());
                    let per_layer = (0..n_layers)
                        .map(|l| mean_of(&list.iter().filter_map(|s| s.per_layer[l]).collect::<Vec<_>>()))
                        .collect();
                    per_seed_scores.push(SimilarityScore::from_layers(metric, per_layer, 0));
                    let means: Vec<f64> = list.iter().filter_map(|s| s.mean).collect();
                    per_seed.push(SeedMean {
                        seed: arm.seed,
                        mean: mean_of(&means),
                    });
                }
                if per_seed_scores.is_empty() {
                    continue;
                }
                for LayerAggregate {
                    layer,
                    mean,
                    std,
                    count,
                    excluded,
                } in aggregate_layerwise(&per_seed_scores)?
                {
                    layerwise.push(LayerwiseRow {
                        metric,
                        baseline,
                        method: method.clone(),
                        layer,
                        mean,
                        std,
                        count,
                        excluded,
                    });
                }
                let overall: Vec<&ReportRow> = rows
                    .iter()
                    .filter(|r| {
                        r.metric == metric
                            && r.baseline == baseline
                            && r.method == method
                            && r.layer == "mean"
                            && r.head == "mean"
                    })
                    .collect();
                let values: Vec<f64> = overall.iter().filter_map(|r| r.value).collect();
                let seed_means: Vec<f64> = per_seed.iter().filter_map(|s| s.mean).collect();
                entries.push(SummaryEntry {
                    metric,
                    baseline,
                    method,
                    mean: mean_of(&values),
                    std: sample_std(&seed_means),
                    n_values: values.len(),
                    n_excluded: overall.len() - values.len(),
                    per_seed,
                });
            }
        }
    }

    let mut directional = Vec::new();
    if cfg.methods.contains(&Method::Gd) && cfg.methods.contains(&Method::Lcgd) {
        for &baseline in &cfg.baselines {
            for metric in [Metric::SimAou, Metric::SimAmDelta] {
                let find = |m: Method| {
                    entries
                        .iter()
                        .find(|e| e.metric == metric && e.baseline == baseline && e.method == m.to_string())
                        .and_then(|e| e.mean)
                };
                let (gd, lcgd) = (find(Method::Gd), find(Method::Lcgd));
                directional.push(Directional {
                    baseline,
                    metric,
                    gd,
                    lcgd,
                    lcgd_ge_gd: gd.zip(lcgd).map(|(g, l)| l >= g),
                });
            }
        }
    }

    let mut grad_norms = BTreeMap::new();
    for &baseline in &cfg.baselines {
        let traces = cfg
            .methods
            .iter()
            .map(|&m| {
                let all: Vec<GradNormTrace> = arms
                    .iter()
                    .filter(|a| a.baseline == baseline)
                    .flat_map(|a| a.norms.get(&m).cloned().unwrap_or_default())
                    .collect();
                average_traces(m, &all)
            })
            .collect();
        grad_norms.insert(baseline, traces);
    }

    let summary = Summary {
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
        rows_per_episode: rows_per_episode(cfg.methods.len(), prep.model.n_layers, prep.model.n_heads),
        model: prep.model,
        config: cfg.clone(),
        n_rows: rows.len(),
        entries,
        accuracy: arms.iter().map(|a| a.accuracy.clone()).collect(),
        directional,
    };
    Ok(BenchmarkReport {
        rows,
        layerwise,
        grad_norms,
        summary,
    })
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the report files into `dir` and returns their paths.
///
/// Files: `rows.csv`, `summary.json`, `layerwise.csv`,
/// `grad_norms_<baseline>.csv` and, with `plots`, SVGs under `plots/`.
pub fn write_report(report: &BenchmarkReport, dir: &Path, plots: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let rows = dir.join("rows.csv");
    write_csv_rows(&rows, &report.rows)?;
    files.push(rows);
    let summary = dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(&report.summary)?;
    json.push('\n');
    write_file(&summary, json)?;
    files.push(summary);
    let layerwise = dir.join("layerwise.csv");
    write_csv_rows(&layerwise, &report.layerwise)?;
    files.push(layerwise);
    for (baseline, traces) in &report.grad_norms {
        let path = dir.join(format!("grad_norms_{baseline}.csv"));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_grad_norms_csv(traces, std::io::BufWriter::new(file))?;
        files.push(path);
    }
    if plots {
        let plot_dir = dir.join("plots");
        fs::create_dir_all(&plot_dir).map_err(|e| Error::io(&plot_dir, e))?;
        for metric in Metric::ALL {
            let rows: Vec<&LayerwiseRow> = report.layerwise.iter().filter(|r| r.metric == metric).collect();
            if rows.is_empty() {
                continue;
            }
            let mut series: Vec<svg::Series> = Vec::new();
            for r in &rows {
                let label = format!("{} {}", r.baseline, r.method);
                match series.iter_mut().find(|s| s.label == label) {
                    Some(s) => s.values.push((r.mean, r.std)),
                    None => series.push(svg::Series {
                        label,
                        values: vec![(r.mean, r.std)],
                    }),
                }
            }
            let path = plot_dir.join(format!("layerwise_{metric}.svg"));
            write_file(&path, svg::layer_bars(&format!("{metric} by layer"), &series))?;
            files.push(path);
        }
        for (baseline, traces) in &report.grad_norms {
            for t in traces {
                let log = t.method == Method::Lcgd;
                let title = format!(
                    "{} gradient norms, {baseline}{}",
                    t.method,
                    if log { " (log10)" } else { "" }
                );
                let path = plot_dir.join(format!("grad_norms_{baseline}_{}.svg", t.method));
                write_file(&path, svg::heatmap(&title, &t.norms, log))?;
                files.push(path);
            }
        }
    }
    Ok(files)
}

/// Runs the benchmark and writes its report into `dir`.
pub fn run_benchmark(cfg: &BenchmarkConfig, dir: &Path) -> Result<(BenchmarkReport, Vec<PathBuf>)> {
    let report = compute_benchmark(cfg)?;
    let files = write_report(&report, dir, cfg.plots)?;
    Ok((report, files))
}
