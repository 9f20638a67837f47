use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use icl_lab::harness::benchmark::baseline_params;
use icl_lab::harness::checkpoint::{read_header, save_checkpoint_with, Dtype};
use icl_lab::harness::{
    compute_benchmark, inspect, load_checkpoint, rows_per_episode, run_benchmark, save_checkpoint, Baseline,
    BenchmarkConfig,
};
use icl_lab::metrics::Metric;
use icl_lab::model::{init_params, names, param_specs, InitScheme, ModelConfig, ParamKind};
use icl_lab::optim::Method;
use icl_lab::tasks::TaskConfig;
use icl_lab::Error;

fn small_model() -> ModelConfig {
    ModelConfig::tiny(TaskConfig::default().vocab_size(), 40)
}

fn config(baselines: &[Baseline], methods: &[Method], seeds: &[u64], episodes: usize) -> BenchmarkConfig {
    BenchmarkConfig {
        model: Some(small_model()),
        task: TaskConfig {
            k_demonstrations: 3,
            ..TaskConfig::default()
        },
        seeds: seeds.to_vec(),
        baselines: baselines.to_vec(),
        methods: methods.to_vec(),
        n_test_episodes: episodes,
        ..BenchmarkConfig::default()
    }
}

fn with_checkpoint(mut cfg: BenchmarkConfig, dir: &Path) -> BenchmarkConfig {
    let path = dir.join("model.ckpt");
    let params = init_params(&small_model(), 99, &InitScheme::Random).unwrap();
    save_checkpoint(&params, &path).unwrap();
    cfg.checkpoint = Some(path);
    cfg
}

#[test]
fn row_count_matches_formula() {
    let cfg = config(&[Baseline::NoTraining], &[Method::Gd], &[0], 2);
    let report = compute_benchmark(&cfg).unwrap();
    let m = small_model();
    assert_eq!(report.rows.len(), 2 * rows_per_episode(1, m.n_layers, m.n_heads));
    assert_eq!(report.summary.n_rows, report.rows.len());

    let both = config(&[Baseline::NoTraining], &[Method::Gd, Method::Lcgd], &[0, 1], 2);
    let report = compute_benchmark(&both).unwrap();
    assert_eq!(report.rows.len(), 2 * 2 * rows_per_episode(2, m.n_layers, m.n_heads));
    let alpha = report.rows.iter().filter(|r| r.metric == Metric::Alpha).count();
    assert_eq!(alpha, 2 * 2 * (m.n_layers * m.n_heads + m.n_layers + 1));
    assert!(report
        .rows
        .iter()
        .filter(|r| r.metric == Metric::Alpha)
        .all(|r| r.method == "GD_vs_LCGD"));
}

fn read_all(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with_checkpoint(
        config(&Baseline::ALL, &[Method::Gd, Method::Lcgd], &[0, 1], 2),
        tmp.path(),
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (_, files) = run_benchmark(&cfg, &a).unwrap();
    run_benchmark(&cfg, &b).unwrap();
    let (fa, fb) = (read_all(&a), read_all(&b));
    assert_eq!(fa.len(), files.len());
    for name in [
        "rows.csv",
        "summary.json",
        "layerwise.csv",
        "grad_norms_Trained.csv",
        "plots/layerwise_SimAOU.svg",
    ] {
        assert!(fa.contains_key(name), "missing {name}");
    }
    assert_eq!(fa, fb);
}

#[test]
fn zero_demo_episodes_are_excluded_not_scored() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("eps.jsonl");
    let mut f = fs::File::create(&path).unwrap();
    writeln!(f, r#"{{"input": [3], "label": 17}}"#).unwrap();
    writeln!(f, r#"{{"input": [5], "label": 18}}"#).unwrap();
    let mut cfg = config(&[Baseline::NoTraining], &[Method::Gd, Method::Lcgd], &[0], 1);
    cfg.episodes_path = Some(path);
    let report = compute_benchmark(&cfg).unwrap();
    for r in &report.rows {
        match r.metric {
            Metric::SimAou | Metric::SimAouNorm | Metric::SimAmDelta | Metric::Alpha => {
                assert_eq!(r.value, None, "{r:?}");
                assert!(r.excluded_count > 0, "{r:?}");
            }
            // ICL and the untouched model share the bare-query prompt.
            Metric::SimAm => assert!((r.value.unwrap() - 1.0).abs() < 1e-12),
        }
    }
    let entry = report
        .summary
        .entries
        .iter()
        .find(|e| e.metric == Metric::SimAou && e.method == "GD")
        .unwrap();
    assert_eq!((entry.mean, entry.n_values, entry.n_excluded), (None, 0, 2));
}

#[derive(serde::Deserialize)]
struct CsvRow {
    metric: String,
    baseline: String,
    method: String,
    seed: u64,
    layer: String,
    head: String,
    value: Option<f64>,
}

#[test]
fn summary_agrees_with_rows_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(&[Baseline::NoTraining], &[Method::Gd, Method::Lcgd], &[3, 4], 3);
    cfg.plots = false;
    let (report, _) = run_benchmark(&cfg, tmp.path()).unwrap();
    let mut reader = csv::Reader::from_path(tmp.path().join("rows.csv")).unwrap();
    let rows: Vec<CsvRow> = reader.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), report.rows.len());
    assert!(!tmp.path().join("plots").exists());

    for e in &report.summary.entries {
        let pick = |seed: Option<u64>| -> Vec<f64> {
            rows.iter()
                .filter(|r| {
                    r.metric == e.metric.to_string()
                        && r.baseline == e.baseline.to_string()
                        && r.method == e.method
                        && r.layer == "mean"
                        && r.head == "mean"
                        && seed.is_none_or(|s| s == r.seed)
                })
                .filter_map(|r| r.value)
                .collect()
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let all = pick(None);
        assert_eq!(all.len(), e.n_values);
        assert!(
            (mean(&all) - e.mean.unwrap()).abs() < 1e-12,
            "{:?} {}",
            e.metric,
            e.method
        );
        let seed_means: Vec<f64> = [3, 4].iter().map(|&s| mean(&pick(Some(s)))).collect();
        let sd = (seed_means[0] - seed_means[1]).abs() / 2f64.sqrt();
        assert!((sd - e.std.unwrap()).abs() < 1e-12);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_rows"], rows.len());
}

#[test]
fn baselines_share_what_they_should() {
    let model = small_model();
    let trained = init_params(&model, 7, &InitScheme::Random).unwrap();
    let t = baseline_params(Baseline::Trained, 0, &model, Some(&trained)).unwrap();
    assert!(t.bitwise_eq(&trained));

    let te = baseline_params(Baseline::TrainedEmbeddings, 0, &model, Some(&trained)).unwrap();
    for spec in param_specs(&model) {
        let kept = matches!(
            spec.kind,
            ParamKind::Embedding | ParamKind::NormGain | ParamKind::NormBias
        );
        let same = te.get(&spec.name).bitwise_eq(trained.get(&spec.name));
        if kept {
            assert!(same, "{} should come from the checkpoint", spec.name);
        } else if spec.kind == ParamKind::Weight {
            assert!(!same, "{} should be re-drawn", spec.name);
        }
    }

    let a = baseline_params(Baseline::NoTraining, 5, &model, None).unwrap();
    let b = baseline_params(Baseline::NoTraining, 5, &model, None).unwrap();
    let c = baseline_params(Baseline::NoTraining, 6, &model, None).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(!a.bitwise_eq(&c));
    // same seed, same random draw for both re-initialized baselines
    let te5 = baseline_params(Baseline::TrainedEmbeddings, 5, &model, Some(&trained)).unwrap();
    assert!(te5.get(&names::w_k(0)).bitwise_eq(a.get(&names::w_k(0))));
}

#[test]
fn trained_baselines_require_a_checkpoint() {
    let cfg = config(&[Baseline::TrainedEmbeddings], &[Method::Gd], &[0], 1);
    let err = compute_benchmark(&cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("checkpoint"));

    let mut missing = config(&[Baseline::Trained], &[Method::Gd], &[0], 1);
    missing.checkpoint = Some("/nonexistent/model.ckpt".into());
    assert!(matches!(compute_benchmark(&missing), Err(Error::Config(_))));

    let model = small_model();
    assert!(baseline_params(Baseline::Trained, 0, &model, None).is_err());
}

#[test]
fn bad_benchmark_configs_are_rejected() {
    let mut dup = config(&[Baseline::NoTraining], &[Method::Gd, Method::Gd], &[0], 1);
    assert!(compute_benchmark(&dup).is_err());
    dup.methods = vec![Method::Gd];
    dup.seeds = vec![];
    assert!(compute_benchmark(&dup).is_err());

    let mut long = config(&[Baseline::NoTraining], &[Method::Gd], &[0], 1);
    long.task.k_demonstrations = 20;
    assert!(compute_benchmark(&long).is_err());

    let err =
        icl_lab::harness::config::parse_config::<BenchmarkConfig>(r#"{"seeds": [0], "methds": ["GD"]}"#).unwrap_err();
    assert!(err.to_string().contains("methds"), "{err}");
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let params = init_params(&small_model(), 11, &InitScheme::Random).unwrap();

    let exact = tmp.path().join("f64.ckpt");
    save_checkpoint(&params, &exact).unwrap();
    assert!(load_checkpoint(&exact).unwrap().bitwise_eq(&params));

    let half = tmp.path().join("f32.ckpt");
    save_checkpoint_with(&params, &half, Dtype::F32, serde_json::json!({"note": "x"})).unwrap();
    let loaded = load_checkpoint(&half).unwrap();
    assert!(loaded.max_abs_diff(&params) < 1e-7);
    assert!(fs::metadata(&half).unwrap().len() < fs::metadata(&exact).unwrap().len());
    let info = inspect(&half).unwrap();
    assert_eq!(info.n_values, params.n_values());
    assert_eq!(info.metadata["note"], "x");
    assert_eq!(read_header(&half).unwrap().config, small_model());

    let bytes = fs::read(&exact).unwrap();
    let cut = tmp.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Checkpoint { .. })));
    fs::write(&cut, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&cut).is_err());
}
