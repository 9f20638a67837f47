use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use icl_lab::harness::checkpoint::{inspect, save_checkpoint_with, Dtype};
use icl_lab::harness::config::{load_config, resolve_output, Baseline, BenchmarkConfig, PretrainRun};
use icl_lab::harness::{evaluate_icl, run_benchmark, run_gradcheck, run_noise_check, OUTPUT_ROOT_ENV};
use icl_lab::optim::{pretrain_with, Method, PretrainConfig};

#[derive(Parser)]
#[command(
    name = "icl-lab",
    version,
    about = "In-context learning vs. gradient-descent finetuning lab"
)]
struct Cli {
    /// Root for relative output paths.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on synthetic episodes and save a checkpoint.
    Pretrain(PretrainArgs),
    /// Compare ICL with GD and LCGD finetuning across baselines and seeds.
    Benchmark(BenchmarkArgs),
    /// Score pure-noise updates; fails unless the normalized mean is near 1/4.
    NoiseCheck(NoiseArgs),
    /// Check both finetuning gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's header.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON file with `model`, `task`, `pretrain`, `checkpoint`, `eval_episodes`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Store payloads as f32.
    #[arg(long)]
    f32: bool,
    /// Exit 1 unless ICL beats zero-shot accuracy by this many points.
    #[arg(long)]
    min_gap: Option<f64>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Any of Trained, TrainedEmbeddings, NoTraining.
    #[arg(long, value_delimiter = ',')]
    baselines: Option<Vec<String>>,
    /// Any of GD, LCGD.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    episodes_path: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long, default_value_t = 1024)]
    d: usize,
    #[arg(long, default_value_t = 256)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reuse the first noise draw for the second update.
    #[arg(long)]
    force_equal: bool,
    /// Write the result as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturb this tensor's analytic gradient (negative control).
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
    /// Print the full header as JSON.
    #[arg(long)]
    json: bool,
}

/// A check ran and did not pass.
#[derive(Debug)]
struct ValidationFailed(String);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.out_root.as_deref();
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a, root),
        Command::Benchmark(a) => benchmark(a, root),
        Command::NoiseCheck(a) => noise_check(a, root),
        Command::Gradcheck(a) => gradcheck(a, root),
        Command::InspectCheckpoint(a) => inspect_checkpoint(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<ValidationFailed>() => {
            eprintln!("validation failed: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn pretrain(a: PretrainArgs, root: Option<&Path>) -> Result<()> {
    let mut run: PretrainRun = match &a.config {
        Some(p) => load_config(p)?,
        None => PretrainRun {
            model: Default::default(),
            task: Default::default(),
            pretrain: PretrainConfig::new(12_000, 0),
            checkpoint: "trained.ckpt".into(),
            eval_episodes: 1000,
        },
    };
    if let Some(v) = a.steps {
        run.pretrain.steps = v;
    }
    if let Some(v) = a.seed {
        run.pretrain.seed = v;
    }
    if let Some(v) = a.lr {
        run.pretrain.learning_rate = v;
    }
    if let Some(v) = a.batch {
        run.pretrain.batch = v;
    }
    if let Some(v) = a.checkpoint {
        run.checkpoint = v;
    }
    if let Some(v) = a.eval_episodes {
        run.eval_episodes = v;
    }
    let ckpt = resolve_output(root, &run.checkpoint);

    let every = (run.pretrain.steps / 20).max(1);
    let mut window = Vec::new();
    let out = pretrain_with(&run.model, &run.task, &run.pretrain, |r| {
        window.push(r.loss);
        if (r.step + 1) % every == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            eprintln!("step {:>6}  loss {mean:.4}", r.step + 1);
            window.clear();
        }
    })
    .map_err(|e| match e {
        icl_lab::Error::NonFinite { .. } => anyhow::Error::new(ValidationFailed(e.to_string())),
        other => other.into(),
    })?;
    let acc = evaluate_icl(
        &out.params,
        &run.task,
        run.eval_episodes,
        run.pretrain.seed.wrapping_add(1),
    )?;
    let tail = &out.log[out.log.len().saturating_sub(100)..];
    let final_loss = (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64);
    let metadata = serde_json::json!({
        "pretrain": run.pretrain,
        "task": run.task,
        "final_loss": final_loss,
        "eval": acc,
    });
    let dtype = if a.f32 { Dtype::F32 } else { Dtype::F64 };
    save_checkpoint_with(&out.params, &ckpt, dtype, metadata)?;
    let log_path = ckpt.with_extension("loss.csv");
    let mut w = csv::Writer::from_path(&log_path).with_context(|| format!("writing {}", log_path.display()))?;
    for r in &out.log {
        w.serialize(r)?;
    }
    w.flush()?;
    println!(
        "saved {}  icl {:.3}  zero-shot {:.3}  gap {:.1} points over {} episodes",
        ckpt.display(),
        acc.icl,
        acc.zero_shot,
        acc.gap_points(),
        acc.episodes
    );
    if let Some(min) = a.min_gap {
        if acc.gap_points() < min {
            return Err(ValidationFailed(format!("gap {:.1} < required {min}", acc.gap_points())).into());
        }
    }
    Ok(())
}

fn parse_list<T>(items: &[String], parse: impl Fn(&str) -> Option<T>, what: &str) -> Result<Vec<T>> {
    items
        .iter()
        .map(|s| parse(s.trim()).ok_or_else(|| anyhow::anyhow!("unknown {what} `{s}`")))
        .collect()
}

fn benchmark(a: BenchmarkArgs, root: Option<&Path>) -> Result<()> {
    let mut cfg: BenchmarkConfig = match &a.config {
        Some(p) => load_config(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(v) = a.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = &a.baselines {
        cfg.baselines = parse_list(
            v,
            |s| {
                Baseline::ALL
                    .into_iter()
                    .find(|b| b.to_string().eq_ignore_ascii_case(s))
            },
            "baseline",
        )?;
    }
    if let Some(v) = &a.methods {
        cfg.methods = parse_list(
            v,
            |s| {
                [Method::Gd, Method::Lcgd]
                    .into_iter()
                    .find(|m| m.to_string().eq_ignore_ascii_case(s))
            },
            "method",
        )?;
    }
    if let Some(v) = a.episodes {
        cfg.n_test_episodes = v;
    }
    if let Some(v) = a.episodes_path {
        cfg.episodes_path = Some(v);
    }
    if let Some(v) = a.checkpoint {
        cfg.checkpoint = Some(v);
    }
    if let Some(v) = a.lr {
        cfg.finetune.learning_rate = v;
    }
    if let Some(v) = a.out {
        cfg.output_dir = v;
    }
    if a.no_plots {
        cfg.plots = false;
    }
    let dir = resolve_output(root, &cfg.output_dir);
    let (report, files) = run_benchmark(&cfg, &dir)?;
    for e in &report.summary.entries {
        let fmt = |v: Option<f64>| v.map_or("excluded".to_string(), |x| format!("{x:+.4}"));
        println!(
            "{:<12} {:<18} {:<11} mean {:>9}  std {:>8}  n {}",
            e.metric.to_string(),
            e.baseline.to_string(),
            e.method,
            fmt(e.mean),
            fmt(e.std),
            e.n_values
        );
    }
    for d in &report.summary.directional {
        if let Some(ge) = d.lcgd_ge_gd {
            println!("{} {}: LCGD >= GD is {ge}", d.baseline, d.metric);
        }
    }
    eprintln!(
        "{} rows; wrote {} files to {}",
        report.rows.len(),
        files.len(),
        dir.display()
    );
    Ok(())
}

fn noise_check(a: NoiseArgs, root: Option<&Path>) -> Result<()> {
    let r = run_noise_check(a.d, a.trials, a.seed, a.force_equal)?;
    println!(
        "normalized {:.4} ± {:.4}   plain {:+.4} ± {:.4}   random update {:+.4} ± {:.4}   (d = {}, trials = {})",
        r.result.mean_norm_variant,
        r.result.stderr_norm_variant,
        r.result.mean_plain_variant,
        r.result.stderr_plain_variant,
        r.result.mean_random_update,
        r.result.stderr_random_update,
        r.result.d,
        r.result.trials
    );
    if let Some(p) = &a.json {
        write_json(&resolve_output(root, p), &r)?;
    }
    if !r.passed {
        return Err(ValidationFailed(format!(
            "normalized mean {:.4} outside 0.25 ± 0.03",
            r.result.mean_norm_variant
        ))
        .into());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, root: Option<&Path>) -> Result<()> {
    let r = run_gradcheck(a.seed, a.corrupt.as_deref())?;
    for c in &r.checks {
        println!(
            "{:<5} {:<26} rel err {:.2e}  {}",
            c.loss,
            c.tensor,
            c.rel_err,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!("max rel err {:.2e} (tolerance {:.0e})", r.max_rel_err, r.tolerance);
    if let Some(p) = &a.json {
        write_json(&resolve_output(root, p), &r)?;
    }
    if !r.passed {
        return Err(ValidationFailed(format!("gradient mismatch in {}", r.failing.join(", "))).into());
    }
    Ok(())
}

fn inspect_checkpoint(a: InspectArgs) -> Result<()> {
    let info = inspect(&a.path)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&info)?);
        return Ok(());
    }
    let c = &info.config;
    println!("format_version {}  {} bytes", info.format_version, info.file_size);
    println!(
        "model: {} layers, {} heads, d_model {}, vocab {}, max_seq_len {}, mlp_ratio {}",
        c.n_layers, c.n_heads, c.d_model, c.vocab_size, c.max_seq_len, c.mlp_ratio
    );
    println!("{} tensors, {} values", info.tensors.len(), info.n_values);
    for (name, e) in &info.tensors {
        println!("  {name:<26} {:?} {:?}", e.shape, e.dtype);
    }
    if !info.metadata.is_null() {
        println!("metadata: {}", info.metadata);
    }
    Ok(())
}
