//! Orchestration: benchmark protocol, checks, checkpoints and reports.

pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod noise;
pub mod svg;

pub use benchmark::{compute_benchmark, rows_per_episode, run_benchmark, write_report, BenchmarkReport, ReportRow};
pub use checkpoint::{inspect, load_checkpoint, save_checkpoint, save_checkpoint_with};
pub use config::{load_config, Baseline, BenchmarkConfig, PretrainRun, OUTPUT_ROOT_ENV};
pub use eval::{evaluate_icl, Accuracy};
pub use gradcheck::{run_gradcheck, GradcheckReport};
pub use noise::{run_noise_check, NoiseReport};
