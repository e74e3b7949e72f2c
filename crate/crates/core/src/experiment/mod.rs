//! Experiment harness: configuration, pipelines, and result files.

pub mod commands;
pub mod config;
pub mod results;

pub use commands::{
    channel_bench, cmd_ablate, cmd_channel_bench, cmd_eval, cmd_train, evaluate_rows, grow,
    mean_gain_by_k, prepare_splits, train_stage1, write_bench_csv, BenchRow, OutputDir,
    TrainOutcome, BENCH_HEADER,
};
pub use config::{
    extract_overrides, AblateSettings, BenchSettings, DataSource, EvalSettings, ExperimentConfig,
    ModelSettings,
};
pub use results::{
    read_results_csv, render_table, results_from_json, results_to_json, save_results,
    write_results_csv, ResultRow, RESULTS_HEADER, RESULTS_SCHEMA_VERSION,
};
