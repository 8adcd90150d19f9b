//! Datasets, synthetic suites, experiment configuration and execution.

mod config;
mod dataset;
mod runner;
mod suite;
mod sweep;

pub use config::{
    apply_override, parse_override, BackendConfig, BackendKind, DataConfig, ExperimentConfig, Method, Preset, Selection,
};
pub use dataset::{load_dataset, parse_dataset, save_dataset, write_dataset, Dataset};
pub use runner::{prepare, query_seed, run_experiment, run_prepared, run_with, Prepared};
pub use suite::{generate_synthetic, SymbolAssignment, SyntheticSuite, SyntheticSuiteSpec};
pub use sweep::{csv_row, grid, run_sweep, SweepOutcome, SweepParam, CSV_HEADER};
