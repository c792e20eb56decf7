//! Run configuration, presets, and the batch runner behind the CLI.

mod config;
mod plot;
mod runner;

pub use config::{
    parse_config, parse_config_str, ClientsConfig, DatasetConfig, DatasetKind, GeneralizationConfig,
    HypernetSection, OutputConfig, PartitionConfig, RunConfig, SchemeKind, TrainingConfig, REQUIRED_KEYS,
};
pub use plot::{chart_from_csv, Chart, Series};
pub use runner::{
    build_architectures, dry_run, load_dataset, prepare, resume, run, Prepared, RunOptions, RunSummary,
    DATA_DIR_ENV,
};
