//! Data loading, persistence and the experiment runner.

pub mod checkpoint;
pub mod config;
mod data;
pub mod experiment;
pub mod idx;
pub mod metrics_log;
mod sink;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{AttackScale, DatasetConfig, EnsembleSettings, ExperimentConfig, OutputConfig};
pub use data::{make_synthetic, Dataset, Split, SyntheticKind, TRAIN_FRACTION};
pub use experiment::{
    prepare_output_dir, run_experiment, strategy_tag, Experiment, ExperimentSummary,
};
pub use idx::load_idx;
pub use metrics_log::{read_log, LogEntry, MetricsLog};
pub use sink::{NullSink, TrainSink};
