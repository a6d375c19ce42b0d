//! Tensor dump container, experiment configs, and report emission.

pub mod config;
pub mod dump;
pub mod experiment;

pub use config::{default_compare_budget, ExperimentConfig, RunTask, SearchTask, SourceConfig, Task};
pub use dump::{read_dump, write_dump, Section, TensorDump};
pub use experiment::{
    emit_channel_stats, run_experiment, write_channel_stats, ChannelStats, Comparison, ExperimentOutcome, RunReport,
    SearchReport,
};
