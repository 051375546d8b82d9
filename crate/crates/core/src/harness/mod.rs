//! Desk-scale training experiments and their telemetry.

mod config;
mod data;
pub mod randgraph;
pub mod report;
mod snr;
mod train;

pub use config::{preset, DataSource, DynamicRescaling, ExperimentConfig, LrSchedule, PRESET_COUNT};
pub use data::{Batcher, SUCCESSORS};
pub use snr::{snr_point, snr_sweep, SnrPoint};
pub use train::{
    rebalance_l2, run_experiment, tail_mean, Abort, RmsSummary, RunResult, StepGraph, StepRecord, Summary, Trainer,
    GRADS_TAG,
};
