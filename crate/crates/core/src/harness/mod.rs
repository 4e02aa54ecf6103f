//! Experiment orchestration: a versioned JSON config drives data generation,
//! training, shifts, attacks, metrics and dedup, recording every artifact in
//! a hash-keyed ledger and ending in a [`RobustnessReport`].

pub mod config;
pub mod ledger;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, ReportFormat, CONFIG_VERSION};
pub use ledger::{RunLedger, StageRecord, StageStatus};
pub use pipeline::{caption_corpus, run_experiment, RunOutcome, SUPERVISED, ZERO_SHOT, ZERO_SHOT_SEARCHED};
pub use report::{emit_report, RobustnessReport};
