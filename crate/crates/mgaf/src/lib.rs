//! File formats, experiment orchestration and the `mgaf` command line on top
//! of [`mgaf_core`].
//!
//! * [`formats`]: inertial CSV, DSEQ1 depth sequences, PGM dumps, feature
//!   and NCC CSV.
//! * [`checkpoint`]: binary CNN and SVM checkpoints.
//! * [`config`]: the flat `key=value` experiment configuration.
//! * [`dataset`]: dataset directories and the synthetic fallback.
//! * [`experiment`]: splits, per-modality training, fusion and evaluation.
//! * [`report`]: report files and run manifests.
//! * [`cli`]: the `mgaf` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod report;

pub use config::{ExperimentConfig, Variant};
pub use error::{Error, Result};
pub use experiment::run_experiment;
pub use report::Report;
