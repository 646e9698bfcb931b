//! Experiment harness for calibration-aware MC-Dropout: configuration,
//! multi-run orchestration, threshold sweeps, result tables, and SVG plots.
//! The `caldrop` binary is a thin wrapper around [`cli`].

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod plot;
pub mod sweep;
pub mod tables;

pub use config::{DatasetSpec, ExperimentConfig, MethodKind, MethodSpec};
pub use error::{BenchError, Result};
