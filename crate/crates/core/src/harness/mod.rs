//! Experiment plumbing: configuration, multi-seed prequential runs, the
//! reconstruction-only k-means baseline, the divergence probe and sweeps.

pub mod config;
pub mod divergence;
mod experiment;
pub mod kmeans;

pub use config::{Ablation, CsvData, ExperimentConfig, NetworkShape};
pub use divergence::{h_divergence_from_predictions, proxy_h_divergence};
pub use experiment::*;
