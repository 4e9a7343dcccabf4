//! Datasets, augmentation, retraining, latency, statistics, reports and the CLI.

pub mod augment;
pub mod data;
pub mod retrain;
pub mod stats;
pub mod cli;
pub mod report;
