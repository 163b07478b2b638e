//! Experiment driver for physics-aligned diffusion training.

pub mod ablate;
pub mod config;
pub mod data;
pub mod diagnose;
pub mod plot;
pub mod run;
pub mod study;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use run::{train_run, Experiment, RecordSink, RunRecord};

pub type Experiment32 = Experiment<f32>;
pub type Experiment64 = Experiment<f64>;
