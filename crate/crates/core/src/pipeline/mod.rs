//! End-to-end orchestration: configuration, synthetic data and the staged run.

pub mod bench;
pub mod config;
pub mod synth;
pub mod stages;

pub use config::PipelineConfig;
pub use stages::{run_pipeline, Pipeline, PipelineOutcome, PipelineReport, Stage};
