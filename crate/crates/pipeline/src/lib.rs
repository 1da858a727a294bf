//! Staged dense video captioning: dataset ingest, visual codebook,
//! co-occurrence embeddings, bi-modal captioner and proposal heads, vanilla
//! captioner, captioning and evaluation.

pub mod artifacts;
pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod stages;
pub mod sweep;

pub use artifacts::{RunDir, Stage};
pub use config::PipelineConfig;
pub use error::PipelineError;
pub use report::EvalReport;
pub use stages::{run_all, run_stage};
pub use sweep::{sweep, SweepTable};
