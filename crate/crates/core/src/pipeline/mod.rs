//! Orchestration: configuration, manifest, resumable stages, report
//! emission, and the invariant suite.

pub mod config;
pub mod manifest;
pub mod report;
pub mod stages;
pub mod verify;

pub use config::PipelineConfig;
pub use manifest::RunManifest;
pub use stages::{Pipeline, Stage};
