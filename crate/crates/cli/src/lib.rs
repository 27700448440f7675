//! Command-line pipeline around `gdpo-core`: configuration, stage
//! orchestration, run manifests and reports.

pub mod app;
pub mod config;
pub mod exit;
pub mod manifest;
pub mod stages;
pub mod suites;

pub use config::{ConfigError, RunConfig};
pub use stages::{execute, run_all, Stage};
