//! File formats, dataset synthesis and the experiment harness around
//! `monoview-core`.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod formats;
pub mod report;

pub use config::RunConfig;
