//! File formats, configuration and the experiment commands built on
//! `penn-mpc-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod logs;
pub mod numfmt;
pub mod report;
pub mod store;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
