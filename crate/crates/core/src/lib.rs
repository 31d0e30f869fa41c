//! Learned vehicle dynamics with a probabilistic ensemble, Jensen-Rényi
//! ensemble disagreement, and a sampling-based MPC that either seeks or
//! avoids that disagreement.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, configuration
//! and the command-line front end live in the `penn-mpc` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod jrd;
pub mod mppi;
pub mod nn;
pub mod penn;
pub mod rng;
pub mod sim;
pub mod state;

pub use error::{Error, Result};
pub use state::{Action, HistoryWindow, StateBounds, StateTriple};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
