//! Federated-learning simulator with generative parameter aggregation.
//!
//! This crate wraps the numerical core in [`genagg_core`] with everything
//! that touches the outside world: TOML experiment configs, dataset loaders,
//! the binary checkpoint container, the multi-threaded round harness, run
//! manifests and metric files, and the desk-scale demos used by the `genagg`
//! command.

pub mod config;
pub mod container;
pub mod datasets;
pub mod demos;
pub mod error;
pub mod harness;
pub mod runner;

pub use error::{Error, Result};
pub use genagg_core as core;
