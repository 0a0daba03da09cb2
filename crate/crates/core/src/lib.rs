//! Generative parameter aggregation for personalized federated learning.
//!
//! The server side of the federation trains a denoising diffusion model on
//! the flattened weight vectors uploaded by clients, and produces per-client
//! parameters by inverting each upload into a latent code (its terminal
//! noised state plus every forward noise) and replaying that code through the
//! learned reverse chain. New clients are initialized by alternating local
//! training with guided denoising.
//!
//! This crate is `no_std` (it needs `alloc`) and contains only the numerical
//! machinery. IO, configuration files, checkpoint containers, parallel
//! orchestration and the command line live in the `genagg` crate.
//!
//! Module map:
//!
//! - [`tensor`], [`record`], [`optim`]: dense tensors, reverse-mode gradients
//!   over a fixed primitive set, SGD and Adam.
//! - [`codec`]: flattening, layer masks, normalization statistics.
//! - [`model`], [`client`], [`data`]: client architectures, local training,
//!   evaluation, synthetic data and non-IID partitioning.
//! - [`schedule`], [`diffusion`], [`estimator`]: the DDPM machinery.
//! - [`inversion`]: latent-code extraction, exact reconstruction and
//!   semantic-injection sampling.
//! - [`guidance`]: guided fast initialization of joining clients.
//! - [`autoencoder`]: optional latent stage.
//! - [`federated`]: FedAvg, client sampling and the server state.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod autoencoder;
pub mod client;
pub mod codec;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod estimator;
pub mod federated;
pub mod guidance;
pub mod inversion;
pub mod model;
pub mod optim;
pub mod record;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
