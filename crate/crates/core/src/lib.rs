//! Desk-scale continual self-supervised pretraining engine.
//!
//! A masked-autoencoder pretrainer with a privacy-preserving latent replay
//! buffer and feature distillation (Gaussian-Wasserstein moment alignment
//! plus batch-knowledge ensembling), built on a small reverse-mode autodiff
//! tensor core. Everything is deterministic given a seed.

pub mod error;
pub mod io;
pub mod tensor;

pub mod bke;
pub mod buffer;
pub mod mae;
pub mod metrics;
pub mod optim;
pub mod wkd;

pub mod config;
pub mod data;
pub mod pipeline;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
