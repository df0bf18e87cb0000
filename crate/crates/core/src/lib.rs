//! Self-supervised disentangled sequential VAE framework.
//!
//! The crate provides synthetic sequence datasets with ground-truth factor
//! labels, a sequential VAE whose latent code splits into one static and T
//! dynamic variables, the auxiliary self-supervision losses that encourage
//! that split, a judge-classifier metric suite, and a training harness. All
//! numerics run on a small reverse-mode tape defined in [`graph`].

pub mod container;
pub mod datasets;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod supervision;

pub use error::{Error, Result};
