//! Adjacency-masked graph transformer for mesh-based physics surrogates.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: mesh graphs and compressed-row boolean masks
//! - [`augment`]: dilation, k-hop unions, random and global connections,
//!   per-head mask plans and positional encodings
//! - [`ndiff`]: tensors, an operation tape and gradient checking
//! - [`model`]: the encode-process-decode network and its parameter and FLOP accounting
//! - [`train`]: optimizer, schedules, noise injection and the training loops
//! - [`rollout`]: autoregressive rollout and error metrics
//! - [`scaling`]: isoFLOP minima and power-law fits
//! - [`dataio`]: on-disk trajectory format and the synthetic heat-diffusion generator

pub mod augment;
pub mod dataio;
pub mod error;
pub mod features;
pub mod graph;
pub mod model;
pub mod ndiff;
pub mod par;
pub mod rng;
pub mod rollout;
pub mod scaling;
pub mod train;

pub use error::{Error, Result};
