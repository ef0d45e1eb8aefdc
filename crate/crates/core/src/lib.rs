//! Encrypted malicious-flow detection from small, noisily labeled training
//! sets.
//!
//! The pipeline runs label-free feature extraction ([`autoencoder`]),
//! density-based label correction ([`relabel`] on top of [`density`]),
//! density-targeted synthetic augmentation ([`augment`]) and a co-teaching
//! detector ([`detector`]). [`bench`] generates synthetic corpora and runs
//! the evaluation grids; [`pipeline`] wires stages to files.

pub mod augment;
pub mod autograd;
pub mod autoencoder;
pub mod bench;
pub mod config;
pub mod density;
pub mod detector;
pub mod error;
pub mod features;
pub mod flows;
pub mod nn;
pub mod pipeline;
pub mod relabel;

pub use error::{Error, Result};
