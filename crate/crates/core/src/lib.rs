//! Streaming cross-domain classification with a self-evolving stacked
//! autoencoder, per-layer soft clustering and a domain-adversarial feature
//! extractor.

pub mod clustering;
pub mod error;
pub mod harness;
pub mod learner;
pub mod network;
pub mod numerics;
pub mod stream;
pub mod structure;

pub use error::{LeopardError, Result};
