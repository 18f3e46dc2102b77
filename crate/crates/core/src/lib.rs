//! Side-channel trace workbench: trace derivation, Prime+Probe simulation,
//! an attention autoencoder that reconstructs secret media inputs from
//! traces, leakage localization, and blinding / noise defenses.

pub mod cache_sim;
pub mod defend;
pub mod error;
pub mod experiment;
pub mod localize;
pub mod media;
pub mod neural;
pub mod pipeline;
pub mod rng;
pub mod sca_model;
pub mod trace_model;
pub mod trace_repr;
pub mod victim;

pub use error::{Error, Result};
