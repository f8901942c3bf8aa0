//! Dark-channel-guided desmoking for laparoscopic imagery.
//!
//! The pipeline: synthesize smoke over clear frames ([`smokesim`]), compute
//! and refine the dark channel and stack it as a fourth input channel
//! ([`dcprior`]), train a U-Net generator against a patch discriminator
//! ([`model`], [`trainer`]) and score restorations ([`metrics`]).

pub mod bench;
pub mod dataset;
pub mod dcprior;
pub mod error;
pub mod imagecore;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod scenes;
pub mod smokesim;
pub mod trainer;

pub use error::{Error, Result};

/// Version string recorded in manifests and checkpoints.
pub const TOOL_VERSION: &str = concat!("desmoke ", env!("CARGO_PKG_VERSION"));
