//! Neural architecture search over cell DAGs with a Weisfeiler-Lehman-guided
//! graph encoder, an efficiency-score predictor and bootstrap sampling.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod predictor;
pub mod protocol;
pub mod rng;
pub mod search;
pub mod wl_kernel;

pub use error::{Error, Result};
