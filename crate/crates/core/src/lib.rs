//! Account classification on transaction graphs with subgraph contrastive learning.

pub mod augment;
pub mod baseline;
mod codec;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
