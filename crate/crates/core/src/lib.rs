//! Span-level text generation trained as a generative flow network, with
//! exact dynamic-programming oracles for small instances.

pub mod cli;
pub mod corpus;
pub mod dynvocab;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod segmentation;
pub mod trainer;

pub use error::{Error, Result};
