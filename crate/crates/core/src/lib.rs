//! Incremental freeze-and-fine-tune engine for session-based image
//! classification, with a synthetic probe-shift corpus generator and the
//! intra-/inter-session experiment harness.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus_dir;
pub mod data;
pub mod error;
pub mod experiment;
pub mod network;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
