//! Capture, store, reduce and plot the latent states of decoder-only
//! transformers.

pub mod analyze;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod reduce;
pub mod store;
pub mod tokenizer;

pub use error::{Error, Result};
