//! Controlled prompt-tuning for dialogue generation.
//!
//! A small decoder-only transformer is pretrained, frozen, and then steered
//! by prompt modules that turn a control attribute (a dialogue-act label or
//! persona sentences) into key/value prefixes or input embeddings. The
//! crate bundles the tensor/autodiff substrate, the seven adaptation
//! strategies, a synthetic controlled-dialogue benchmark, training,
//! top-k decoding, n-gram metrics, the CLI pipeline and an HTTP service.

pub mod error;
pub mod tensor;
pub mod transformer;
pub mod prompt;
pub mod data;
pub mod training;
pub mod decoding;
pub mod metrics;
pub mod pipeline;
pub mod config;
pub mod cli;
pub mod server;

pub use error::{Error, Result};
