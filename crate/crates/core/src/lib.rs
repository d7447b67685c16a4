//! Latent bag-of-words paraphrase generation.
//!
//! A seq2seq LSTM whose decoder is guided by a content plan: every source
//! position predicts `l` neighbor distributions over the vocabulary, their
//! uniform mixture is the bag-of-words distribution, and a bag of `k` words is
//! drawn from it with Gumbel top-k. The bag's weighted embeddings initialize
//! the decoder and join the attention memory, so gradients reach the planner
//! through the weights while the selection itself stays discrete.
//!
//! The crate is `no_std` (with `alloc`). File formats, checkpoints and the
//! command line live in the companion `lbow` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod config;
pub mod corpus;
mod error;
pub mod graph;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod planner;
pub mod realizer;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
