//! Generative recommendation with unified item codes.
//!
//! Items get a single discrete code learned from both interaction behaviour
//! and text-side embeddings. The pipeline trains a fusion model
//! ([`fusion`]), quantises its item embeddings into hierarchical codes
//! ([`quantizer`]), trains an encoder-decoder that generates the next item's
//! code ([`generator`]) and serves top-k lists with trie-constrained beam
//! search ([`inference`]). [`evalkit`] holds the metrics and analyses.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod generator;
pub mod inference;
pub mod numerics;
pub mod pipeline;
pub mod quantizer;

pub use error::{Error, Result};

// Training allocates and frees many short-lived activation buffers; the
// system allocator returns each large one to the OS.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
