//! Dense `f32` tensors, reverse-mode differentiation and the Adam optimiser.

mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use layers::{
    attention_mask, FeedForward, KeyValue, LayerNorm, Linear, MultiHeadAttention, MASKED,
};
pub use optim::{Adam, AdamConfig, BatchSampler, TrainOptions};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator used for every seeded component.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
