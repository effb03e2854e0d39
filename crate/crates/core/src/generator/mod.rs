//! Stage II: encoder-decoder generating the next item's code sequence,
//! trained with next-code cross-entropy and embedding distillation.

mod model;
mod train;

pub use model::{sample_negatives, CrossMemory, Encoded, GenConfig, GenModel, BOS, C_DIS, PAD};
pub use train::{
    distillation_candidates, distillation_loss, history_codes, train_stage2, Stage2Log,
};
