//! Stage I: collaborative sequence model jointly trained with an adapted
//! view of the semantic embeddings, producing integrated item embeddings.

mod model;
mod train;

pub use model::{align_loss, AlignDenominator, FusionConfig, FusionModel};
pub(crate) use train::tail_mean;
pub use train::{export_integrated, train_stage1, IntegratedVariant, Stage1Log};
