//! Patch-level reconstruction of pre-projection embeddings from connector outputs.
//!
//! A model is trained from scratch on normalized embeddings to invert the
//! connector; the per-patch squared error of its reconstruction measures how
//! much of each patch's information survived the projection.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;
pub mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_model, save_model, Checkpoint};
pub use layers::Activation;
pub use loss::{evaluate, LossReport, PatchLossMap};
pub use model::{capacity_warning, Arch, Gradients, ModelConfig, Param, ReconstructionModel};
pub use train::{train, train_model, write_history, Adam, EpochRecord, TrainOutcome, TrainerConfig};
