//! Minimal tensor and layer stack for the arc autoencoders, with reverse-mode
//! gradients, Adam and a deterministic trainer.

pub mod adam;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, Adam, AdamState};
pub use layers::Layer;
pub use loss::{reparameterize, vae_loss, LossParts};
pub use model::{AutoencoderModel, ModelConfig};
pub use tensor::{Param, Tensor};
pub use train::{
    latent_traversal, median_abs_error, reconstruct, reconstruct_all, train, train_with, Checkpoint,
    EpochRecord, TrainConfig, TrainingMeta,
};

#[cfg(test)]
mod tests;
