//! Axis-wise masked autoencoders: decoupled masking, encoder/decoder,
//! masked-only reconstruction loss, pre-training and checkpoints.

mod checkpoint;
mod mask;
mod model;
mod train;

pub use checkpoint::{MaeCheckpoint, TrainingMeta, CHECKPOINT_KIND};
pub use mask::{apply_mask, masked_count, sample_mask, sample_mask_with, MaskAxis, MaskSpec, MaskingMode};
pub use model::{masked_loss, masked_loss_value, MaeConfig, MaeParams, MaskedAutoencoder};
pub use train::{
    pretrain, train_window_starts, val_window_starts, validation_loss, EpochRecord, PretrainConfig, PretrainHistory,
};
