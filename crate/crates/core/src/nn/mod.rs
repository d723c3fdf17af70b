//! Dual-frame U-Net with hand-written backpropagation.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod tensor;
pub mod train;
pub mod unet;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use tensor::{Scalar, Tensor4};
pub use train::{
    evaluate_loss, make_residual_pairs, mse_loss, postprocess, predict_residual, subtract_residual,
    train, train_from, train_with_schedule, EpochRecord, ExponentialDecay, History, ResidualPair,
    Schedule, TrainConfig,
};
pub use unet::{
    backward, count_params, forward, init_unet, unet_forward, update_running_stats, BridgeCombine,
    ForwardCache, Mode, UNetConfig, UNetParams, Variant,
};
