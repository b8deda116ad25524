//! A same-padding encoder-decoder network for binary filament segmentation,
//! with analytic gradients, Adam and a deterministic training loop.

pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use layers::{LossReduction, Mode};
pub use model::{model_gradients, AnetConfig, AnetModel, LossBundle, ParamSlot, SlotKind};
pub use optim::{adam_step, AdamState};
pub use tensor::Tensor4;
pub use train::{
    load_checkpoint, predict_image, predict_tile, save_checkpoint, train, train_samples, write_log_csv, LogRow,
    Sample, TrainConfig, TrainOutcome,
};
