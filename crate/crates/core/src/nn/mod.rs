//! A small trainable network whose weights and feature maps can be read
//! through simulated approximate DRAM.

mod checkpoint;
mod data;
mod env;
mod network;
mod train;
mod types;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorFiles, CHECKPOINT_FORMAT};
pub use data::{make_synthetic_dataset, Dataset, DatasetKind};
pub use env::{DramEnv, Loader, PreparedEnv, ENV_GEOMETRY, UNIFORM_FLIP_PROBABILITY};
pub use network::{argmax, softmax_cross_entropy, ForwardTrace, LayerSpec, Network, Params};
pub use types::{bound_correct, Correction, DataKind, DataTypeId, ExponentCheck, Thresholds, MARGIN_FACTOR};
pub use train::{
    curricular_retrain, curricular_schedule, evaluate_accuracy, evaluate_prepared, train_baseline, train_epoch,
    trial_seed, validation_accuracy, AccuracyStats, TrainConfig,
};
