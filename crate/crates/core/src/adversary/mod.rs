//! Domain-adversarial age model: gated encoder, age regressor and a
//! multi-head bias predictor trained by alternating minimax updates.

mod checkpoint;
mod config;
mod model;
mod train;

pub use checkpoint::{checkpoint_name, Checkpoint};
pub use config::{HeadWeights, ModelConfig, TrainMode};
pub use model::{build_model, AdversarialModel, Batch, BiasLoss, DistillerLoss, ParamGroup, TaskLoss};
pub use train::{
    fit, train_step, CheckpointEvent, CheckpointSink, EpochRecord, FitOutcome, NanF64, Optimizers, StepRecord,
    TrainData, TrainTrace, Trainer, Vocabulary,
};
