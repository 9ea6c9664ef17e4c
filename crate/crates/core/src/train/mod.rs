//! Optimisation loop, plateau schedule, checkpoints and evaluation.

mod checkpoint;
mod config;
mod eval;
mod objective;
mod scheduler;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{
    DataConfig, DecorGradient, OptimConfig, OptimizerKind, Precision, Regularizer, RegularizerConfig, TrainConfig,
};
pub use eval::{evaluate_volumes, predict_masks, predict_probabilities};
pub use objective::{
    bce_with_logits, decor_per_sample, decov_per_sample, ortho_term, soft_dice_loss, training_objective, LossTerms,
};
pub use scheduler::{PlateauScheduler, PlateauState};
pub use trainer::{
    batch_tensors, resolve_split, train, train_on, EpochRecord, TrainOutcome, BEST_CHECKPOINT, CONFIG_FILE,
    LAST_CHECKPOINT, LOG_FILE, SPLIT_FILE,
};
