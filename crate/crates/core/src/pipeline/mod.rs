//! Configuration, model assembly, training, checkpoints, inference and the
//! action-loss ablation.

mod ablation;
mod checkpoint;
mod config;
mod infer;
mod model;
mod train;

pub use ablation::{run_action_loss_ablation, AblationReport, AblationRow};
pub use checkpoint::{checkpoint_scalar, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Precision, TrainConfig};
pub use infer::{infer, predict_example, prediction_map, truths, InferOptions, MarginalBaseline};
pub use model::{ForwardVars, LossParts, QueryMamba};
pub use train::{
    build_examples, clip_gradients, learning_rate, planned_steps, resume, resume_until, train, train_step, write_loss_curve,
    AdamW, LossRecord, TrainState,
};

#[cfg(test)]
mod tests;
