//! Optimizer, training stages, evaluation, checkpoints and the ablation
//! runner.

mod ablation;
mod adam;
mod checkpoint;
mod fit;
mod metrics;
mod prepare;

pub use ablation::{render_table, run_ablations, AblationRow};
pub use adam::Adam;
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use fit::{
    evaluate, forward_batch, mean_loss, predict, pretrain, train_joint, train_model, EpochLog, SubNetwork,
    TrainConfig, TrainReport, EVAL_BATCH,
};
pub use metrics::Metrics;
pub use prepare::{Needs, PreparedSet};
