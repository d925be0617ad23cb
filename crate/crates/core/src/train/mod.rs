//! Losses, the staged training loop, checkpoints and evaluation.

mod checkpoint;
mod evaluate;
mod loss;
mod model;
mod optim;
mod trainer;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointHeader, ParamMeta,
    CHECKPOINT_FORMAT, TOOL_VERSION,
};
pub use evaluate::{
    eval_csv, evaluate, planner_by_name, score_planner, trajectory_l1, write_eval_csv, ConstantVelocity, EvalReport,
    ModelPlanner, PlannerScores, TrajectoryPlanner, PLANNERS,
};
pub use loss::{nll, total_loss, traj_l1, LossTerms, HALF_LOG_TAU};
pub use model::{ModelOutput, PlanningModel, SemanticHead, PERCEPTION_PREFIXES};
pub use optim::AdamW;
pub use trainer::{dataset_l1, train, EpochRecord, TrainOutcome, TrainReport};
