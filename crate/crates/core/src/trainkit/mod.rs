//! Two-phase training: teacher-forced gaze pretraining, then joint
//! fine-tuning with early stopping.

mod config;
mod optim;
mod train;

pub use config::TrainConfig;
pub use optim::{AdamW, EarlyStopping, Goal, Verdict, IMPROVEMENT_TOL};
pub use train::{
    build_generator, build_joint, encode_examples, encode_gaze, evaluate_metric, gaze_nll,
    log_to_jsonl, predict_outputs, pretrain_generator, select_lr, split_gaze_by_sentence,
    train_joint, EpochLog, Example, GazeExample, LrChoice, TrainOutcome, LR_GRID,
};
