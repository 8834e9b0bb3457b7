//! Initialization, pair sampling, momentum SGD with a plateau schedule,
//! hard-negative mining and checkpointing.

mod checkpoint;
mod config;
mod optim;
mod runner;
mod sampler;

pub use checkpoint::{encode, Checkpoint, FORMAT_VERSION, LAYOUT, MAGIC};
pub use config::{parse_kv, TrainConfig, TRAIN_KEYS};
pub use optim::{init_params, lr_schedule_step, stale_epochs, train_step, MomentumState, PLATEAU_THRESHOLD};
pub use runner::{StepRecord, TrainState, Trainer, TrainingLog, LOG_HEADER};
pub use sampler::{build_batch, mine_hard_negatives, top_k_by_score, PairIndex, PairSampler};
