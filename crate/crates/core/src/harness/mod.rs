//! Training, evaluation and analysis entry points.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use eval::{discrepancy_stats, dump_field, evaluate, evaluate_model, infer, DiscrepancyStats, InferResult};
pub use gradsuite::{gradcheck_all, planted_fault_error, GradCase};
pub use model::Model;
pub use optim::Adam;
pub use train::{train, train_step, Batch, TapCache, TrainOutcome};
