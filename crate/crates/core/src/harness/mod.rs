//! Training, evaluation, configuration and result aggregation.

pub mod config;
pub mod eval;
pub mod model;
pub mod optim;
pub mod report;
pub mod train;

pub use config::{Composition, FeatureKind, Method, OptimizerKind, TrainConfig};
pub use eval::{average_precision, evaluate, evaluate_predictions, ClassReport, EvalReport};
pub use model::Model;
pub use optim::{clip_global_norm, cosine_lr, Optimizer};
pub use report::{aggregate, csv_rows, text_table, MethodRow};
pub use train::{train, StepLog, TrainOutcome};
