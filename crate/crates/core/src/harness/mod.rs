//! Training, evaluation and the synthetic motion dataset.

pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod optim;
pub mod train;
pub mod views;

pub use config::{RunConfig, TrainConfig};
pub use dataset::{generate_dataset, Dataset, DatasetSpec, Direction, Sample};
pub use gradcheck::{gradcheck_suite, GradCheckCase, GRADCHECK_TOLERANCE};
pub use optim::{clip_global_norm, cosine_lr, sgd_momentum_step};
pub use train::{evaluate, train, train_model, train_to_dir, MetricsLog, Record, TrainOutcome};
pub use views::{multi_view_infer, view_starts, ViewSpec};
