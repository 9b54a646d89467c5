//! Optimization recipe and the training loop.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod sweep;
pub mod trainer;

pub use checkpoint::{average_checkpoints, Checkpoint};
pub use loss::smoothed_cross_entropy;
pub use optim::{AdamConfig, OptimizerState};
pub use schedule::LrSchedule;
pub use trainer::{train, EarlyStopping, FeatureSource, SplitData, TrainOutcome, TrainRunConfig};
