//! Mini-batch training over exposure logs.

mod optim;
mod samples;
mod train;

pub(crate) use train::{quantile, score_set};

pub use optim::AdamW;
pub use samples::{build_training_samples, Split, LossScope, SampleGrouping, TrainingSample, TrainingSet};
pub use train::{evaluate, evaluate_holdout, train, TrainConfig, TrainReport, TrainedModel};
