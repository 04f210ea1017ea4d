//! Domain-adaptive base learners and a stacked ensemble over them.

pub mod adapt;
pub mod checkpoint;
pub mod data;
pub mod discrepancy;
pub mod error;
pub mod linalg;
pub mod lowrank;
pub mod nn;
pub mod rng;
pub mod stack;

pub use adapt::{train_base, Architecture, BaseLearner, EpochRecord, History, TrainConfig};
pub use data::{Domain, Generator, LabeledSet, ShiftSpec, SplitPlan};
pub use discrepancy::{Bandwidths, DiscrepancyMethod, LossWithGrad};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use lowrank::AlmConfig;
pub use nn::{Mlp, SgdConfig};
pub use stack::{
    evaluate, fit_stack, predict_stack, Classifier, Evaluation, StackConfig, StackPlan,
    StackedModel,
};
