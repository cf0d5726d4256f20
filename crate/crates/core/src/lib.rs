//! Margin-weighted universal domain adaptation at desk scale.
//!
//! A small dense network engine with hand-written gradients, the
//! target-margin-register weighting scheme, synthetic scenarios, the
//! weighted adversarial trainer and its baselines, open-set evaluation and a
//! calculator for the target-risk bound.

// Negated comparisons double as NaN rejection throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bound;
pub mod check;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod matrix;
pub mod nn;
pub mod report;
pub mod scenario;
pub mod trainer;
pub mod weighting;

pub use error::{Result, SuanError};
pub use matrix::Matrix2;
pub use nn::{GradientSet, MlpParams};
pub use scenario::{Dataset, Domain, LabelSets, Scenario, ScenarioConfig};
pub use trainer::{Mode, SuanModel, TrainConfig, TrainTrace};
pub use weighting::{MarginRegister, NormalizationConfig, WeightBatch};
