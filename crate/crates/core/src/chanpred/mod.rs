//! Federated channel prediction at desk scale.
//!
//! Synthetic Rayleigh fading from a sum-of-sinusoids generator, small
//! sequence predictors (linear AR, GRU, tanh RNN, one attention block with
//! low-rank adapters) and a harness comparing federated averaging with
//! local-only training on 5% shards.

pub mod channel;
pub mod model;
pub mod train;

pub use channel::{add_estimation_noise, gen_jakes, make_windows, sum_of_sinusoids, ChannelSeries, Window};
pub use model::{Predictor, PredictorKind, PredictorSpec};
pub use train::{
    eval_subset, evaluate_nmse, make_shards, median, run_case_study, train_federated, train_local, train_local_stream,
    CaseStudyReport, CaseSummary, ChanpredConfig, EvalData, FedConfig, LossRow, TrainOpts, TrainReport,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChanError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("insufficient data: need {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("invalid chanpred configuration: {0}")]
    InvalidConfig(String),
}
