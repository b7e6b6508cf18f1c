//! Split federated fine-tuning.
//!
//! The model is cut into a device-side embedding, a frozen server-side
//! decoder stack carrying trainable low-rank adapters, and a device-side task
//! head. Only embeddings, representations and per-sample Jacobian vectors
//! cross the network; the server averages adapter gradients over devices.

pub mod model;
pub mod privacy;
pub mod round;
pub mod runner;
pub mod task;

pub use model::{
    attach_lora, budget_rank, decoder_backward, decoder_forward, frozen_forward, partition_model,
    AdapterGrads, AdapterSet, LayerCache, LoraAdapter, ModelPartition,
};
pub use privacy::{rdp_epsilon, PrivacySpec};
pub use round::{
    backward_round, forward_round, BackwardOutput, DeviceBatch, ForwardOutput, JacobianBatch,
    NoiseSource, Phase, PhaseRecord, RoundTrace, BYTES_PER_SCALAR,
};
pub use runner::{run_fedft, train_centralized, FedReport, FedftConfig, RoundSummary};
pub use task::{device_loss_grad, Sample, SyntheticTask};

use thiserror::Error;

use crate::netsim::{NetError, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("invalid width: {0}")]
    InvalidWidth(String),
    #[error("rank {rank} out of range 1..={d_model}")]
    RankOutOfRange { rank: usize, d_model: usize },
    #[error("device `{0}` has no link path to the server")]
    UnreachableDevice(NodeId),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid privacy parameters: {0}")]
    InvalidPrivacy(String),
    #[error("invalid fedft configuration: {0}")]
    InvalidConfig(String),
    #[error("no participating devices")]
    NoDevices,
    #[error(transparent)]
    Net(#[from] NetError),
}
