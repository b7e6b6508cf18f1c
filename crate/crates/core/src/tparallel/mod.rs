//! Looped tensor parallelism.
//!
//! A GEMM `X·W` is cut along the output dimension into column slices, one
//! per device. Devices return only their partial products and the server
//! concatenates them, applying the layer nonlinearity once. The same square
//! block can be reused at every depth of a loop, so parameter storage does
//! not grow with depth.

pub mod exec;
pub mod plan;

pub use exec::{
    encode_forward, execute_split, looped_forward, Activation, DeviceRows, EncodeOutput,
    ExecRecord, LoopOutput, LoopSpec, SplitExecution,
};
pub use plan::{
    merge_flops, plan_split, plan_split_with, round_latency, slice_latency, storage_cap,
    GemmTask, PlanMode, Slice, SplitPlan,
};

use thiserror::Error;

use crate::netsim::{NetError, NodeId};

pub const BYTES_PER_SCALAR: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TpError {
    #[error("invalid GEMM task {m}x{k}x{n}: every dimension must be at least 1")]
    InvalidTask { m: usize, k: usize, n: usize },
    #[error("no candidate devices")]
    NoCandidates,
    #[error("storage infeasible: device `{device}` has {storage} bytes but its shard needs {shard_bytes}")]
    InfeasibleStorage {
        device: NodeId,
        storage: u64,
        shard_bytes: u64,
    },
    #[error("device `{0}` cannot reach the server")]
    UnreachableDevice(NodeId),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("loop block must be square, got {rows}x{cols}")]
    NonSquareBlock { rows: usize, cols: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Net(#[from] NetError),
}
