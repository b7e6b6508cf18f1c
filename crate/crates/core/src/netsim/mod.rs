//! Event clock, network topology and the flow-level cost models shared by
//! every other subsystem.
//!
//! Link rates are piecewise constant, so transfer times are computed by
//! exact integration over the rate grid rather than by stepping a clock.

mod clock;
mod rate;
mod topology;
mod trace;

pub use clock::EventClock;
pub use rate::{random_fading_spec, RateFn, RateSegment, RateSpec, DEFAULT_STEP_S};
pub use topology::{
    computation_latency, LinkConfig, LinkState, NodeId, NodeSpec, Role, Topology, TopologyConfig,
    DEFAULT_HORIZON_S,
};
pub use trace::{write_trace_csv, TraceRecord};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("payload starting at t={start_s}s cannot complete before horizon {horizon_s}s ({remaining_bits} bits left)")]
    HorizonExceeded {
        start_s: f64,
        horizon_s: f64,
        remaining_bits: f64,
    },
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(NodeId),
    #[error("invalid node `{id}`: {reason}")]
    InvalidNode { id: NodeId, reason: String },
    #[error("invalid link {src}-{dst}: {reason}")]
    InvalidLink {
        src: NodeId,
        dst: NodeId,
        reason: String,
    },
    #[error("invalid rate function: {0}")]
    InvalidRate(String),
    #[error("no link path from `{src}` to `{dst}`")]
    Unreachable { src: NodeId, dst: NodeId },
    #[error("cannot schedule at t={at} before clock time {now}")]
    TimeInPast { at: f64, now: f64 },
}
