//! Deterministic simulator for large models at the network edge.
//!
//! * [`netsim`]: event clock, topology, link and compute cost models.
//! * [`fedft`]: split federated fine-tuning with low-rank adapters and a
//!   Rényi-DP accountant.
//! * [`tparallel`]: looped tensor-parallel GEMM planning and execution.
//! * [`micro`]: microservice DAGs, deployment, robust routing and
//!   Lyapunov-driven migration.
//! * [`chanpred`]: federated fading-channel prediction at toy scale.
//! * [`app`]: scenario configuration and the experiment runners behind the
//!   `edgelam` binary.

pub mod app;
pub mod chanpred;
pub mod fedft;
pub mod micro;
pub mod netsim;
pub mod rng;
pub mod tparallel;
