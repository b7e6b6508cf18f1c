//! Microservice-based multimodal inference.
//!
//! Requests flow through DAGs of shared services (encoders, projectors, a
//! backbone, decoders). This module validates the DAGs, places services on
//! topology nodes, routes requests across replicas against adversarial
//! load, and migrates services online under a long-run cost budget.

pub mod dag;
pub mod deploy;
pub mod migrate;
pub mod orchestrate;

pub use dag::{
    random_walk, validate_dag, validate_flow_dag, Catalog, Microservice, RequestFlow, ServiceDag,
    ServiceEdge, ServiceKind,
};
pub use deploy::{
    deploy_bruteforce, deploy_greedy, end_to_end_latency, end_to_end_latency_with, mean_latency,
    Deployment, DeploymentPlan, RequestEval, Routing, BRUTE_FORCE_MAX_NODES,
    BRUTE_FORCE_MAX_SERVICES,
};
pub use migrate::{
    apply_action, candidate_actions, migrate_step, run_mobility_trace, Candidate,
    MigrationAction, MigrationContext, MobilityTrace, SlotRecord, VirtualQueue,
};
pub use orchestrate::{
    robust_orchestrate, simulate, AdversaryStrategy, OrchestrateConfig, OrchestrateReport,
    RoutingPolicy,
};

use thiserror::Error;

use crate::netsim::NetError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MicroError {
    #[error("cycle detected: {}", cycle.join(" -> "))]
    CycleDetected { cycle: Vec<String> },
    #[error("unknown microservice `{0}`")]
    UnknownService(String),
    #[error("duplicate microservice `{0}`")]
    DuplicateService(String),
    #[error("invalid microservice `{id}`: {reason}")]
    InvalidService { id: String, reason: String },
    #[error("flow `{flow}` is not weakly connected")]
    Disconnected { flow: String },
    #[error("microservice `{0}` is not placed on any node")]
    Unplaced(String),
    #[error("instance too large for brute force: {nodes} nodes, {services} services")]
    InstanceTooLarge { nodes: usize, services: usize },
    #[error("memory infeasible: {0}")]
    InfeasibleMemory(String),
    #[error("microservice `{service}` has {replicas} replica(s), at least 2 required")]
    InsufficientReplication { service: String, replicas: usize },
    #[error("invalid routing policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid adversary strategy: {0}")]
    InvalidStrategy(String),
    #[error("empty or oversized space: {0}")]
    EmptySpace(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no feasible migration action")]
    NoFeasibleAction,
    #[error(transparent)]
    Net(#[from] NetError),
}
