//! Robust request routing over replicated services: every routing policy
//! is scored against every adversarial request pattern and the policy with
//! the best worst case is returned.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dag::{validate_dag, Catalog, RequestFlow};
use super::deploy::{greedy_eval, DeploymentPlan};
use super::MicroError;
use crate::netsim::{NodeId, Topology};

/// Largest policy or strategy space accepted.
pub const MAX_SPACE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoutingPolicy {
    /// Per request, per hop: the replica finishing earliest given the load
    /// already routed in the slot.
    Greedy { name: String },
    /// Replicas taken in turn, per service.
    RoundRobin { name: String },
    /// One pinned replica per service.
    Fixed { name: String, choice: BTreeMap<String, NodeId> },
}

impl RoutingPolicy {
    pub fn name(&self) -> &str {
        match self {
            RoutingPolicy::Greedy { name } | RoutingPolicy::RoundRobin { name } | RoutingPolicy::Fixed { name, .. } => name,
        }
    }
}

/// Requests per flow in each slot; the pattern repeats over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryStrategy {
    pub name: String,
    pub pattern: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrchestrateConfig {
    pub slots: usize,
    pub slot_s: f64,
    /// Utility weight per megabyte moved.
    pub cost_weight: f64,
}

impl Default for OrchestrateConfig {
    fn default() -> Self {
        Self { slots: 8, slot_s: 1.0, cost_weight: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestrateReport {
    pub policies: Vec<String>,
    pub adversaries: Vec<String>,
    /// `payoff[i][j]`: average utility of policy `i` against strategy `j`.
    pub payoff: Vec<Vec<f64>>,
    pub worst_case: Vec<f64>,
    pub chosen: usize,
    pub chosen_policy: String,
}

fn check_space(what: &str, len: usize) -> Result<(), MicroError> {
    if len == 0 || len > MAX_SPACE {
        return Err(MicroError::EmptySpace(format!("{what} space has {len} entries, expected 1..={MAX_SPACE}")));
    }
    Ok(())
}

/// Average per-slot utility `−(mean latency + weight · MB moved)` of one
/// policy against one request pattern. Within a slot every node shares its
/// compute among the service executions routed to it.
pub fn simulate(
    plan: &DeploymentPlan,
    catalog: &Catalog,
    flows: &[RequestFlow],
    topology: &Topology,
    policy: &RoutingPolicy,
    adversary: &AdversaryStrategy,
    cfg: &OrchestrateConfig,
) -> Result<f64, MicroError> {
    if adversary.pattern.is_empty() || adversary.pattern.iter().any(|p| p.len() != flows.len()) {
        return Err(MicroError::InvalidStrategy(format!(
            "`{}` must give one request count per flow in every slot",
            adversary.name
        )));
    }
    let orders: Vec<Vec<String>> = flows.iter().map(|f| validate_dag(&f.dag)).collect::<Result<_, _>>()?;
    if let RoutingPolicy::Fixed { name, choice } = policy {
        for (svc, node) in choice {
            if !plan.replicas(svc).contains(node) {
                return Err(MicroError::InvalidPolicy(format!("`{name}` pins `{svc}` to `{node}`, which hosts no replica")));
            }
        }
    }
    let rate = |n: &NodeId| topology.node(n).map_or(f64::INFINITY, |x| x.compute_rate);
    let mut total = 0.0;
    for slot in 0..cfg.slots {
        let t0 = slot as f64 * cfg.slot_s;
        let counts = &adversary.pattern[slot % adversary.pattern.len()];
        // Route every request, then price it under the slot's final load.
        let mut load: BTreeMap<NodeId, f64> = BTreeMap::new();
        let mut turn: BTreeMap<String, usize> = BTreeMap::new();
        let mut routed = Vec::new();
        for (fi, flow) in flows.iter().enumerate() {
            for _ in 0..counts[fi] {
                let eval = greedy_eval(
                    &flow.dag,
                    &orders[fi],
                    catalog,
                    topology,
                    flow,
                    t0,
                    |s| {
                        let reps = plan.replicas(s);
                        match policy {
                            RoutingPolicy::Greedy { .. } => reps,
                            RoutingPolicy::RoundRobin { .. } => {
                                let k = turn.entry(s.to_string()).or_insert(0);
                                let pick = reps.get(*k % reps.len().max(1)).cloned();
                                *k += 1;
                                pick.into_iter().collect()
                            }
                            RoutingPolicy::Fixed { choice, .. } => match choice.get(s) {
                                Some(n) => vec![n.clone()],
                                None => reps.into_iter().take(1).collect(),
                            },
                        }
                    },
                    |svc, n| svc.flops * (load.get(n).copied().unwrap_or(0.0) + 1.0) / rate(n),
                )?;
                for n in eval.route.values() {
                    *load.entry(n.clone()).or_insert(0.0) += 1.0;
                }
                routed.push((fi, eval.route));
            }
        }
        if routed.is_empty() {
            continue;
        }
        let mut lat = 0.0;
        let mut bytes = 0u64;
        for (fi, route) in &routed {
            let eval = greedy_eval(
                &flows[*fi].dag,
                &orders[*fi],
                catalog,
                topology,
                &flows[*fi],
                t0,
                |s| route.get(s).cloned().into_iter().collect(),
                |svc, n| svc.flops * load[n] / rate(n),
            )?;
            lat += eval.latency_s;
            bytes += eval.bytes_moved;
        }
        lat /= routed.len() as f64;
        total -= lat + cfg.cost_weight * bytes as f64 / 1e6;
    }
    Ok(total / cfg.slots.max(1) as f64)
}

/// Exact maximin over the enumerated policy and strategy spaces; ties go
/// to the earlier policy.
pub fn robust_orchestrate(
    plan: &DeploymentPlan,
    catalog: &Catalog,
    flows: &[RequestFlow],
    topology: &Topology,
    adversaries: &[AdversaryStrategy],
    policies: &[RoutingPolicy],
    cfg: &OrchestrateConfig,
) -> Result<OrchestrateReport, MicroError> {
    check_space("policy", policies.len())?;
    check_space("adversary", adversaries.len())?;
    for f in flows {
        for s in &f.dag.nodes {
            let n = plan.replicas(s).len();
            if n < 2 {
                return Err(MicroError::InsufficientReplication { service: s.clone(), replicas: n });
            }
        }
    }
    let mut payoff = Vec::with_capacity(policies.len());
    for p in policies {
        let row = adversaries
            .iter()
            .map(|a| simulate(plan, catalog, flows, topology, p, a, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        payoff.push(row);
    }
    let worst_case: Vec<f64> = payoff.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let mut chosen = 0;
    for (i, w) in worst_case.iter().enumerate() {
        if *w > worst_case[chosen] {
            chosen = i;
        }
    }
    Ok(OrchestrateReport {
        policies: policies.iter().map(|p| p.name().to_string()).collect(),
        adversaries: adversaries.iter().map(|a| a.name.clone()).collect(),
        payoff,
        worst_case,
        chosen,
        chosen_policy: policies[chosen].name().to_string(),
    })
}
