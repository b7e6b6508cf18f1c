//! Online migration with a virtual budget queue (drift-plus-penalty).

use std::fmt;

use serde::{Deserialize, Serialize};

use super::dag::{Catalog, RequestFlow};
use super::deploy::{mean_latency, DeploymentPlan};
use super::MicroError;
use crate::netsim::{NetError, NodeId, Topology};

/// `Q ← max(Q + cost − budget, 0)`, traded against latency by `V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualQueue {
    pub q: f64,
    pub budget: f64,
    pub v: f64,
}

impl VirtualQueue {
    pub fn new(budget: f64, v: f64) -> Result<Self, MicroError> {
        if !(v > 0.0 && v.is_finite()) || !(budget >= 0.0 && budget.is_finite()) {
            return Err(MicroError::InvalidConfig(format!("need V > 0 and budget >= 0, got V={v}, budget={budget}")));
        }
        Ok(Self { q: 0.0, budget, v })
    }

    pub fn update(&mut self, cost: f64) {
        self.q = (self.q + cost - self.budget).max(0.0);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MigrationAction {
    Stay,
    Move { service: String, from: NodeId, to: NodeId },
}

impl fmt::Display for MigrationAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MigrationAction::Stay => write!(f, "stay"),
            MigrationAction::Move { service, from, to } => write!(f, "move {service} {from}->{to}"),
        }
    }
}

/// Fixed inputs of a migration run.
#[derive(Debug, Clone)]
pub struct MigrationContext<'a> {
    pub catalog: &'a Catalog,
    pub flows: &'a [RequestFlow],
    pub topology: &'a Topology,
    /// Added to the state-transfer time of every move.
    pub handoff_s: f64,
    pub slot_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub action: MigrationAction,
    /// Mean request latency after the action, with flows issued by the user.
    pub latency_s: f64,
    pub cost: f64,
}

fn with_source(flows: &[RequestFlow], user: &NodeId) -> Vec<RequestFlow> {
    flows
        .iter()
        .map(|f| RequestFlow { source: user.clone(), ..f.clone() })
        .collect()
}

/// Staying plus every single-replica move to a node with room for it.
/// Moves whose state cannot reach the target, or that leave a flow
/// unreachable, are dropped. Stay is dropped if the current placement
/// overflows memory.
pub fn candidate_actions(
    ctx: &MigrationContext<'_>,
    plan: &DeploymentPlan,
    user: &NodeId,
    t0: f64,
) -> Result<Vec<Candidate>, MicroError> {
    let flows = with_source(ctx.flows, user);
    let mut out = Vec::new();
    let score = |p: &DeploymentPlan| match mean_latency(p, ctx.catalog, &flows, ctx.topology, t0) {
        Ok(l) => Ok(Some(l)),
        Err(MicroError::Net(NetError::Unreachable { .. })) => Ok(None),
        Err(e) => Err(e),
    };
    if plan.check_memory(ctx.catalog, ctx.topology).is_ok() {
        if let Some(latency_s) = score(plan)? {
            out.push(Candidate { action: MigrationAction::Stay, latency_s, cost: 0.0 });
        }
    }
    let used = plan.node_memory(ctx.catalog)?;
    let mut hosts: Vec<&NodeId> = ctx.topology.nodes().iter().map(|n| &n.id).collect();
    hosts.sort();
    for (svc, replicas) in &plan.placement {
        let mem = ctx.catalog.get(svc)?.memory;
        for from in replicas {
            for &to in &hosts {
                if replicas.contains(to) {
                    continue;
                }
                let room = ctx.topology.node(to)?.storage.saturating_sub(used.get(to).copied().unwrap_or(0));
                if room < mem {
                    continue;
                }
                let transfer = match ctx.topology.transfer_latency(from, to, mem, t0) {
                    Ok(t) => t,
                    Err(NetError::Unreachable { .. }) => continue,
                    Err(e) => return Err(e.into()),
                };
                let mut next = plan.clone();
                next.remove(svc, from);
                next.place(svc, to);
                if let Some(latency_s) = score(&next)? {
                    out.push(Candidate {
                        action: MigrationAction::Move { service: svc.clone(), from: from.clone(), to: to.clone() },
                        latency_s,
                        cost: transfer + ctx.handoff_s,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// `argmin V·latency + Q·cost` over the candidates (stay first on ties,
/// then the listed order), followed by the queue update.
pub fn migrate_step(queue: &VirtualQueue, candidates: &[Candidate]) -> Result<(Candidate, VirtualQueue), MicroError> {
    let mut best: Option<(f64, &Candidate)> = None;
    let mut ordered: Vec<&Candidate> = candidates.iter().collect();
    ordered.sort_by(|a, b| a.action.cmp(&b.action));
    for c in ordered {
        let s = queue.v * c.latency_s + queue.q * c.cost;
        if best.is_none_or(|(b, _)| s < b) {
            best = Some((s, c));
        }
    }
    let (_, chosen) = best.ok_or(MicroError::NoFeasibleAction)?;
    let mut next = *queue;
    next.update(chosen.cost);
    Ok((chosen.clone(), next))
}

pub fn apply_action(plan: &mut DeploymentPlan, action: &MigrationAction) {
    if let MigrationAction::Move { service, from, to } = action {
        plan.remove(service, from);
        plan.place(service, to);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: usize,
    pub user: NodeId,
    pub action: String,
    pub latency_s: f64,
    pub cost: f64,
    /// Queue after this slot's update.
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityTrace {
    pub records: Vec<SlotRecord>,
    pub avg_cost: f64,
    pub avg_latency_s: f64,
    pub latency_var: f64,
    /// Fraction of slots above the deadline, when one is given.
    pub deadline_miss: Option<f64>,
    pub migrations: usize,
    /// Largest cost of any candidate seen over the run.
    pub max_candidate_cost: f64,
    pub final_plan: DeploymentPlan,
}

/// One drift-plus-penalty decision per slot while the user follows
/// `user_path`.
pub fn run_mobility_trace(
    ctx: &MigrationContext<'_>,
    plan: &DeploymentPlan,
    user_path: &[NodeId],
    queue: VirtualQueue,
    deadline_s: Option<f64>,
) -> Result<MobilityTrace, MicroError> {
    let mut plan = plan.clone();
    let mut queue = queue;
    let mut records = Vec::with_capacity(user_path.len());
    let mut max_cost: f64 = 0.0;
    for (slot, user) in user_path.iter().enumerate() {
        let t0 = slot as f64 * ctx.slot_s;
        let cands = candidate_actions(ctx, &plan, user, t0)?;
        max_cost = cands.iter().map(|c| c.cost).fold(max_cost, f64::max);
        let (chosen, next) = migrate_step(&queue, &cands)?;
        apply_action(&mut plan, &chosen.action);
        queue = next;
        records.push(SlotRecord {
            slot,
            user: user.clone(),
            action: chosen.action.to_string(),
            latency_s: chosen.latency_s,
            cost: chosen.cost,
            q: queue.q,
        });
    }
    let n = records.len().max(1) as f64;
    let avg_cost = records.iter().map(|r| r.cost).sum::<f64>() / n;
    let avg_latency_s = records.iter().map(|r| r.latency_s).sum::<f64>() / n;
    let latency_var = records.iter().map(|r| (r.latency_s - avg_latency_s).powi(2)).sum::<f64>() / n;
    let deadline_miss = deadline_s.map(|d| records.iter().filter(|r| r.latency_s > d).count() as f64 / n);
    let migrations = records.iter().filter(|r| r.action != "stay").count();
    Ok(MobilityTrace {
        records,
        avg_cost,
        avg_latency_s,
        latency_var,
        deadline_miss,
        migrations,
        max_candidate_cost: max_cost,
        final_plan: plan,
    })
}
