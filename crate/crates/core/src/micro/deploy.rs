//! Placement of services on topology nodes and request latency.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::dag::{validate_dag, validate_flow_dag, Catalog, Microservice, RequestFlow, ServiceDag};
use super::MicroError;
use crate::netsim::{computation_latency, NetError, NodeId, Topology};

pub const BRUTE_FORCE_MAX_NODES: usize = 8;
pub const BRUTE_FORCE_MAX_SERVICES: usize = 5;

/// Service id to the set of nodes hosting a replica.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub placement: BTreeMap<String, BTreeSet<NodeId>>,
}

impl DeploymentPlan {
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        let mut p = Self::default();
        for (s, n) in pairs {
            p.place(s, &(*n).into());
        }
        p
    }

    pub fn place(&mut self, service: &str, node: &NodeId) {
        self.placement.entry(service.to_string()).or_default().insert(node.clone());
    }

    pub fn remove(&mut self, service: &str, node: &NodeId) {
        if let Some(set) = self.placement.get_mut(service) {
            set.remove(node);
        }
    }

    pub fn replicas(&self, service: &str) -> Vec<NodeId> {
        self.placement.get(service).map(|s| s.iter().cloned().collect()).unwrap_or_default()
    }

    /// Memory charged per node; a service counts once per node however
    /// many flows use it.
    pub fn node_memory(&self, catalog: &Catalog) -> Result<BTreeMap<NodeId, u64>, MicroError> {
        let mut mem = BTreeMap::new();
        for (svc, nodes) in &self.placement {
            let m = catalog.get(svc)?.memory;
            for n in nodes {
                *mem.entry(n.clone()).or_insert(0) += m;
            }
        }
        Ok(mem)
    }

    pub fn check_memory(&self, catalog: &Catalog, topology: &Topology) -> Result<(), MicroError> {
        for (node, used) in self.node_memory(catalog)? {
            let storage = topology.node(&node)?.storage;
            if used > storage {
                return Err(MicroError::InfeasibleMemory(format!(
                    "node `{node}` needs {used} bytes but has {storage}"
                )));
            }
        }
        Ok(())
    }

    pub fn check_covers(&self, dag: &ServiceDag) -> Result<(), MicroError> {
        for s in &dag.nodes {
            if self.placement.get(s).is_none_or(|r| r.is_empty()) {
                return Err(MicroError::Unplaced(s.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Commit, in topological order, to the replica finishing earliest
    /// given the replicas already chosen upstream.
    #[default]
    Greedy,
    /// Earliest finish per (service, replica) over every upstream choice.
    /// A service feeding several successors may then run on more than one
    /// replica for the same request.
    EarliestFinish,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestEval {
    pub latency_s: f64,
    /// Serving node per service; absent for services treated as pass-through.
    pub route: BTreeMap<String, NodeId>,
    /// Bytes carried between distinct nodes.
    pub bytes_moved: u64,
}

/// Greedy evaluation with caller-supplied candidate replicas and compute
/// costs. A service with no candidates passes data through at no cost,
/// which lets partial placements be scored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn greedy_eval<C, S>(
    dag: &ServiceDag,
    order: &[String],
    catalog: &Catalog,
    topology: &Topology,
    flow: &RequestFlow,
    t0: f64,
    mut candidates: C,
    mut compute: S,
) -> Result<RequestEval, MicroError>
where
    C: FnMut(&str) -> Vec<NodeId>,
    S: FnMut(&Microservice, &NodeId) -> f64,
{
    let mut finish: BTreeMap<&str, f64> = BTreeMap::new();
    let mut route: BTreeMap<String, NodeId> = BTreeMap::new();
    let mut bytes_moved = 0u64;
    let hop = |src: &NodeId, dst: &NodeId, bytes: u64, at: f64| -> Result<f64, NetError> {
        if bytes == 0 {
            Ok(0.0)
        } else {
            topology.transfer_latency(src, dst, bytes, at)
        }
    };
    for s in order {
        let svc = catalog.get(s)?;
        let preds: Vec<_> = dag.predecessors(s).collect();
        let mut best: Option<(f64, NodeId)> = None;
        let cands = candidates(s);
        let mut blocked = None;
        for n in cands.iter().cloned() {
            let ready = (|| -> Result<f64, NetError> {
                let mut ready = t0;
                if preds.is_empty() {
                    ready += hop(&flow.source, &n, flow.input_bytes, t0)?;
                }
                for e in &preds {
                    let f = finish[e.src.as_str()];
                    let arrive = match route.get(&e.src) {
                        Some(m) => f + hop(m, &n, e.bytes, f)?,
                        None => f,
                    };
                    ready = ready.max(arrive);
                }
                Ok(ready)
            })();
            let ready = match ready {
                Ok(r) => r,
                Err(e @ NetError::Unreachable { .. }) => {
                    blocked = Some(e);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let done = ready + compute(svc, &n);
            if best.as_ref().is_none_or(|(b, _)| done < *b) {
                best = Some((done, n));
            }
        }
        if let (None, Some(e)) = (&best, blocked) {
            return Err(e.into());
        }
        match best {
            Some((done, n)) => {
                if preds.is_empty() && flow.input_bytes > 0 && n != flow.source {
                    bytes_moved += flow.input_bytes;
                }
                for e in &preds {
                    if route.get(&e.src).is_some_and(|m| m != &n) {
                        bytes_moved += e.bytes;
                    }
                }
                finish.insert(s, done);
                route.insert(s.clone(), n);
            }
            None => {
                let ready = preds.iter().map(|e| finish[e.src.as_str()]).fold(t0, f64::max);
                finish.insert(s, ready);
            }
        }
    }
    let mut end = t0;
    for s in order.iter().filter(|s| !dag.has_successor(s)) {
        let f = finish[s.as_str()];
        let back = match route.get(s) {
            Some(n) => {
                if flow.output_bytes > 0 && n != &flow.source {
                    bytes_moved += flow.output_bytes;
                }
                hop(n, &flow.source, flow.output_bytes, f)?
            }
            None => 0.0,
        };
        end = end.max(f + back);
    }
    Ok(RequestEval { latency_s: end - t0, route, bytes_moved })
}

fn earliest_finish_eval(
    plan: &DeploymentPlan,
    dag: &ServiceDag,
    order: &[String],
    catalog: &Catalog,
    topology: &Topology,
    flow: &RequestFlow,
    t0: f64,
) -> Result<RequestEval, MicroError> {
    let hop = |src: &NodeId, dst: &NodeId, bytes: u64, at: f64| -> Result<f64, NetError> {
        if bytes == 0 {
            return Ok(0.0);
        }
        match topology.transfer_latency(src, dst, bytes, at) {
            Err(NetError::Unreachable { .. }) => Ok(f64::INFINITY),
            r => r,
        }
    };
    let mut f: BTreeMap<&str, Vec<(NodeId, f64)>> = BTreeMap::new();
    for s in order {
        let svc = catalog.get(s)?;
        let preds: Vec<_> = dag.predecessors(s).collect();
        let mut table = Vec::new();
        for n in plan.replicas(s) {
            let mut ready = t0;
            if preds.is_empty() {
                ready += hop(&flow.source, &n, flow.input_bytes, t0)?;
            }
            for e in &preds {
                let mut arrive = f64::INFINITY;
                for (m, fm) in &f[e.src.as_str()] {
                    arrive = arrive.min(fm + hop(m, &n, e.bytes, *fm)?);
                }
                ready = ready.max(arrive);
            }
            let node = topology.node(&n)?;
            table.push((n, ready + computation_latency(svc.flops, node)));
        }
        f.insert(s, table);
    }
    let mut end = t0;
    for s in order.iter().filter(|s| !dag.has_successor(s)) {
        let mut best = f64::INFINITY;
        for (n, fn_) in &f[s.as_str()] {
            best = best.min(fn_ + hop(n, &flow.source, flow.output_bytes, *fn_)?);
        }
        end = end.max(best);
    }
    if end.is_infinite() {
        return Err(NetError::Unreachable { src: flow.source.clone(), dst: flow.source.clone() }.into());
    }
    let route = f
        .iter()
        .filter_map(|(s, t)| {
            t.iter()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(n, _)| (s.to_string(), n.clone()))
        })
        .collect();
    Ok(RequestEval { latency_s: end - t0, route, bytes_moved: 0 })
}

/// Request latency of one flow under greedy routing, starting at time zero.
pub fn end_to_end_latency(
    plan: &DeploymentPlan,
    catalog: &Catalog,
    flow: &RequestFlow,
    topology: &Topology,
) -> Result<f64, MicroError> {
    Ok(end_to_end_latency_with(plan, catalog, flow, topology, Routing::Greedy, 0.0)?.latency_s)
}

pub fn end_to_end_latency_with(
    plan: &DeploymentPlan,
    catalog: &Catalog,
    flow: &RequestFlow,
    topology: &Topology,
    routing: Routing,
    t0: f64,
) -> Result<RequestEval, MicroError> {
    let order = validate_dag(&flow.dag)?;
    plan.check_covers(&flow.dag)?;
    match routing {
        Routing::Greedy => greedy_eval(
            &flow.dag,
            &order,
            catalog,
            topology,
            flow,
            t0,
            |s| plan.replicas(s),
            |svc, n| topology.node(n).map_or(f64::INFINITY, |node| computation_latency(svc.flops, node)),
        ),
        Routing::EarliestFinish => earliest_finish_eval(plan, &flow.dag, &order, catalog, topology, flow, t0),
    }
}

/// Mean greedy latency over flows.
pub fn mean_latency(
    plan: &DeploymentPlan,
    catalog: &Catalog,
    flows: &[RequestFlow],
    topology: &Topology,
    t0: f64,
) -> Result<f64, MicroError> {
    if flows.is_empty() {
        return Err(MicroError::EmptySpace("flows".into()));
    }
    let mut sum = 0.0;
    for f in flows {
        sum += end_to_end_latency_with(plan, catalog, f, topology, Routing::Greedy, t0)?.latency_s;
    }
    Ok(sum / flows.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub plan: DeploymentPlan,
    pub mean_latency_s: f64,
    pub flow_latency_s: BTreeMap<String, f64>,
    pub node_memory: BTreeMap<NodeId, u64>,
}

impl Deployment {
    fn assemble(
        plan: DeploymentPlan,
        catalog: &Catalog,
        flows: &[RequestFlow],
        topology: &Topology,
    ) -> Result<Self, MicroError> {
        let mut flow_latency_s = BTreeMap::new();
        for f in flows {
            flow_latency_s.insert(f.id.clone(), end_to_end_latency(&plan, catalog, f, topology)?);
        }
        Ok(Self {
            mean_latency_s: mean_latency(&plan, catalog, flows, topology, 0.0)?,
            flow_latency_s,
            node_memory: plan.node_memory(catalog)?,
            plan,
        })
    }
}

/// Distinct services across flows (sorted) after validating each flow.
fn services_of(catalog: &Catalog, flows: &[RequestFlow]) -> Result<Vec<String>, MicroError> {
    if flows.is_empty() {
        return Err(MicroError::EmptySpace("flows".into()));
    }
    for f in flows {
        validate_flow_dag(&f.id, &f.dag)?;
        for s in &f.dag.nodes {
            catalog.get(s)?;
        }
    }
    let union = ServiceDag::union(flows.iter().map(|f| &f.dag));
    validate_dag(&union)
}

fn host_ids(topology: &Topology) -> Vec<NodeId> {
    let mut ids: Vec<NodeId> = topology.nodes().iter().map(|n| n.id.clone()).collect();
    ids.sort();
    ids
}

fn is_unreachable(e: &MicroError) -> bool {
    matches!(e, MicroError::Net(NetError::Unreachable { .. }))
}

/// Exhaustive single-replica placement minimizing mean latency; the first
/// optimum in lexicographic order of (service → host index) wins.
pub fn deploy_bruteforce(catalog: &Catalog, flows: &[RequestFlow], topology: &Topology) -> Result<Deployment, MicroError> {
    let hosts = host_ids(topology);
    let mut services = services_of(catalog, flows)?;
    services.sort();
    if hosts.len() > BRUTE_FORCE_MAX_NODES || services.len() > BRUTE_FORCE_MAX_SERVICES {
        return Err(MicroError::InstanceTooLarge { nodes: hosts.len(), services: services.len() });
    }
    let storage: Vec<u64> = hosts.iter().map(|h| topology.node(h).map(|n| n.storage)).collect::<Result<_, _>>()?;
    let memory: Vec<u64> = services.iter().map(|s| catalog.get(s).map(|m| m.memory)).collect::<Result<_, _>>()?;
    let mut idx = vec![0usize; services.len()];
    let mut best: Option<(f64, DeploymentPlan)> = None;
    loop {
        let mut used = vec![0u64; hosts.len()];
        for (si, &h) in idx.iter().enumerate() {
            used[h] += memory[si];
        }
        if used.iter().zip(&storage).all(|(u, s)| u <= s) {
            let mut plan = DeploymentPlan::default();
            for (si, &h) in idx.iter().enumerate() {
                plan.place(&services[si], &hosts[h]);
            }
            match mean_latency(&plan, catalog, flows, topology, 0.0) {
                Ok(lat) => {
                    if best.as_ref().is_none_or(|(b, _)| lat < *b) {
                        best = Some((lat, plan));
                    }
                }
                Err(e) if is_unreachable(&e) => {}
                Err(e) => return Err(e),
            }
        }
        // Odometer, last service fastest.
        let mut i = services.len();
        loop {
            if i == 0 {
                let (_, plan) = best.ok_or_else(|| MicroError::InfeasibleMemory("no placement fits node memory".into()))?;
                return Deployment::assemble(plan, catalog, flows, topology);
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < hosts.len() {
                break;
            }
            idx[i] = 0;
        }
    }
}

/// Places services in topological order of the union DAG, each on the
/// feasible host that minimizes the mean latency of the partial placement
/// (unplaced services pass data through at no cost).
pub fn deploy_greedy(catalog: &Catalog, flows: &[RequestFlow], topology: &Topology) -> Result<Deployment, MicroError> {
    let order = services_of(catalog, flows)?;
    let hosts = host_ids(topology);
    let mut free: BTreeMap<NodeId, u64> = BTreeMap::new();
    for h in &hosts {
        free.insert(h.clone(), topology.node(h)?.storage);
    }
    let flow_orders: Vec<Vec<String>> = flows.iter().map(|f| validate_dag(&f.dag)).collect::<Result<_, _>>()?;
    let mut plan = DeploymentPlan::default();
    for s in &order {
        let mem = catalog.get(s)?.memory;
        let mut best: Option<(f64, NodeId)> = None;
        for h in &hosts {
            if free[h] < mem {
                continue;
            }
            plan.place(s, h);
            let score = partial_mean(&plan, catalog, flows, &flow_orders, topology);
            plan.remove(s, h);
            match score {
                Ok(lat) => {
                    if best.as_ref().is_none_or(|(b, _)| lat < *b) {
                        best = Some((lat, h.clone()));
                    }
                }
                Err(e) if is_unreachable(&e) => {}
                Err(e) => return Err(e),
            }
        }
        let (_, h) = best.ok_or_else(|| MicroError::InfeasibleMemory(format!("no node can host `{s}`")))?;
        *free.get_mut(&h).expect("host") -= mem;
        plan.place(s, &h);
    }
    Deployment::assemble(plan, catalog, flows, topology)
}

fn partial_mean(
    plan: &DeploymentPlan,
    catalog: &Catalog,
    flows: &[RequestFlow],
    orders: &[Vec<String>],
    topology: &Topology,
) -> Result<f64, MicroError> {
    let mut sum = 0.0;
    for (f, order) in flows.iter().zip(orders) {
        let eval = greedy_eval(
            &f.dag,
            order,
            catalog,
            topology,
            f,
            0.0,
            |s| plan.replicas(s),
            |svc, n| topology.node(n).map_or(f64::INFINITY, |node| computation_latency(svc.flops, node)),
        )?;
        sum += eval.latency_s;
    }
    Ok(sum / flows.len() as f64)
}
