//! Microservices, per-flow DAGs, and validation.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::MicroError;
use crate::netsim::NodeId;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    ModalityEncoder,
    InputProjector,
    Backbone,
    OutputProjector,
    ModalityDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Microservice {
    pub id: String,
    /// Floating-point operations per request.
    pub flops: f64,
    /// Resident bytes once deployed on a node.
    pub memory: u64,
    pub kind: ServiceKind,
}

impl Microservice {
    pub fn new(id: &str, flops: f64, memory: u64, kind: ServiceKind) -> Self {
        Self { id: id.to_string(), flops, memory, kind }
    }
}

/// Services shared by every flow, keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    services: BTreeMap<String, Microservice>,
}

impl Catalog {
    pub fn new(services: Vec<Microservice>) -> Result<Self, MicroError> {
        let mut map = BTreeMap::new();
        for s in services {
            if !(s.flops > 0.0 && s.flops.is_finite()) || s.memory == 0 {
                return Err(MicroError::InvalidService {
                    id: s.id,
                    reason: "flops and memory must be positive".into(),
                });
            }
            let id = s.id.clone();
            if map.insert(id.clone(), s).is_some() {
                return Err(MicroError::DuplicateService(id));
            }
        }
        Ok(Self { services: map })
    }

    pub fn get(&self, id: &str) -> Result<&Microservice, MicroError> {
        self.services.get(id).ok_or_else(|| MicroError::UnknownService(id.to_string()))
    }

    pub fn services(&self) -> impl Iterator<Item = &Microservice> {
        self.services.values()
    }

    pub fn len(&self) -> usize {
        self.services.len()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceEdge {
    pub src: String,
    pub dst: String,
    /// Payload per request.
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceDag {
    pub nodes: Vec<String>,
    #[serde(default)]
    pub edges: Vec<ServiceEdge>,
}

impl ServiceDag {
    pub fn new(nodes: &[&str], edges: &[(&str, &str, u64)]) -> Self {
        Self {
            nodes: nodes.iter().map(|s| s.to_string()).collect(),
            edges: edges
                .iter()
                .map(|(a, b, w)| ServiceEdge { src: a.to_string(), dst: b.to_string(), bytes: *w })
                .collect(),
        }
    }

    pub fn predecessors<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a ServiceEdge> + 'a {
        self.edges.iter().filter(move |e| e.dst == id)
    }

    pub fn has_successor(&self, id: &str) -> bool {
        self.edges.iter().any(|e| e.src == id)
    }

    /// Union of several DAGs over shared ids; parallel edges keep the
    /// largest payload.
    pub fn union<'a>(dags: impl IntoIterator<Item = &'a ServiceDag>) -> ServiceDag {
        let mut nodes = BTreeSet::new();
        let mut edges: BTreeMap<(String, String), u64> = BTreeMap::new();
        for d in dags {
            nodes.extend(d.nodes.iter().cloned());
            for e in &d.edges {
                let slot = edges.entry((e.src.clone(), e.dst.clone())).or_insert(0);
                *slot = (*slot).max(e.bytes);
            }
        }
        ServiceDag {
            nodes: nodes.into_iter().collect(),
            edges: edges.into_iter().map(|((src, dst), bytes)| ServiceEdge { src, dst, bytes }).collect(),
        }
    }
}

/// Topological order (Kahn, smallest ready id first) or one offending cycle.
pub fn validate_dag(dag: &ServiceDag) -> Result<Vec<String>, MicroError> {
    let ids: BTreeSet<&str> = dag.nodes.iter().map(String::as_str).collect();
    if ids.len() != dag.nodes.len() {
        let mut seen = BTreeSet::new();
        let dup = dag.nodes.iter().find(|n| !seen.insert(n.as_str())).cloned().unwrap_or_default();
        return Err(MicroError::DuplicateService(dup));
    }
    for e in &dag.edges {
        for end in [&e.src, &e.dst] {
            if !ids.contains(end.as_str()) {
                return Err(MicroError::UnknownService(end.clone()));
            }
        }
    }
    let mut indeg: BTreeMap<&str, usize> = ids.iter().map(|&i| (i, 0)).collect();
    for e in &dag.edges {
        *indeg.get_mut(e.dst.as_str()).expect("checked") += 1;
    }
    let mut ready: BTreeSet<&str> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&i, _)| i).collect();
    let mut order = Vec::with_capacity(ids.len());
    while let Some(n) = ready.pop_first() {
        order.push(n.to_string());
        for e in dag.edges.iter().filter(|e| e.src == n) {
            let d = indeg.get_mut(e.dst.as_str()).expect("checked");
            *d -= 1;
            if *d == 0 {
                ready.insert(e.dst.as_str());
            }
        }
    }
    if order.len() == ids.len() {
        return Ok(order);
    }
    let left: BTreeSet<&str> = indeg.iter().filter(|(_, &d)| d > 0).map(|(&i, _)| i).collect();
    Err(MicroError::CycleDetected { cycle: find_cycle(dag, &left) })
}

/// Every residual node keeps a residual predecessor, so walking smallest
/// predecessors must revisit a node. The loop found is reported in edge
/// direction, starting at its smallest id.
fn find_cycle(dag: &ServiceDag, left: &BTreeSet<&str>) -> Vec<String> {
    let pred = |n: &str| -> Option<&str> {
        dag.edges
            .iter()
            .filter(|e| e.dst == n && left.contains(e.src.as_str()))
            .map(|e| e.src.as_str())
            .min()
    };
    let mut seen = BTreeSet::new();
    let mut cur = *left.iter().next().expect("nonempty residual");
    while seen.insert(cur) {
        cur = pred(cur).expect("residual nodes keep a predecessor");
    }
    let mut cycle = vec![cur];
    let mut p = pred(cur).expect("on cycle");
    while p != cur {
        cycle.push(p);
        p = pred(p).expect("on cycle");
    }
    cycle.reverse();
    let start = (0..cycle.len()).min_by_key(|&i| cycle[i]).unwrap_or(0);
    cycle.rotate_left(start);
    cycle.into_iter().map(str::to_string).collect()
}

/// Acyclic and weakly connected.
pub fn validate_flow_dag(flow: &str, dag: &ServiceDag) -> Result<Vec<String>, MicroError> {
    let order = validate_dag(dag)?;
    if order.is_empty() {
        return Err(MicroError::Disconnected { flow: flow.to_string() });
    }
    let mut reached = BTreeSet::from([order[0].as_str()]);
    let mut grew = true;
    while grew {
        grew = false;
        for e in &dag.edges {
            let (a, b) = (reached.contains(e.src.as_str()), reached.contains(e.dst.as_str()));
            if a != b {
                reached.insert(e.src.as_str());
                reached.insert(e.dst.as_str());
                grew = true;
            }
        }
    }
    if reached.len() != order.len() {
        return Err(MicroError::Disconnected { flow: flow.to_string() });
    }
    Ok(order)
}

/// A stream of requests through one DAG issued by a user node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestFlow {
    pub id: String,
    pub dag: ServiceDag,
    pub source: NodeId,
    #[serde(default)]
    pub modality: String,
    /// Bytes sent from the source to each entry service.
    #[serde(default)]
    pub input_bytes: u64,
    /// Bytes returned from each exit service to the source.
    #[serde(default)]
    pub output_bytes: u64,
    /// Poisson arrival rate in requests per second.
    #[serde(default = "default_rate")]
    pub rate_per_s: f64,
}

fn default_rate() -> f64 {
    1.0
}

impl RequestFlow {
    pub fn new(id: &str, dag: ServiceDag, source: &str) -> Self {
        Self {
            id: id.to_string(),
            dag,
            source: source.into(),
            modality: String::new(),
            input_bytes: 0,
            output_bytes: 0,
            rate_per_s: 1.0,
        }
    }

    /// Poisson arrival times in `[0, horizon_s)`, nondecreasing.
    pub fn arrivals(&self, seed: u64, horizon_s: f64) -> Vec<f64> {
        let mut r = rng::rng(seed, &[rng::tag("arrivals"), rng::tag(&self.id)]);
        let Ok(exp) = Exp::new(self.rate_per_s) else { return Vec::new() };
        let mut t = 0.0;
        let mut out = Vec::new();
        loop {
            t += exp.sample(&mut r);
            if t >= horizon_s {
                return out;
            }
            out.push(t);
        }
    }
}

/// Seeded random walk over `nodes`: each slot the user stays with
/// probability `stay` and otherwise moves to a uniformly chosen other node.
pub fn random_walk(nodes: &[NodeId], start: usize, slots: usize, stay: f64, seed: u64) -> Vec<NodeId> {
    let mut r = rng::rng(seed, &[rng::tag("walk")]);
    let mut cur = start.min(nodes.len().saturating_sub(1));
    (0..slots)
        .map(|_| {
            let here = nodes[cur].clone();
            if nodes.len() > 1 && !r.gen_bool(stay.clamp(0.0, 1.0)) {
                let step = r.gen_range(1..nodes.len());
                cur = (cur + step) % nodes.len();
            }
            here
        })
        .collect()
}
