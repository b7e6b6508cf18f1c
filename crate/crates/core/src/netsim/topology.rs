use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::rate::{RateFn, RateSpec};
use super::NetError;
use crate::rng;

/// Opaque node identifier. Ordering is lexicographic and is the tie-break
/// order used by every planner.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Device,
    Server,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Floating-point operations per second.
    pub compute_rate: f64,
    /// Bytes.
    pub storage: u64,
    pub role: Role,
}

impl NodeSpec {
    pub fn new(id: &str, compute_rate: f64, storage: u64, role: Role) -> Self {
        Self {
            id: NodeId::from(id),
            compute_rate,
            storage,
            role,
        }
    }
}

/// A bidirectional link; both directions share one rate function.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkState {
    pub src: NodeId,
    pub dst: NodeId,
    pub rate: RateFn,
    pub prop_delay: f64,
}

impl LinkState {
    pub fn new(src: &str, dst: &str, rate: RateFn, prop_delay: f64) -> Self {
        Self {
            src: NodeId::from(src),
            dst: NodeId::from(dst),
            rate,
            prop_delay,
        }
    }

    /// Smallest `d` with ∫_{t0}^{t0+d} rate ≥ 8·bytes, plus propagation delay.
    pub fn transmission_latency(&self, bytes: u64, t0: f64, horizon_s: f64) -> Result<f64, NetError> {
        let bits = bytes as f64 * 8.0;
        Ok(self.rate.drain_time(bits, t0, horizon_s)? + self.prop_delay)
    }

    fn joins(&self, a: &NodeId, b: &NodeId) -> bool {
        (&self.src == a && &self.dst == b) || (&self.src == b && &self.dst == a)
    }
}

pub fn computation_latency(flops: f64, node: &NodeSpec) -> f64 {
    flops / node.compute_rate
}

/// Default simulation horizon in seconds.
pub const DEFAULT_HORIZON_S: f64 = 1.0e6;

#[derive(Debug, Clone)]
pub struct Topology {
    nodes: Vec<NodeSpec>,
    links: Vec<LinkState>,
    seed: u64,
    horizon_s: f64,
    index: HashMap<NodeId, usize>,
    /// `routes[a][b]`: link indices of a minimum-hop path from a to b.
    routes: Vec<Vec<Option<Vec<usize>>>>,
}

impl Topology {
    pub fn new(nodes: Vec<NodeSpec>, links: Vec<LinkState>, seed: u64) -> Result<Self, NetError> {
        Self::with_horizon(nodes, links, seed, DEFAULT_HORIZON_S)
    }

    pub fn with_horizon(
        nodes: Vec<NodeSpec>,
        links: Vec<LinkState>,
        seed: u64,
        horizon_s: f64,
    ) -> Result<Self, NetError> {
        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if !(n.compute_rate.is_finite() && n.compute_rate > 0.0) {
                return Err(NetError::InvalidNode {
                    id: n.id.clone(),
                    reason: "compute_rate must be positive".into(),
                });
            }
            if n.storage == 0 {
                return Err(NetError::InvalidNode {
                    id: n.id.clone(),
                    reason: "storage must be positive".into(),
                });
            }
            if index.insert(n.id.clone(), i).is_some() {
                return Err(NetError::DuplicateNode(n.id.clone()));
            }
        }
        for l in &links {
            for end in [&l.src, &l.dst] {
                if !index.contains_key(end) {
                    return Err(NetError::UnknownNode(end.clone()));
                }
            }
            if l.src == l.dst {
                return Err(NetError::InvalidLink {
                    src: l.src.clone(),
                    dst: l.dst.clone(),
                    reason: "self-loop".into(),
                });
            }
            if !(l.prop_delay.is_finite() && l.prop_delay >= 0.0) {
                return Err(NetError::InvalidLink {
                    src: l.src.clone(),
                    dst: l.dst.clone(),
                    reason: "prop_delay must be nonnegative".into(),
                });
            }
            l.rate.validate()?;
        }
        if !(horizon_s.is_finite() && horizon_s > 0.0) {
            return Err(NetError::InvalidRate("horizon must be positive".into()));
        }
        let routes = all_pairs_routes(&nodes, &links, &index);
        Ok(Self {
            nodes,
            links,
            seed,
            horizon_s,
            index,
            routes,
        })
    }

    pub fn from_config(cfg: &TopologyConfig, seed: u64) -> Result<Self, NetError> {
        let seed = cfg.seed.unwrap_or(seed);
        let links = cfg
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| LinkState {
                src: l.src.clone(),
                dst: l.dst.clone(),
                rate: l.rate.resolve(rng::derive_seed(seed, &[rng::tag("link"), i as u64])),
                prop_delay: l.prop_delay_s,
            })
            .collect();
        Self::with_horizon(cfg.nodes.clone(), links, seed, cfg.horizon_s)
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn links(&self) -> &[LinkState] {
        &self.links
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn horizon_s(&self) -> f64 {
        self.horizon_s
    }

    pub fn index_of(&self, id: &NodeId) -> Result<usize, NetError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| NetError::UnknownNode(id.clone()))
    }

    pub fn node(&self, id: &NodeId) -> Result<&NodeSpec, NetError> {
        Ok(&self.nodes[self.index_of(id)?])
    }

    pub fn direct_link(&self, a: &NodeId, b: &NodeId) -> Option<&LinkState> {
        self.links.iter().find(|l| l.joins(a, b))
    }

    /// Minimum-hop path between two nodes as a list of links.
    pub fn route(&self, src: &NodeId, dst: &NodeId) -> Result<Vec<&LinkState>, NetError> {
        let (a, b) = (self.index_of(src)?, self.index_of(dst)?);
        self.routes[a][b]
            .as_ref()
            .map(|p| p.iter().map(|&i| &self.links[i]).collect())
            .ok_or_else(|| NetError::Unreachable {
                src: src.clone(),
                dst: dst.clone(),
            })
    }

    pub fn reachable(&self, src: &NodeId, dst: &NodeId) -> bool {
        self.route(src, dst).is_ok()
    }

    /// Store-and-forward transfer over the minimum-hop route; zero when
    /// `src == dst`.
    pub fn transfer_latency(
        &self,
        src: &NodeId,
        dst: &NodeId,
        bytes: u64,
        t0: f64,
    ) -> Result<f64, NetError> {
        if src == dst {
            return Ok(0.0);
        }
        let mut t = t0;
        for link in self.route(src, dst)? {
            t += link.transmission_latency(bytes, t, self.horizon_s)?;
        }
        Ok(t - t0)
    }

    /// Bottleneck rate along the route at time `t`.
    pub fn route_rate(&self, src: &NodeId, dst: &NodeId, t: f64) -> Result<f64, NetError> {
        if src == dst {
            return Ok(f64::INFINITY);
        }
        Ok(self
            .route(src, dst)?
            .iter()
            .map(|l| l.rate.rate_at(t))
            .fold(f64::INFINITY, f64::min))
    }

    pub fn compute_latency(&self, flops: f64, id: &NodeId) -> Result<f64, NetError> {
        Ok(computation_latency(flops, self.node(id)?))
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.role == role)
            .map(|n| n.id.clone())
            .collect()
    }
}

fn all_pairs_routes(
    nodes: &[NodeSpec],
    links: &[LinkState],
    index: &HashMap<NodeId, usize>,
) -> Vec<Vec<Option<Vec<usize>>>> {
    let n = nodes.len();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (li, l) in links.iter().enumerate() {
        let (a, b) = (index[&l.src], index[&l.dst]);
        adj[a].push((b, li));
        adj[b].push((a, li));
    }
    (0..n)
        .map(|s| {
            let mut via: Vec<Option<(usize, usize)>> = vec![None; n];
            let mut seen = vec![false; n];
            seen[s] = true;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &(v, li) in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        via[v] = Some((u, li));
                        q.push_back(v);
                    }
                }
            }
            (0..n)
                .map(|d| {
                    if d == s {
                        return Some(Vec::new());
                    }
                    if !seen[d] {
                        return None;
                    }
                    let mut path = Vec::new();
                    let mut cur = d;
                    while let Some((prev, li)) = via[cur] {
                        path.push(li);
                        cur = prev;
                    }
                    path.reverse();
                    Some(path)
                })
                .collect()
        })
        .collect()
}

/// The `[topology]` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// Overrides the scenario seed for link randomness when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_horizon")]
    pub horizon_s: f64,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub src: NodeId,
    pub dst: NodeId,
    pub rate: RateSpec,
    #[serde(default)]
    pub prop_delay_s: f64,
}

fn default_horizon() -> f64 {
    DEFAULT_HORIZON_S
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> Topology {
        let nodes = vec![
            NodeSpec::new("a", 1e9, 1 << 20, Role::Device),
            NodeSpec::new("b", 1e9, 1 << 20, Role::Server),
            NodeSpec::new("c", 2e9, 1 << 20, Role::Device),
            NodeSpec::new("d", 2e9, 1 << 20, Role::Device),
        ];
        let links = vec![
            LinkState::new("a", "b", RateFn::Constant { bps: 8000.0 }, 0.1),
            LinkState::new("b", "c", RateFn::Constant { bps: 16000.0 }, 0.0),
        ];
        Topology::new(nodes, links, 0).unwrap()
    }

    #[test]
    fn multi_hop_is_store_and_forward() {
        let t = line();
        let d = t
            .transfer_latency(&"a".into(), &"c".into(), 1000, 0.0)
            .unwrap();
        assert!((d - (1.1 + 0.5)).abs() < 1e-12);
        assert_eq!(t.transfer_latency(&"c".into(), &"c".into(), 10, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn disconnected_is_unreachable() {
        let t = line();
        assert!(matches!(
            t.transfer_latency(&"a".into(), &"d".into(), 1, 0.0),
            Err(NetError::Unreachable { .. })
        ));
    }

    #[test]
    fn construction_validates() {
        let dup = vec![
            NodeSpec::new("a", 1.0, 1, Role::Device),
            NodeSpec::new("a", 1.0, 1, Role::Device),
        ];
        assert!(matches!(Topology::new(dup, vec![], 0), Err(NetError::DuplicateNode(_))));
        let nodes = vec![NodeSpec::new("a", 1.0, 1, Role::Device)];
        let links = vec![LinkState::new("a", "zz", RateFn::Constant { bps: 1.0 }, 0.0)];
        assert!(matches!(Topology::new(nodes, links, 0), Err(NetError::UnknownNode(_))));
        let zero = vec![NodeSpec::new("a", 0.0, 1, Role::Device)];
        assert!(Topology::new(zero, vec![], 0).is_err());
    }
}
