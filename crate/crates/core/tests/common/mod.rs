#![allow(dead_code)]

pub mod fedft;

use edgelam::netsim::{LinkState, NodeSpec, RateFn, Role, Topology};

/// A server `srv` and `n` devices `d0..` each on its own constant-rate link.
pub fn star(n: usize, bps: f64) -> Topology {
    let mut nodes = vec![NodeSpec::new("srv", 1e11, 1 << 34, Role::Server)];
    let mut links = Vec::new();
    for k in 0..n {
        let id = format!("d{k}");
        nodes.push(NodeSpec::new(&id, 1e9, 1 << 30, Role::Device));
        links.push(LinkState::new(&id, "srv", RateFn::Constant { bps }, 0.001));
    }
    Topology::new(nodes, links, 0).unwrap()
}

pub fn device_names(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("d{k}")).collect()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let dn = f(&p);
            p[i] = orig;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Random server-plus-devices topology for split planning: mixed constant,
/// stepped and fading links, some devices behind a relay, storage drawn so
/// that a few devices are tight.
pub fn random_tp_topology<R: rand::Rng>(r: &mut R, devices: usize, seed: u64) -> (Topology, Vec<edgelam::netsim::NodeId>) {
    use edgelam::netsim::{random_fading_spec, NodeId};
    let mut nodes = vec![
        NodeSpec::new("srv", r.gen_range(1e8..1e10), 1 << 40, Role::Server),
        NodeSpec::new("relay", 1e9, 1 << 20, Role::Server),
    ];
    let mut links = vec![LinkState::new("srv", "relay", RateFn::Constant { bps: r.gen_range(1e6..1e8) }, 1e-4)];
    let mut ids = Vec::new();
    for i in 0..devices {
        let id = format!("d{i}");
        let storage = if r.gen_bool(0.3) { r.gen_range(200..2_000) } else { 1 << 24 };
        nodes.push(NodeSpec::new(&id, r.gen_range(1e5..1e8), storage, Role::Device));
        let rate = match r.gen_range(0..3) {
            0 => RateFn::Constant { bps: r.gen_range(1e4..1e7) },
            1 => RateFn::Steps {
                segments: vec![(0.0, r.gen_range(1e4..1e7)), (r.gen_range(1e-3..0.1), r.gen_range(1e4..1e7))],
            },
            _ => random_fading_spec(r, 1e4, 1e7).resolve(seed ^ i as u64),
        };
        let peer = if r.gen_bool(0.25) { "relay" } else { "srv" };
        links.push(LinkState::new(&id, peer, rate, r.gen_range(0.0..1e-3)));
        ids.push(NodeId(id));
    }
    (Topology::new(nodes, links, seed).unwrap(), ids)
}

/// Enumerates every way to give `n` columns to the devices (zero meaning
/// unused) and returns the storage-feasible widths with the smallest round
/// latency, ties going to the lexicographically largest width vector.
pub fn brute_force_split(
    task: &edgelam::tparallel::GemmTask,
    topo: &Topology,
    server: &edgelam::netsim::NodeId,
    devs: &[edgelam::netsim::NodeId],
) -> Option<(Vec<usize>, f64)> {
    fn rec(left: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for w in (0..=left).rev() {
            cur.push(w);
            rec(left - w, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut all = Vec::new();
    rec(task.n, devs.len(), &mut Vec::new(), &mut all);
    let mut best: Option<(Vec<usize>, f64)> = None;
    // Enumeration runs in decreasing lexicographic order, so a strict
    // improvement test keeps the lexicographically largest optimum.
    for ws in all {
        let feasible = ws
            .iter()
            .zip(devs)
            .all(|(&w, d)| task.shard_bytes(w) <= topo.node(d).unwrap().storage);
        if !feasible {
            continue;
        }
        let pairs: Vec<_> = devs.iter().cloned().zip(ws.iter().copied()).filter(|p| p.1 > 0).collect();
        let lat = edgelam::tparallel::round_latency(task, topo, server, &pairs, 0.0).unwrap();
        if best.as_ref().is_none_or(|(_, b)| lat < *b) {
            best = Some((ws, lat));
        }
    }
    best
}

/// Random deployment instance: `nodes` hosts with a random spanning tree of
/// constant links plus a few chords, `services` catalog entries, and two
/// flows over them issued from the first host.
pub fn random_deploy_instance<R: rand::Rng>(
    r: &mut R,
    nodes: usize,
    services: usize,
) -> (Topology, edgelam::micro::Catalog, Vec<edgelam::micro::RequestFlow>) {
    use edgelam::micro::{Catalog, Microservice, RequestFlow, ServiceDag, ServiceKind};
    let kinds = [
        ServiceKind::ModalityEncoder,
        ServiceKind::InputProjector,
        ServiceKind::Backbone,
        ServiceKind::OutputProjector,
        ServiceKind::ModalityDecoder,
    ];
    let mut specs = Vec::new();
    let mut links = Vec::new();
    for i in 0..nodes {
        let id = format!("h{i}");
        specs.push(NodeSpec::new(&id, r.gen_range(1e9..2e10), r.gen_range(100..400), Role::Server));
        if i > 0 {
            let peer = format!("h{}", r.gen_range(0..i));
            links.push(LinkState::new(&id, &peer, RateFn::Constant { bps: r.gen_range(1e4..1e6) }, r.gen_range(0.0..0.01)));
        }
    }
    for _ in 0..nodes / 2 {
        let (a, b) = (r.gen_range(0..nodes), r.gen_range(0..nodes));
        if a != b {
            links.push(LinkState::new(&format!("h{a}"), &format!("h{b}"), RateFn::Constant { bps: r.gen_range(1e4..1e6) }, 0.001));
        }
    }
    let topo = Topology::new(specs, links, 0).unwrap();
    let ids: Vec<String> = (0..services).map(|i| format!("s{i}")).collect();
    let catalog = Catalog::new(
        ids.iter()
            .enumerate()
            .map(|(i, id)| Microservice::new(id, r.gen_range(1e8..1e10), r.gen_range(20..150), kinds[i % 5]))
            .collect(),
    )
    .unwrap();
    // Two flows: a chain through every service, and a chain through a
    // random subset that shares the first service.
    let mut flows = Vec::new();
    let all: Vec<&str> = ids.iter().map(String::as_str).collect();
    let chain = |names: &[&str], r: &mut R| -> ServiceDag {
        let edges: Vec<(&str, &str, u64)> = names.windows(2).map(|w| (w[0], w[1], r.gen_range(100..20_000))).collect();
        ServiceDag::new(names, &edges)
    };
    flows.push(RequestFlow { input_bytes: r.gen_range(100..10_000), output_bytes: 100, ..RequestFlow::new("f0", chain(&all, r), "h0") });
    let mut subset = vec![all[0]];
    for s in &all[1..] {
        if r.gen_bool(0.5) {
            subset.push(s);
        }
    }
    flows.push(RequestFlow { input_bytes: r.gen_range(100..10_000), output_bytes: 100, ..RequestFlow::new("f1", chain(&subset, r), "h0") });
    (topo, catalog, flows)
}

pub struct MobilityFixture {
    pub topology: Topology,
    pub catalog: edgelam::micro::Catalog,
    pub flows: Vec<edgelam::micro::RequestFlow>,
    pub plan: edgelam::micro::DeploymentPlan,
    pub access: Vec<edgelam::netsim::NodeId>,
}

/// Three access points, two edge servers and a cloud; a four-service chain
/// initially placed at the cloud.
pub fn mobility_fixture<R: rand::Rng>(r: &mut R) -> MobilityFixture {
    use edgelam::micro::{Catalog, DeploymentPlan, Microservice, RequestFlow, ServiceDag, ServiceKind};
    let mut nodes = vec![
        NodeSpec::new("cloud", 1e11, 1 << 40, Role::Server),
        NodeSpec::new("e0", r.gen_range(1e10..3e10), 60_000_000, Role::Server),
        NodeSpec::new("e1", r.gen_range(1e10..3e10), 60_000_000, Role::Server),
    ];
    let mut links = vec![
        LinkState::new("e0", "cloud", RateFn::Constant { bps: r.gen_range(2e7..5e7) }, 0.02),
        LinkState::new("e1", "cloud", RateFn::Constant { bps: r.gen_range(2e7..5e7) }, 0.02),
        LinkState::new("e0", "e1", RateFn::Constant { bps: r.gen_range(5e7..2e8) }, 0.005),
    ];
    let mut access = Vec::new();
    for i in 0..3 {
        let id = format!("u{i}");
        nodes.push(NodeSpec::new(&id, 1e9, 1_000_000, Role::Device));
        let edge = if i == 0 { "e0" } else if i == 2 { "e1" } else if r.gen_bool(0.5) { "e0" } else { "e1" };
        links.push(LinkState::new(&id, edge, RateFn::Constant { bps: r.gen_range(2e7..1e8) }, 0.002));
        access.push(edgelam::netsim::NodeId(id));
    }
    let topology = Topology::new(nodes, links, 0).unwrap();
    let catalog = Catalog::new(vec![
        Microservice::new("enc", r.gen_range(1e9..4e9), r.gen_range(5_000_000..15_000_000), ServiceKind::ModalityEncoder),
        Microservice::new("proj", r.gen_range(2e8..8e8), r.gen_range(1_000_000..5_000_000), ServiceKind::InputProjector),
        Microservice::new("llm", r.gen_range(1e10..4e10), r.gen_range(20_000_000..40_000_000), ServiceKind::Backbone),
        Microservice::new("dec", r.gen_range(5e8..2e9), r.gen_range(2_000_000..8_000_000), ServiceKind::ModalityDecoder),
    ])
    .unwrap();
    let dag = ServiceDag::new(
        &["enc", "proj", "llm", "dec"],
        &[("enc", "proj", 400_000), ("proj", "llm", 200_000), ("llm", "dec", 200_000)],
    );
    let flows = vec![RequestFlow { input_bytes: 2_000_000, output_bytes: 500_000, ..RequestFlow::new("vqa", dag, "u0") }];
    let plan = DeploymentPlan::from_pairs(&[("enc", "cloud"), ("proj", "cloud"), ("llm", "cloud"), ("dec", "cloud")]);
    MobilityFixture { topology, catalog, flows, plan, access }
}

/// A random small predictor of `kind` with every parameter nonzero (adapter
/// `B` factors included) and a batch of matching random windows.
pub fn random_predictor<R: rand::Rng>(
    r: &mut R,
    kind: edgelam::chanpred::PredictorKind,
) -> (edgelam::chanpred::Predictor, Vec<edgelam::chanpred::Window>) {
    use edgelam::chanpred::{Predictor, PredictorSpec, Window};
    let hidden = r.gen_range(1..=6);
    let spec = PredictorSpec {
        kind,
        window: r.gen_range(1..=5),
        horizon: r.gen_range(1..=3),
        hidden,
        lora_rank: r.gen_range(1..=hidden),
        freeze_base: r.gen_bool(0.5),
    };
    let mut p = Predictor::init(&spec, r.gen()).unwrap();
    for v in &mut p.params {
        *v = r.gen_range(-0.8..0.8);
    }
    let batch = (0..r.gen_range(1..=3))
        .map(|_| Window {
            x: (0..2 * spec.window).map(|_| r.gen_range(-1.5..1.5)).collect(),
            y: (0..2 * spec.horizon).map(|_| r.gen_range(-1.5..1.5)).collect(),
        })
        .collect();
    (p, batch)
}

/// Analytic-vs-central-difference relative error of a predictor's loss
/// gradient over all parameters.
pub fn predictor_grad_err(p: &edgelam::chanpred::Predictor, batch: &[edgelam::chanpred::Window]) -> f64 {
    let (_, g) = p.loss_and_grad(batch).unwrap();
    let mut q = p.clone();
    let fd = central_diff(&p.params, 1e-6, |x| {
        q.params.copy_from_slice(x);
        q.loss(batch).unwrap()
    });
    rel_err(&g, &fd, 1e-8)
}
