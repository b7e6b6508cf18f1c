//! Subcommand runners. Each returns its artifacts in memory; nothing here
//! touches the filesystem.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{DeployMethod, MicroConfig, Scenario};
use super::{resolve_out_dir, write_artifacts, AppError, Artifact};
use crate::chanpred::run_case_study;
use crate::fedft::run_fedft;
use crate::micro::{
    deploy_bruteforce, deploy_greedy, random_walk, robust_orchestrate, run_mobility_trace, validate_flow_dag, Catalog,
    Deployment, DeploymentPlan, MigrationContext, MobilityTrace, RequestFlow, VirtualQueue,
};
use crate::netsim::{write_trace_csv, Topology, TraceRecord};
use crate::rng;
use crate::tparallel::{
    encode_forward, execute_split, looped_forward, plan_split_with, DeviceRows, ExecRecord, GemmTask, LoopSpec,
    SplitPlan,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Fedft,
    Tparallel,
    MicroDeploy,
    MicroOrchestrate,
    MicroMigrate,
    Chanpred,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Fedft,
        Command::Tparallel,
        Command::MicroDeploy,
        Command::MicroOrchestrate,
        Command::MicroMigrate,
        Command::Chanpred,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Fedft => "fedft",
            Command::Tparallel => "tparallel",
            Command::MicroDeploy => "micro-deploy",
            Command::MicroOrchestrate => "micro-orchestrate",
            Command::MicroMigrate => "micro-migrate",
            Command::Chanpred => "chanpred",
        }
    }

    /// Whether the scenario carries the sections this command reads.
    pub fn applies_to(self, sc: &Scenario) -> bool {
        match self {
            Command::Fedft => sc.fedft.is_some(),
            Command::Tparallel => sc.tparallel.is_some(),
            Command::MicroDeploy => sc.micro.is_some(),
            Command::MicroOrchestrate => sc.micro.as_ref().is_some_and(|m| m.orchestrate.is_some()),
            Command::MicroMigrate => sc.micro.as_ref().is_some_and(|m| m.migrate.is_some()),
            Command::Chanpred => sc.chanpred.is_some(),
        }
    }
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>, AppError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| AppError::Io { path: "csv".into(), message: e.to_string() })?;
    }
    w.into_inner().map_err(|e| AppError::Io { path: "csv".into(), message: e.to_string() })
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>, AppError> {
    let mut b = serde_json::to_vec_pretty(v).map_err(|e| AppError::Io { path: "json".into(), message: e.to_string() })?;
    b.push(b'\n');
    Ok(b)
}

fn trace_bytes(records: &[TraceRecord]) -> Result<Vec<u8>, AppError> {
    let mut out = Vec::new();
    write_trace_csv(records, &mut out).map_err(|e| AppError::Io { path: "trace".into(), message: e.to_string() })?;
    Ok(out)
}

fn topology(sc: &Scenario) -> Result<Topology, AppError> {
    let cfg = sc.topology.as_ref().ok_or(AppError::MissingSection("topology"))?;
    Ok(Topology::from_config(cfg, sc.seed)?)
}

/// Runs one subcommand; the manifest is the last artifact.
pub fn run_command(cmd: Command, sc: &Scenario) -> Result<Vec<Artifact>, AppError> {
    let mut out = match cmd {
        Command::Fedft => run_fedft_cmd(sc)?,
        Command::Tparallel => run_tparallel(sc)?,
        Command::MicroDeploy => run_deploy(sc)?,
        Command::MicroOrchestrate => run_orchestrate(sc)?,
        Command::MicroMigrate => run_migrate(sc)?,
        Command::Chanpred => run_chanpred(sc)?,
    };
    out.push(Artifact::new("manifest.toml", sc.to_toml()?.into_bytes()));
    Ok(out)
}

#[derive(Serialize)]
struct LossLine {
    round: usize,
    loss: f64,
    epsilon: f64,
}

#[derive(Serialize)]
struct PhaseLine<'a> {
    round: usize,
    device: &'a str,
    phase: &'static str,
    bytes: u64,
    start_s: f64,
    latency_s: f64,
}

fn run_fedft_cmd(sc: &Scenario) -> Result<Vec<Artifact>, AppError> {
    let cfg = sc.fedft.as_ref().ok_or(AppError::MissingSection("fedft"))?;
    let topo = topology(sc)?;
    cfg.validate(&topo)?;
    let report = run_fedft(cfg, &topo, sc.seed)?;
    let loss = csv_bytes(report.rounds.iter().map(|r| LossLine { round: r.round, loss: r.loss, epsilon: r.epsilon }))?;
    let phases = report.traces.iter().flat_map(|t| {
        t.phases.iter().map(move |p| PhaseLine {
            round: t.round,
            device: p.device.as_ref().map_or("", |d| d.0.as_str()),
            phase: p.phase.as_str(),
            bytes: p.bytes,
            start_s: p.start_s,
            latency_s: p.latency_s,
        })
    });
    let trace = csv_bytes(phases)?;
    Ok(vec![
        Artifact::new("fedft_loss.csv", loss),
        Artifact::new("fedft_trace.csv", trace),
        Artifact::new("fedft_summary.json", json_bytes(&report)?),
    ])
}

#[derive(Serialize)]
struct TparallelSummary<'a> {
    plan: &'a SplitPlan,
    path: &'static str,
    depth: usize,
    executed_latency_s: f64,
    param_bytes: u64,
    max_abs_err: f64,
    rel_frobenius_err: f64,
}

#[derive(Serialize)]
struct ExecLine<'a> {
    depth: usize,
    phase: &'a str,
    device: &'a str,
    bytes: u64,
    start_s: f64,
    latency_s: f64,
    max_abs_err: f64,
}

impl<'a> ExecLine<'a> {
    fn new(r: &'a ExecRecord, max_abs_err: f64) -> Self {
        Self {
            depth: r.depth,
            phase: &r.phase,
            device: &r.device.0,
            bytes: r.bytes,
            start_s: r.start_s,
            latency_s: r.latency_s,
            max_abs_err,
        }
    }
}

/// Contiguous near-equal row blocks, one per device in order.
fn split_rows(x: &DMatrix<f64>, devices: &[crate::netsim::NodeId]) -> Vec<DeviceRows> {
    let (m, d) = (x.nrows(), devices.len());
    let mut row0 = 0;
    devices
        .iter()
        .enumerate()
        .map(|(i, dev)| {
            let mk = m / d + usize::from(i < m % d);
            let rows = DeviceRows { device: dev.clone(), x: x.rows(row0, mk).into_owned() };
            row0 += mk;
            rows
        })
        .collect()
}

fn run_tparallel(sc: &Scenario) -> Result<Vec<Artifact>, AppError> {
    let cfg = sc.tparallel.as_ref().ok_or(AppError::MissingSection("tparallel"))?;
    let topo = topology(sc)?;
    let task = GemmTask::new(cfg.m, cfg.k, cfg.n)?;
    let plan = plan_split_with(&task, &topo, &cfg.server, &cfg.devices, cfg.mode, cfg.t0_s)?;
    let mut r = rng::rng(sc.seed, &[rng::tag("tparallel")]);
    let x = DMatrix::from_fn(cfg.m, cfg.k, |_, _| r.gen_range(-1.0..1.0));
    let w = DMatrix::from_fn(cfg.k, cfg.n, |_, _| r.gen_range(-1.0..1.0));
    let mut reference = x.clone();
    for _ in 0..cfg.depth.max(1) {
        reference = cfg.activation.apply(&(&reference * &w));
    }
    let mut devices = cfg.devices.clone();
    devices.sort();
    devices.dedup();
    let (path, output, latency_s, records) = if cfg.depth <= 1 && cfg.activation == Default::default() {
        let ex = execute_split(&plan, &topo, &w, &x, cfg.t0_s)?;
        ("split", ex.output, ex.latency_s, ex.records)
    } else if cfg.depth <= 1 {
        let ex = encode_forward(&plan, &topo, &split_rows(&x, &devices), &w, cfg.activation, cfg.t0_s)?;
        ("encode", ex.output, ex.latency_s, ex.records)
    } else {
        let spec = LoopSpec { depth: cfg.depth, shared_block: w.clone(), activation: cfg.activation };
        let ex = looped_forward(&spec, &plan, &topo, &split_rows(&x, &devices), cfg.t0_s)?;
        ("looped", ex.output, ex.latency_s, ex.records)
    };
    let diff = &output - &reference;
    let max_abs_err = diff.amax();
    let denom = reference.norm();
    let summary = TparallelSummary {
        plan: &plan,
        path,
        depth: cfg.depth,
        executed_latency_s: latency_s,
        param_bytes: plan.param_bytes(),
        max_abs_err,
        rel_frobenius_err: if denom > 0.0 { diff.norm() / denom } else { diff.norm() },
    };
    let exec = csv_bytes(records.iter().map(|r| ExecLine::new(r, max_abs_err)))?;
    let events: Vec<TraceRecord> = records
        .iter()
        .map(|rec| {
            TraceRecord::new(
                rec.start_s,
                rec.phase.clone(),
                serde_json::json!({ "depth": rec.depth, "device": rec.device, "bytes": rec.bytes, "latency_s": rec.latency_s }),
            )
        })
        .collect();
    Ok(vec![
        Artifact::new("tparallel_plan.json", json_bytes(&summary)?),
        Artifact::new("tparallel_exec.csv", exec),
        Artifact::new("tparallel_trace.csv", trace_bytes(&events)?),
    ])
}

struct MicroInputs<'a> {
    cfg: &'a MicroConfig,
    catalog: Catalog,
    topology: Topology,
}

fn micro_inputs(sc: &Scenario) -> Result<MicroInputs<'_>, AppError> {
    let cfg = sc.micro.as_ref().ok_or(AppError::MissingSection("micro"))?;
    let topology = topology(sc)?;
    let catalog = Catalog::new(cfg.services.clone())?;
    Ok(MicroInputs { cfg, catalog, topology })
}

fn explicit_plan(cfg: &MicroConfig) -> Option<DeploymentPlan> {
    if cfg.plan.is_empty() {
        return None;
    }
    let mut plan = DeploymentPlan::default();
    for (svc, nodes) in &cfg.plan {
        for n in nodes {
            plan.place(svc, n);
        }
    }
    Some(plan)
}

#[derive(Serialize)]
struct DeployReport {
    greedy: Option<Deployment>,
    bruteforce: Option<Deployment>,
    /// Greedy mean latency over the exhaustive optimum.
    greedy_ratio: Option<f64>,
}

fn run_deploy(sc: &Scenario) -> Result<Vec<Artifact>, AppError> {
    let m = micro_inputs(sc)?;
    let flows: &[RequestFlow] = &m.cfg.flows;
    let greedy = match m.cfg.deploy {
        DeployMethod::Greedy | DeployMethod::Both => Some(deploy_greedy(&m.catalog, flows, &m.topology)?),
        DeployMethod::Bruteforce => None,
    };
    let bruteforce = match m.cfg.deploy {
        DeployMethod::Bruteforce | DeployMethod::Both => Some(deploy_bruteforce(&m.catalog, flows, &m.topology)?),
        DeployMethod::Greedy => None,
    };
    let greedy_ratio = match (&greedy, &bruteforce) {
        (Some(g), Some(b)) if b.mean_latency_s > 0.0 => Some(g.mean_latency_s / b.mean_latency_s),
        _ => None,
    };
    let report = DeployReport { greedy, bruteforce, greedy_ratio };
    Ok(vec![Artifact::new("deploy.json", json_bytes(&report)?)])
}

fn run_orchestrate(sc: &Scenario) -> Result<Vec<Artifact>, AppError> {
    let m = micro_inputs(sc)?;
    let section = m.cfg.orchestrate.as_ref().ok_or(AppError::MissingSection("micro.orchestrate"))?;
    let plan = explicit_plan(m.cfg).ok_or(AppError::MissingSection("micro.plan"))?;
    plan.check_memory(&m.catalog, &m.topology)?;
    let report = robust_orchestrate(
        &plan,
        &m.catalog,
        &m.cfg.flows,
        &m.topology,
        &section.adversaries,
        &section.policies,
        &section.config(),
    )?;
    Ok(vec![Artifact::new("orchestrate.json", json_bytes(&report)?)])
}

#[derive(Serialize)]
struct MigrateSummary<'a> {
    avg_cost: f64,
    budget: f64,
    v: f64,
    avg_latency_s: f64,
    latency_var: f64,
    deadline_miss: Option<f64>,
    migrations: usize,
    max_candidate_cost: f64,
    initial_plan: &'a DeploymentPlan,
    final_plan: &'a DeploymentPlan,
}

fn run_migrate(sc: &Scenario) -> Result<Vec<Artifact>, AppError> {
    let m = micro_inputs(sc)?;
    let mig = m.cfg.migrate.as_ref().ok_or(AppError::MissingSection("micro.migrate"))?;
    let initial = match explicit_plan(m.cfg) {
        Some(p) => p,
        None => deploy_greedy(&m.catalog, &m.cfg.flows, &m.topology)?.plan,
    };
    if mig.access.is_empty() {
        return Err(crate::micro::MicroError::InvalidConfig("micro.migrate.access is empty".into()).into());
    }
    let queue = VirtualQueue::new(mig.budget, mig.v)?;
    let path = random_walk(&mig.access, mig.start, mig.slots, mig.stay, rng::derive_seed(sc.seed, &[rng::tag("mobility")]));
    let ctx = MigrationContext {
        catalog: &m.catalog,
        flows: &m.cfg.flows,
        topology: &m.topology,
        handoff_s: mig.handoff_s,
        slot_s: mig.slot_s,
    };
    let trace: MobilityTrace = run_mobility_trace(&ctx, &initial, &path, queue, mig.deadline_s)?;
    let summary = MigrateSummary {
        avg_cost: trace.avg_cost,
        budget: mig.budget,
        v: mig.v,
        avg_latency_s: trace.avg_latency_s,
        latency_var: trace.latency_var,
        deadline_miss: trace.deadline_miss,
        migrations: trace.migrations,
        max_candidate_cost: trace.max_candidate_cost,
        initial_plan: &initial,
        final_plan: &trace.final_plan,
    };
    Ok(vec![
        Artifact::new("migrate.csv", csv_bytes(&trace.records)?),
        Artifact::new("migrate_summary.json", json_bytes(&summary)?),
    ])
}

fn run_chanpred(sc: &Scenario) -> Result<Vec<Artifact>, AppError> {
    let cfg = sc.chanpred.as_ref().ok_or(AppError::MissingSection("chanpred"))?;
    let report = run_case_study(cfg, sc.seed)?;
    Ok(vec![
        Artifact::new("fedcp_loss.csv", csv_bytes(&report.rows)?),
        Artifact::new("fedcp_summary.json", json_bytes(&report.summaries)?),
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub section: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub issues: Vec<Issue>,
}

impl VerifyReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    fn check<T>(&mut self, section: &str, r: Result<T, impl Into<AppError>>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                let e = e.into();
                self.issues.push(Issue { section: section.into(), kind: e.kind(), message: e.to_string() });
                None
            }
        }
    }
}

/// Dry-run validation of every section, collecting every problem found.
pub fn verify(sc: &Scenario) -> VerifyReport {
    let mut rep = VerifyReport::default();
    let needs_topology = sc.fedft.is_some() || sc.tparallel.is_some() || sc.micro.is_some();
    let topo = match &sc.topology {
        Some(_) => rep.check("topology", topology(sc)),
        None if needs_topology => rep.check("topology", Err::<(), _>(AppError::MissingSection("topology"))).and(None),
        None => None,
    };
    if let (Some(cfg), Some(t)) = (&sc.fedft, &topo) {
        rep.check("fedft", cfg.validate(t));
    }
    if let Some(cfg) = &sc.tparallel {
        if let Some(task) = rep.check("tparallel", GemmTask::new(cfg.m, cfg.k, cfg.n)) {
            if cfg.depth > 1 && cfg.k != cfg.n {
                rep.check(
                    "tparallel",
                    Err::<(), _>(crate::tparallel::TpError::NonSquareBlock { rows: cfg.k, cols: cfg.n }),
                );
            }
            if cfg.depth == 0 {
                rep.check("tparallel", Err::<(), _>(crate::tparallel::TpError::InvalidPlan("depth must be at least 1".into())));
            }
            if let Some(t) = &topo {
                if let Some(plan) =
                    rep.check("tparallel", plan_split_with(&task, t, &cfg.server, &cfg.devices, cfg.mode, cfg.t0_s))
                {
                    rep.check("tparallel", plan.validate(t));
                }
            }
        }
    }
    if let Some(cfg) = &sc.micro {
        verify_micro(&mut rep, cfg, topo.as_ref());
    }
    if let Some(cfg) = &sc.chanpred {
        rep.check("chanpred", cfg.validate());
    }
    rep
}

fn verify_micro(rep: &mut VerifyReport, cfg: &MicroConfig, topo: Option<&Topology>) {
    let catalog = rep.check("micro", Catalog::new(cfg.services.clone()));
    let mut dags_ok = true;
    for f in &cfg.flows {
        dags_ok &= rep.check("micro", validate_flow_dag(&f.id, &f.dag)).is_some();
        if let Some(c) = &catalog {
            for s in &f.dag.nodes {
                dags_ok &= rep.check("micro", c.get(s)).is_some();
            }
        }
        if let Some(t) = topo {
            rep.check("micro", t.node(&f.source));
        }
    }
    let (Some(catalog), Some(t)) = (catalog, topo) else { return };
    let plan = explicit_plan(cfg);
    if dags_ok {
        match &plan {
            Some(p) => {
                for n in p.placement.values().flatten() {
                    rep.check("micro.plan", t.node(n));
                }
                rep.check("micro.plan", p.check_memory(&catalog, t));
            }
            None => {
                rep.check("micro", deploy_greedy(&catalog, &cfg.flows, t));
            }
        }
    }
    if let Some(o) = &cfg.orchestrate {
        match &plan {
            None => {
                rep.check("micro.orchestrate", Err::<(), _>(AppError::MissingSection("micro.plan")));
            }
            Some(p) if dags_ok => {
                rep.check(
                    "micro.orchestrate",
                    robust_orchestrate(p, &catalog, &cfg.flows, t, &o.adversaries, &o.policies, &o.config()),
                );
            }
            Some(_) => {}
        }
    }
    if let Some(m) = &cfg.migrate {
        rep.check("micro.migrate", VirtualQueue::new(m.budget, m.v));
        if m.access.is_empty() {
            rep.check(
                "micro.migrate",
                Err::<(), _>(crate::micro::MicroError::InvalidConfig("access list is empty".into())),
            );
        }
        for n in &m.access {
            rep.check("micro.migrate", t.node(n));
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepEntry {
    pub seed: u64,
    pub command: &'static str,
    pub dir: PathBuf,
    pub files: Vec<String>,
}

/// Every applicable subcommand for each seed, fanned out over a worker pool
/// of `jobs` threads (0 for the rayon default). Runs are isolated: each
/// writes to `<root>/seed-<s>/<command>/`.
pub fn run_sweep(sc: &Scenario, seeds: &[u64], root: &Path, jobs: usize) -> Result<Vec<SweepEntry>, AppError> {
    let cmds: Vec<Command> = Command::ALL.into_iter().filter(|c| c.applies_to(sc)).collect();
    let pairs: Vec<(u64, Command)> = seeds.iter().flat_map(|&s| cmds.iter().map(move |&c| (s, c))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| AppError::Io { path: "thread pool".into(), message: e.to_string() })?;
    pool.install(|| {
        pairs
            .par_iter()
            .map(|&(seed, cmd)| {
                let run = Scenario { seed, ..sc.clone() };
                let artifacts = run_command(cmd, &run)?;
                let dir = root.join(format!("seed-{seed}")).join(cmd.name());
                write_artifacts(&dir, &artifacts)?;
                Ok(SweepEntry { seed, command: cmd.name(), dir, files: artifacts.into_iter().map(|a| a.name).collect() })
            })
            .collect()
    })
}

/// Output directory for a sweep or single run; see [`resolve_out_dir`].
pub fn out_dir(cli: Option<&Path>, sc: &Scenario) -> PathBuf {
    resolve_out_dir(cli, std::env::var(super::OUT_ENV).ok().as_deref(), sc)
}
