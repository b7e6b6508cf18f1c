//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `cargo test --test acceptance -- 3 7` runs a subset.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command as Proc, ExitCode};
use std::time::Instant;

use common::fedft::{batches, federated_loss, protocol_grads, renyi_quadrature};
use common::{
    brute_force_split, central_diff, mobility_fixture, predictor_grad_err, random_deploy_instance, random_predictor,
    random_tp_topology, rel_err, star,
};
use edgelam::chanpred::*;
use edgelam::fedft::*;
use edgelam::micro::*;
use edgelam::netsim::{LinkState, NodeId, NodeSpec, RateFn, Role, Topology};
use edgelam::rng;
use edgelam::tparallel::*;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn federated_channel_prediction() -> Outcome {
    let start = Instant::now();
    let cfg = ChanpredConfig {
        models: vec![PredictorKind::LinearAr, PredictorKind::GruCell, PredictorKind::AttnLora],
        ..ChanpredConfig::default()
    };
    let seeds = 0..10u64;
    let reports: Vec<CaseStudyReport> = seeds.clone().map(|s| run_case_study(&cfg, s).unwrap()).collect();
    let elapsed = start.elapsed().as_secs_f64();

    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for &kind in &cfg.models {
        let mut means = Vec::new();
        for &n in &cfg.clients {
            let sums: Vec<&CaseSummary> = reports
                .iter()
                .map(|r| r.summaries.iter().find(|s| s.model == kind && s.num_clients == n).unwrap())
                .collect();
            let wins = sums.iter().filter(|s| s.federated_loss < s.local_median).count();
            if wins < 8 {
                failures.push(format!("{} n={n}: {wins}/10 wins", kind.name()));
            }
            means.push(sums.iter().map(|s| s.federated_loss).sum::<f64>() / sums.len() as f64);
            lines.push(format!("{}@{n} {wins}/10", kind.name()));
        }
        let (first, second) = (means[0], means[1]);
        if second > first {
            failures.push(format!("{}: mean loss rises {first:.5} -> {second:.5}", kind.name()));
        }
        lines.push(format!(
            "{} mean {}",
            kind.name(),
            means.iter().map(|m| format!("{m:.5}")).collect::<Vec<_>>().join("->")
        ));
    }
    if elapsed > 600.0 {
        failures.push(format!("took {elapsed:.0}s"));
    }
    if failures.is_empty() {
        Ok(format!("{}; {elapsed:.0}s", lines.join(", ")))
    } else {
        Err(failures.join("; "))
    }
}

// ---------------------------------------------------------------- 2

fn adapter_budget() -> Outcome {
    let cfg = FedftConfig::new("srv", &["d0"]);
    let p = partition_model(&vec![cfg.d_model; cfg.layers], cfg.vocab, cfg.classes, 0).unwrap();
    let rank = match cfg.rank {
        Some(r) => r,
        None => budget_rank(&p, cfg.lora_budget).map_err(|e| e.to_string())?,
    };
    let a = attach_lora(&p, rank, rank as f64, 0).unwrap();
    // Independent count: one d×d frozen matrix and one (r×d, d×r) pair per layer.
    let decoder = cfg.layers * cfg.d_model * cfg.d_model;
    let adapter = cfg.layers * 2 * cfg.d_model * rank;
    ensure(p.decoder_param_count() == decoder, || format!("decoder {} vs {decoder}", p.decoder_param_count()))?;
    ensure(a.param_count() == adapter, || format!("adapters {} vs {adapter}", a.param_count()))?;
    ensure(rank >= 1, || "rank 0".into())?;
    ensure(20 * adapter <= decoder, || format!("{adapter} / {decoder} exceeds 5%"))?;
    let rep = run_fedft(&FedftConfig { rounds: 1, ..cfg.clone() }, &star(1, 1e7), 0).unwrap();
    ensure(rep.adapter_params == adapter && rep.decoder_params == decoder, || "report disagrees".into())?;
    Ok(format!(
        "rank {rank}: {adapter} adapter / {decoder} decoder params = {:.2}%",
        100.0 * adapter as f64 / decoder as f64
    ))
}

// ---------------------------------------------------------------- 3

fn gradient_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng::rng(303, &[]);
    let mut worst_fed: f64 = 0.0;
    for case in 0..100u64 {
        let d = r.gen_range(2..=16);
        let rank = r.gen_range(1..=d.min(4));
        let layers = r.gen_range(1..=3);
        let k = r.gen_range(1..=3);
        let topo = star(k, 1e6);
        let p = partition_model(&vec![d; layers], 10, 3, case).unwrap();
        let mut a = attach_lora(&p, rank, r.gen_range(0.5..4.0), case).unwrap();
        for l in &mut a.layers {
            l.b = DMatrix::from_fn(d, rank, |_, _| r.gen_range(-0.5..0.5));
        }
        let task = SyntheticTask::new(&p, 3, case);
        let names: Vec<String> = (0..k).map(|i| format!("d{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let bs = batches(&task, &p, &refs, 3, case);
        let heads = vec![p.task_head.clone(); k];
        let (g, _, _) = protocol_grads(&p, &a, &heads, &bs, &topo);
        let fd = central_diff(&a.to_flat(), 1e-5, |v| {
            let mut t = a.clone();
            t.set_flat(v);
            federated_loss(&p, &t, &heads, &bs)
        });
        worst_fed = worst_fed.max(rel_err(&g.to_flat(), &fd, 1e-12));
    }
    let mut parts = vec![format!("split lora {worst_fed:.1e}")];
    let mut worst_all = worst_fed;
    for kind in PredictorKind::ALL {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (p, batch) = random_predictor(&mut r, kind);
            worst = worst.max(predictor_grad_err(&p, &batch));
        }
        worst_all = worst_all.max(worst);
        parts.push(format!("{} {worst:.1e}", kind.name()));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst_all <= 1e-4, || format!("max rel err {worst_all:.2e}: {}", parts.join(", ")))?;
    ensure(secs <= 60.0, || format!("took {secs:.0}s"))?;
    Ok(format!("100 instances each, max rel err: {}; {secs:.1}s", parts.join(", ")))
}

// ---------------------------------------------------------------- 4

fn privacy_accounting() -> Outcome {
    let mut worst: f64 = 0.0;
    for sigma in [0.5, 1.0, 2.0] {
        for alpha in [2.0, 4.0, 8.0] {
            let spec = PrivacySpec::new(1.0, sigma, 1e-5);
            let closed = alpha / (2.0 * sigma * sigma);
            let lib = spec.rdp_per_round(alpha, 1.0);
            let numeric = renyi_quadrature(alpha, 1.0, sigma);
            worst = worst.max((lib - numeric).abs()).max((lib - closed).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("rdp off by {worst:.2e}"))?;
    let sigmas = [0.5, 0.8, 1.0, 2.0, 4.0];
    let rounds = [1u64, 2, 5, 10, 100];
    let eps = |s: f64, t: u64| rdp_epsilon(&PrivacySpec::new(1.0, s, 1e-5), 1.0, t).unwrap().0;
    for &t in &rounds {
        let e: Vec<f64> = sigmas.iter().map(|&s| eps(s, t)).collect();
        ensure(e.windows(2).all(|w| w[1] < w[0]), || format!("not decreasing in sigma at T={t}: {e:?}"))?;
    }
    for &s in &sigmas {
        let e: Vec<f64> = rounds.iter().map(|&t| eps(s, t)).collect();
        ensure(e.windows(2).all(|w| w[1] > w[0]), || format!("not increasing in T at sigma={s}: {e:?}"))?;
    }
    Ok(format!("9 (sigma, alpha) pairs within {worst:.1e}; 5x5 grid monotone"))
}

// ---------------------------------------------------------------- 5

fn wide_star(devices: usize) -> (Topology, Vec<NodeId>) {
    let mut nodes = vec![NodeSpec::new("srv", 1e10, 1 << 40, Role::Server)];
    let mut links = Vec::new();
    let mut ids = Vec::new();
    for i in 0..devices {
        let id = format!("d{i}");
        nodes.push(NodeSpec::new(&id, 1e8, 1 << 30, Role::Device));
        links.push(LinkState::new("srv", &id, RateFn::Constant { bps: 1e6 }, 5e-4));
        ids.push(NodeId(id));
    }
    (Topology::new(nodes, links, 0).unwrap(), ids)
}

fn tensor_parallel() -> Outcome {
    let mut r = rng::rng(505, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (m, k, n) = (r.gen_range(1..12), r.gen_range(1..12), r.gen_range(1..16));
        let devices = r.gen_range(1..=n.min(5));
        let (t, ids) = wide_star(devices);
        let mut cuts: Vec<usize> = rand::seq::index::sample(&mut r, n - 1, devices - 1).into_iter().map(|c| c + 1).collect();
        cuts.sort_unstable();
        cuts.push(n);
        let mut prev = 0;
        let mut assignments = Vec::new();
        for (d, &c) in ids.iter().zip(&cuts) {
            assignments.push(Slice { device: d.clone(), offset: prev, width: c - prev });
            prev = c;
        }
        let plan = SplitPlan {
            task: GemmTask::new(m, k, n).unwrap(),
            server: "srv".into(),
            assignments,
            predicted_latency_s: 0.0,
            mode: PlanMode::Exact,
        };
        let w = DMatrix::from_fn(k, n, |_, _| r.gen_range(-1.0..1.0));
        let x = DMatrix::from_fn(m, k, |_, _| r.gen_range(-1.0..1.0));
        let out = execute_split(&plan, &t, &w, &x, 0.0).unwrap();
        let want = &x * &w;
        worst = worst.max((&out.output - &want).norm() / want.norm().max(1e-300));
    }
    ensure(worst <= 1e-10, || format!("split GEMM rel err {worst:.2e}"))?;

    let mut checked = 0;
    let mut infeasible = 0;
    let mut attempt = 0u64;
    while checked < 50 {
        attempt += 1;
        let d = r.gen_range(1..=4);
        let (t, ids) = random_tp_topology(&mut r, d, attempt);
        let task = GemmTask::new(r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=16)).unwrap();
        match (plan_split(&task, &t, &"srv".into(), &ids), brute_force_split(&task, &t, &"srv".into(), &ids)) {
            (Ok(p), Some((_, lat))) => {
                p.validate(&t).map_err(|e| e.to_string())?;
                ensure(p.predicted_latency_s == lat, || {
                    format!("planner {} vs exhaustive {lat} on attempt {attempt}", p.predicted_latency_s)
                })?;
                checked += 1;
            }
            (Err(TpError::InfeasibleStorage { .. }), None) => infeasible += 1,
            (p, b) => return Err(format!("planner {p:?} vs exhaustive {b:?}")),
        }
    }
    Ok(format!(
        "200 splits max rel err {worst:.1e}; planner equals exhaustive search on 50 topologies ({infeasible} infeasible agreed)"
    ))
}

// ---------------------------------------------------------------- 6

fn microservice_deployment() -> Outcome {
    let mut r = rng::rng(606, &[]);
    let mut ratios = Vec::new();
    let mut singles = 0;
    let mut i = 0usize;
    while ratios.len() < 50 {
        let nodes = if i.is_multiple_of(5) { 1 } else { r.gen_range(2..=8) };
        i += 1;
        let services = r.gen_range(2..=5);
        let (topo, catalog, flows) = random_deploy_instance(&mut r, nodes, services);
        let (Ok(bf), Ok(gr)) = (deploy_bruteforce(&catalog, &flows, &topo), deploy_greedy(&catalog, &flows, &topo)) else {
            continue;
        };
        ensure(gr.mean_latency_s >= bf.mean_latency_s, || {
            format!("greedy {} below optimum {}", gr.mean_latency_s, bf.mean_latency_s)
        })?;
        if nodes == 1 {
            ensure(gr.mean_latency_s == bf.mean_latency_s, || "single-node instance differs".into())?;
            singles += 1;
        }
        ratios.push(gr.mean_latency_s / bf.mean_latency_s);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let max = ratios.iter().cloned().fold(1.0, f64::max);
    Ok(format!("50 instances ({singles} single-node); greedy/optimal mean {mean:.4}, max {max:.4}"))
}

// ---------------------------------------------------------------- 7

fn migration() -> Outcome {
    let start = Instant::now();
    let budget = 0.05;
    let vs = [1.0, 10.0, 100.0];
    let mut gaps_all = Vec::new();
    for seed in 0..20u64 {
        let mut r = rng::rng(700 + seed, &[]);
        let fx = mobility_fixture(&mut r);
        let ctx = MigrationContext { catalog: &fx.catalog, flows: &fx.flows, topology: &fx.topology, handoff_s: 0.5, slot_s: 1.0 };
        let path = random_walk(&fx.access, 0, 2000, 0.8, seed);
        let traces: Vec<MobilityTrace> = vs
            .iter()
            .map(|&v| run_mobility_trace(&ctx, &fx.plan, &path, VirtualQueue::new(budget, v).unwrap(), None).unwrap())
            .collect();
        for tr in &traces {
            let mut q = 0.0;
            for rec in &tr.records {
                q = f64::max(q + rec.cost - budget, 0.0);
                ensure(rec.q == q, || format!("seed {seed}: queue {} vs {q}", rec.q))?;
            }
        }
        let c = traces.iter().map(|t| t.max_candidate_cost).fold(0.0, f64::max);
        let gaps: Vec<f64> = vs.iter().zip(&traces).map(|(v, t)| budget + c / v - t.avg_cost).collect();
        ensure(gaps.iter().all(|&g| g >= 0.0), || format!("seed {seed}: cost above bound, gaps {gaps:?}"))?;
        ensure(gaps.windows(2).all(|w| w[1] < w[0]), || format!("seed {seed}: gaps not decreasing {gaps:?}"))?;
        gaps_all.push(gaps);
    }

    let mut r = rng::rng(41, &[]);
    let fx = mobility_fixture(&mut r);
    let ctx = MigrationContext { catalog: &fx.catalog, flows: &fx.flows, topology: &fx.topology, handoff_s: 1000.0, slot_s: 1.0 };
    let path: Vec<NodeId> = (0..400).map(|t| fx.access[if t % 2 == 0 { 0 } else { 2 }].clone()).collect();
    let tr = run_mobility_trace(&ctx, &fx.plan, &path, VirtualQueue::new(0.01, 10.0).unwrap(), None).unwrap();
    ensure(tr.migrations > 0, || "oscillating user never migrated".into())?;
    let late = tr.records[300..].iter().filter(|r| r.action != "stay").count();
    ensure(late == 0, || format!("{late} migrations in the last 100 slots"))?;

    let secs = start.elapsed().as_secs_f64();
    ensure(secs <= 60.0, || format!("took {secs:.0}s"))?;
    let mean = |i: usize| gaps_all.iter().map(|g| g[i]).sum::<f64>() / gaps_all.len() as f64;
    Ok(format!(
        "queue law on 60 traces; mean bound gap V=1/10/100: {:.4}/{:.4}/{:.4}; oscillating user settles after {} migrations; {secs:.1}s",
        mean(0),
        mean(1),
        mean(2),
        tr.migrations
    ))
}

// ---------------------------------------------------------------- 8

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn reproducible_cli() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_edgelam");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml");
    let tmp = tempfile::tempdir().unwrap();
    let subs = ["fedft", "tparallel", "micro-deploy", "micro-orchestrate", "micro-migrate", "chanpred"];
    let mut files = 0;
    for sub in subs {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{sub}-{rep}"));
            let st = Proc::new(exe)
                .args([sub, "--config"])
                .arg(&config)
                .args(["--seed", "7", "--out"])
                .arg(&out)
                .env_remove("EDGELAM_OUT")
                .output()
                .unwrap();
            ensure(st.status.success(), || format!("{sub}: {}", String::from_utf8_lossy(&st.stderr)))?;
            runs.push(read_dir(&out));
        }
        ensure(runs[0] == runs[1], || format!("{sub}: outputs differ between runs"))?;
        ensure(!runs[0].is_empty(), || format!("{sub}: no outputs"))?;
        files += runs[0].len();
    }
    Ok(format!("6 subcommands on configs/demo.toml, {files} files byte-identical across two runs"))
}

// ---------------------------------------------------------------- 9

fn series(seed: u64, len: usize) -> Vec<Complex64> {
    let mut s = gen_jakes(10.0, 1e-3, len, 16, seed).unwrap().samples;
    add_estimation_noise(&mut s, 0.05, seed).unwrap();
    s
}

fn fedft_identities() -> Result<(), String> {
    // Zero adapters reproduce the frozen model bit for bit.
    let topo = star(3, 1e6);
    let p = partition_model(&[8, 8], 16, 4, 3).unwrap();
    let a = attach_lora(&p, 2, 2.0, 3).unwrap();
    let task = SyntheticTask::new(&p, 4, 3);
    let bs = batches(&task, &p, &["d0", "d1"], 5, 1);
    let fwd = forward_round(&p, &a, &bs, &topo, &"srv".into(), 0.0).unwrap();
    for (b, reprs) in bs.iter().zip(&fwd.representations) {
        for (s, r) in b.samples.iter().zip(reprs) {
            ensure(r == &frozen_forward(&p, &p.embed(&s.tokens)), || "zero adapters changed the output".into())?;
        }
    }

    // Identical Jacobians from every device average to the single-device gradient.
    let mut a = attach_lora(&p, 2, 2.0, 4).unwrap();
    a.layers[0].b = DMatrix::from_fn(8, 2, |i, j| 0.1 * i as f64 - 0.05 * j as f64);
    let shared = task.dataset(&p, 3, 9, &[0]);
    let bs: Vec<DeviceBatch> =
        ["d0", "d1", "d2"].iter().map(|d| DeviceBatch { device: (*d).into(), samples: shared.clone() }).collect();
    let fwd = forward_round(&p, &a, &bs, &topo, &"srv".into(), 0.0).unwrap();
    let j: Vec<DVector<f64>> = (0..3).map(|i| DVector::from_fn(8, |r, _| (r + i) as f64 * 0.1 - 0.2)).collect();
    let same: Vec<_> =
        bs.iter().map(|b| JacobianBatch { device: b.device.clone(), jacobians: j.clone(), device_flops: 0.0 }).collect();
    let mut scratch = a.clone();
    let avg = backward_round(&p, &mut scratch, &fwd.state, &same, &topo, &"srv".into(), 0.0, None, 0.0).unwrap();
    let single = edgelam::fedft::round::device_adapter_grads(&p, &a, &fwd.state.caches[0], &j);
    ensure(avg.grads == single, || "identical Jacobians did not average exactly".into())?;

    // One-device federation is centralized training.
    let mut cfg = FedftConfig::new("srv", &["d0"]);
    cfg.d_model = 16;
    cfg.layers = 2;
    cfg.rank = Some(2);
    cfg.rounds = 8;
    let fed = run_fedft(&cfg, &star(1, 1e7), 42).unwrap();
    let (curve, eval) = train_centralized(&cfg, 42).unwrap();
    ensure(fed.loss_curve() == curve && fed.final_eval_loss == eval, || "1-device run differs from centralized".into())
}

fn chanpred_identities() -> Result<(), String> {
    let pool = make_windows(&series(3, 600), 16, 4).unwrap();
    let shard = make_windows(&series(4, 80), 16, 4).unwrap();
    for kind in PredictorKind::ALL {
        let spec = PredictorSpec { kind, ..PredictorSpec::default() };
        let init = Predictor::init(&spec, 3).unwrap();
        let eval = EvalData { train: &pool[..64], heldout: &pool[64..128] };
        let fed = FedConfig { num_clients: 1, shard_fraction: 1.0, rounds: 6, local_steps: 3, lr: 0.05, batch: Some(4), seed: 11 };
        let a = train_federated(&init, std::slice::from_ref(&pool), &fed, &eval).unwrap();
        let opts = TrainOpts { steps: 18, lr: 0.05, batch: Some(4), log_every: 3 };
        let b = train_local(&init, &pool, &opts, &eval, 11).unwrap();
        ensure(a.params == b.params && a.round_loss == b.round_loss, || format!("{}: 1-client run differs", kind.name()))?;

        let eval = EvalData { train: &shard, heldout: &[] };
        let fed = FedConfig { num_clients: 5, shard_fraction: 0.1, rounds: 3, local_steps: 2, lr: 0.05, batch: None, seed: 0 };
        let a = train_federated(&init, &vec![shard.clone(); 5], &fed, &eval).unwrap();
        let opts = TrainOpts { steps: 6, lr: 0.05, batch: None, log_every: 2 };
        let b = train_local(&init, &shard, &opts, &eval, 0).unwrap();
        ensure(a.params == b.params, || format!("{}: identical clients differ from one client", kind.name()))?;
    }

    let spec = PredictorSpec { kind: PredictorKind::AttnLora, ..PredictorSpec::default() };
    let p = Predictor::init(&spec, 5).unwrap();
    let mask = spec.trainable_mask();
    let mut q = p.clone();
    let start = mask.iter().position(|&m| m).unwrap();
    for v in &mut q.params[start..start + spec.adapter_params()] {
        *v = -*v * 3.0;
    }
    let w = make_windows(&series(5, 60), 16, 4).unwrap();
    for win in &w {
        ensure(p.predict(&win.x) == q.predict(&win.x), || "zero adapters changed a prediction".into())?;
    }
    let opts = TrainOpts { steps: 20, lr: 0.05, batch: Some(4), log_every: 5 };
    let rep = train_local(&p, &w, &opts, &EvalData { train: &w, heldout: &[] }, 5).unwrap();
    ensure(mask.iter().zip(&rep.params).zip(&p.params).all(|((m, a), b)| *m || a == b), || {
        "frozen base moved during adapter training".into()
    })
}

fn exact_identities() -> Outcome {
    fedft_identities()?;
    chanpred_identities()?;
    Ok("fedft: zero adapters, Jacobian averaging, 1-device = centralized; chanpred: 1 client = local, identical clients, frozen base".into())
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "federated channel prediction", federated_channel_prediction),
        (2, "adapter budget", adapter_budget),
        (3, "gradient oracles", gradient_oracles),
        (4, "privacy accounting", privacy_accounting),
        (5, "tensor parallel split", tensor_parallel),
        (6, "microservice deployment", microservice_deployment),
        (7, "online migration", migration),
        (8, "reproducible CLI", reproducible_cli),
        (9, "exact identities", exact_identities),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
