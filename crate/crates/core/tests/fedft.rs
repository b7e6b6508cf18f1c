mod common;

use common::fedft::{batches, federated_loss, protocol_grads, renyi_quadrature};
use common::{central_diff, rel_err, star};
use edgelam::fedft::privacy::clip;
use edgelam::fedft::*;
use edgelam::netsim::Topology;
use edgelam::rng;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn zero_adapters_reproduce_frozen_model() {
    let topo = star(2, 1e6);
    let p = partition_model(&[8, 8], 16, 4, 3).unwrap();
    let a = attach_lora(&p, 2, 2.0, 3).unwrap();
    let task = SyntheticTask::new(&p, 4, 3);
    let bs = batches(&task, &p, &["d0", "d1"], 5, 1);
    let fwd = forward_round(&p, &a, &bs, &topo, &"srv".into(), 0.0).unwrap();
    for (b, reprs) in bs.iter().zip(&fwd.representations) {
        for (s, r) in b.samples.iter().zip(reprs) {
            assert_eq!(r, &frozen_forward(&p, &p.embed(&s.tokens)));
        }
    }
}

#[test]
fn downlink_is_unicast_per_device() {
    let topo = star(1, 1e6);
    let p = partition_model(&[8], 16, 4, 3).unwrap();
    let a = attach_lora(&p, 1, 1.0, 3).unwrap();
    let task = SyntheticTask::new(&p, 4, 3);
    let bs = batches(&task, &p, &["d0"], 2, 1);
    let fwd = forward_round(&p, &a, &bs, &topo, &"srv".into(), 0.0).unwrap();
    assert_eq!(fwd.trace.devices[0].downlink_repr_bytes, 64);
    assert_eq!(fwd.trace.devices[0].uplink_embedding_bytes, 64);

    let topo3 = star(3, 1e6);
    let bs3 = batches(&task, &p, &["d0", "d1", "d2"], 2, 1);
    let fwd3 = forward_round(&p, &a, &bs3, &topo3, &"srv".into(), 0.0).unwrap();
    let downs = fwd3
        .trace
        .phases
        .iter()
        .filter(|ph| ph.phase == Phase::DownlinkRepresentation)
        .count();
    assert_eq!(downs, 3);
}

#[test]
fn forward_latency_is_critical_path() {
    let topo = star(3, 2e5);
    let p = partition_model(&[8, 8], 16, 4, 3).unwrap();
    let a = attach_lora(&p, 2, 2.0, 3).unwrap();
    let task = SyntheticTask::new(&p, 4, 3);
    let bs = batches(&task, &p, &["d0", "d1", "d2"], 4, 1);
    let fwd = forward_round(&p, &a, &bs, &topo, &"srv".into(), 0.0).unwrap();

    let bytes = 4 * 8 * 4;
    let up = topo.transfer_latency(&"d0".into(), &"srv".into(), bytes, 0.0).unwrap();
    let down = topo.transfer_latency(&"srv".into(), &"d0".into(), bytes, 0.0).unwrap();
    let flops = 12.0 * 2.0 * (2.0 * 64.0 + 4.0 * 2.0 * 8.0 + 16.0);
    let server = flops / 1e11;
    let want = (up + down) + server;
    assert!((fwd.trace.forward_latency_s - want).abs() < 1e-12, "{} vs {want}", fwd.trace.forward_latency_s);
}

#[test]
fn identical_jacobians_average_exactly_and_opposite_ones_cancel() {
    let topo = star(3, 1e6);
    let p = partition_model(&[6, 6], 8, 3, 4).unwrap();
    let mut a = attach_lora(&p, 2, 2.0, 4).unwrap();
    a.layers[0].b = DMatrix::from_fn(6, 2, |i, j| 0.1 * (i as f64) - 0.05 * j as f64);
    let task = SyntheticTask::new(&p, 3, 4);
    // Same samples on every device.
    let shared = task.dataset(&p, 3, 9, &[0]);
    let bs: Vec<DeviceBatch> = ["d0", "d1", "d2"]
        .iter()
        .map(|d| DeviceBatch { device: (*d).into(), samples: shared.clone() })
        .collect();
    let fwd = forward_round(&p, &a, &bs, &topo, &"srv".into(), 0.0).unwrap();
    let j: Vec<DVector<f64>> = (0..3).map(|i| DVector::from_fn(6, |r, _| (r + i) as f64 * 0.1 - 0.2)).collect();

    let same: Vec<_> = bs
        .iter()
        .map(|b| JacobianBatch { device: b.device.clone(), jacobians: j.clone(), device_flops: 0.0 })
        .collect();
    let mut scratch = a.clone();
    let avg = backward_round(&p, &mut scratch, &fwd.state, &same, &topo, &"srv".into(), 0.0, None, 0.0).unwrap();
    let single = edgelam::fedft::round::device_adapter_grads(&p, &a, &fwd.state.caches[0], &j);
    assert_eq!(avg.grads, single);

    let two = forward_round(&p, &a, &bs[..2], &topo, &"srv".into(), 0.0).unwrap();
    let neg: Vec<_> = j.iter().map(|v| -v).collect();
    let opposite = vec![
        JacobianBatch { device: "d0".into(), jacobians: j.clone(), device_flops: 0.0 },
        JacobianBatch { device: "d1".into(), jacobians: neg, device_flops: 0.0 },
    ];
    let mut scratch = a.clone();
    let out = backward_round(&p, &mut scratch, &two.state, &opposite, &topo, &"srv".into(), 0.0, None, 0.0).unwrap();
    assert!(out.grads.is_zero());
}

#[test]
fn jacobian_width_is_checked() {
    let topo = star(1, 1e6);
    let p = partition_model(&[6], 8, 3, 4).unwrap();
    let mut a = attach_lora(&p, 1, 1.0, 4).unwrap();
    let task = SyntheticTask::new(&p, 3, 4);
    let bs = batches(&task, &p, &["d0"], 2, 0);
    let fwd = forward_round(&p, &a, &bs, &topo, &"srv".into(), 0.0).unwrap();
    let bad = vec![JacobianBatch {
        device: "d0".into(),
        jacobians: vec![DVector::zeros(5); 2],
        device_flops: 0.0,
    }];
    let err = backward_round(&p, &mut a, &fwd.state, &bad, &topo, &"srv".into(), 0.0, None, 0.1).unwrap_err();
    assert!(matches!(err, FedError::DimensionMismatch(_)));
}

#[test]
fn unreachable_device_is_reported() {
    use edgelam::netsim::{NodeSpec, Role};
    let nodes = vec![
        NodeSpec::new("srv", 1e9, 1 << 20, Role::Server),
        NodeSpec::new("d0", 1e9, 1 << 20, Role::Device),
    ];
    let topo = Topology::new(nodes, vec![], 0).unwrap();
    let p = partition_model(&[4], 8, 2, 4).unwrap();
    let a = attach_lora(&p, 1, 1.0, 4).unwrap();
    let task = SyntheticTask::new(&p, 3, 4);
    let bs = batches(&task, &p, &["d0"], 2, 0);
    let err = forward_round(&p, &a, &bs, &topo, &"srv".into(), 0.0).unwrap_err();
    assert_eq!(err, FedError::UnreachableDevice("d0".into()));
}

#[test]
fn full_rank_gradient_after_one_step_matches_finite_differences() {
    let topo = star(1, 1e6);
    let p = partition_model(&[8, 8], 12, 3, 21).unwrap();
    let mut a = attach_lora(&p, 8, 8.0, 21).unwrap();
    let task = SyntheticTask::new(&p, 3, 21);
    let bs = batches(&task, &p, &["d0"], 4, 2);
    let heads = vec![p.task_head.clone()];

    // First step from B = 0: A gets no gradient yet.
    let (g0, _, _) = protocol_grads(&p, &a, &heads, &bs, &topo);
    assert!(g0.a.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    a.apply_sgd(&g0, 0.5);

    let (g1, _, _) = protocol_grads(&p, &a, &heads, &bs, &topo);
    let x = a.to_flat();
    let fd = central_diff(&x, 1e-5, |v| {
        let mut t = a.clone();
        t.set_flat(v);
        federated_loss(&p, &t, &heads, &bs)
    });
    let analytic = g1.to_flat();
    assert!(g1.a.iter().any(|m| m.norm() > 0.0));
    assert!(rel_err(&analytic, &fd, 1e-12) < 1e-4);
}

#[test]
fn averaged_gradient_equals_gradient_of_averaged_loss() {
    let mut r = rng::rng(5, &[]);
    for case in 0..10u64 {
        let d = r.gen_range(2..=10);
        let rank = r.gen_range(1..=d.min(4));
        let k = r.gen_range(1..=4);
        let topo = star(k, 1e6);
        let p = partition_model(&[d; 2], 10, 3, case).unwrap();
        let mut a = attach_lora(&p, rank, 1.5, case).unwrap();
        for l in &mut a.layers {
            l.b = DMatrix::from_fn(d, rank, |_, _| r.gen_range(-0.5..0.5));
        }
        let task = SyntheticTask::new(&p, 3, case);
        let names: Vec<String> = (0..k).map(|i| format!("d{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        // Unequal batch sizes per device.
        let bs: Vec<_> = refs
            .iter()
            .enumerate()
            .map(|(i, dname)| DeviceBatch {
                device: (*dname).into(),
                samples: task.dataset(&p, 2 + i, case, &[i as u64]),
            })
            .collect();
        let heads = vec![p.task_head.clone(); k];
        let (g, state, uploads) = protocol_grads(&p, &a, &heads, &bs, &topo);

        // Monolithic gradient of the averaged loss: per-sample weight 1/(K·Bₖ).
        let mut mono = AdapterGrads::zeros_like(&a);
        for (i, up) in uploads.iter().enumerate() {
            let w = 1.0 / (k as f64 * up.jacobians.len() as f64);
            for (c, j) in state.caches[i].iter().zip(&up.jacobians) {
                decoder_backward(&p, &a, c, j, w, &mut mono);
            }
        }
        assert!(rel_err(&g.to_flat(), &mono.to_flat(), 1e-300) < 1e-10);
    }
}

#[test]
fn randomized_gradient_oracle() {
    let mut r = rng::rng(77, &[]);
    for case in 0..25u64 {
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
        let e = rel_err(&g.to_flat(), &fd, 1e-12);
        assert!(e < 1e-4, "case {case}: d={d} r={rank} rel err {e}");
    }
}

#[test]
fn rdp_matches_numeric_renyi_divergence() {
    let spec = PrivacySpec::new(1.0, 1.0, 1e-5);
    let eps = spec.rdp_per_round(2.0, 1.0);
    assert_eq!(eps, 1.0);
    assert!((eps - renyi_quadrature(2.0, 1.0, 1.0)).abs() < 1e-6);
    for sigma in [0.5, 1.0, 2.0] {
        for clip_norm in [0.5, 1.0, 3.0] {
            let spec = PrivacySpec::new(clip_norm, sigma, 1e-5);
            for alpha in [2.0, 4.0, 8.0] {
                let numeric = renyi_quadrature(alpha, clip_norm, sigma * clip_norm);
                assert!((spec.rdp_per_round(alpha, clip_norm) - numeric).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn epsilon_monotone_in_sigma_and_rounds() {
    let sigmas = [0.5, 0.8, 1.0, 2.0, 1e6];
    let rounds = [1u64, 2, 5, 10, 100];
    for &t in &rounds {
        let eps: Vec<f64> = sigmas
            .iter()
            .map(|&s| rdp_epsilon(&PrivacySpec::new(1.0, s, 1e-5), 1.0, t).unwrap().0)
            .collect();
        assert!(eps.windows(2).all(|w| w[1] < w[0]), "{eps:?}");
    }
    for &s in &sigmas {
        let eps: Vec<f64> = rounds
            .iter()
            .map(|&t| rdp_epsilon(&PrivacySpec::new(1.0, s, 1e-5), 1.0, t).unwrap().0)
            .collect();
        assert!(eps.windows(2).all(|w| w[1] > w[0]), "{eps:?}");
    }
}

#[test]
fn single_device_federation_equals_centralized_training() {
    let topo = star(1, 1e7);
    let mut cfg = FedftConfig::new("srv", &["d0"]);
    cfg.d_model = 16;
    cfg.layers = 2;
    cfg.rank = Some(2);
    cfg.rounds = 8;
    let fed = run_fedft(&cfg, &topo, 42).unwrap();
    let (curve, eval) = train_centralized(&cfg, 42).unwrap();
    assert_eq!(fed.loss_curve(), curve);
    assert_eq!(fed.final_eval_loss, eval);
}

#[test]
fn disabled_noise_is_noiseless_and_unaccounted() {
    let topo = star(2, 1e7);
    let mut cfg = FedftConfig::new("srv", &["d0", "d1"]);
    cfg.rounds = 4;
    let a = run_fedft(&cfg, &topo, 1).unwrap();
    let b = run_fedft(&cfg, &topo, 1).unwrap();
    assert_eq!(a.loss_curve(), b.loss_curve());
    assert!(a.rounds.iter().all(|r| r.epsilon.is_infinite() && r.gradient_noise_var == 0.0));

    cfg.sigma = Some(1.0);
    let noisy = run_fedft(&cfg, &topo, 1).unwrap();
    assert!(noisy.rounds.iter().all(|r| r.epsilon.is_finite() && r.gradient_noise_var > 0.0));
    assert!(noisy.rounds.windows(2).all(|w| w[1].epsilon > w[0].epsilon));
}

#[test]
fn default_adapters_within_five_percent() {
    let topo = star(1, 1e7);
    let mut cfg = FedftConfig::new("srv", &["d0"]);
    cfg.rounds = 1;
    let rep = run_fedft(&cfg, &topo, 0).unwrap();
    assert_eq!(rep.rank, 1);
    assert_eq!(rep.decoder_params, 16384);
    assert_eq!(rep.adapter_params, 512);
    assert!(20 * rep.adapter_params <= rep.decoder_params);
}

#[test]
fn federation_beats_single_shard() {
    let topo = star(4, 1e8);
    let mut wins = 0;
    for seed in 0..10 {
        let mut fed = FedftConfig::new("srv", &["d0", "d1", "d2", "d3"]);
        fed.rounds = 60;
        fed.lr = 0.2;
        let mut single = fed.clone();
        single.devices.truncate(1);
        let a = run_fedft(&fed, &topo, seed).unwrap();
        let b = run_fedft(&single, &topo, seed).unwrap();
        if a.final_eval_loss <= b.final_eval_loss {
            wins += 1;
        }
    }
    assert!(wins >= 8, "federation won {wins}/10");
}

proptest! {
    #[test]
    fn clipping_never_exceeds_bound(v in proptest::collection::vec(-50.0f64..50.0, 1..12), c in 0.01f64..10.0) {
        let x = DVector::from_vec(v);
        let y = clip(&x, c);
        prop_assert!(y.norm() <= c * (1.0 + 1e-12));
        if x.norm() < c {
            prop_assert_eq!(y, x);
        }
    }
}
