//! Oracles for the split fine-tuning protocol.

use edgelam::fedft::round::ForwardState;
use edgelam::fedft::*;
use edgelam::netsim::{NodeId, Topology};
use nalgebra::DMatrix;

pub fn batches(task: &SyntheticTask, p: &ModelPartition, devices: &[&str], per: usize, seed: u64) -> Vec<DeviceBatch> {
    devices
        .iter()
        .enumerate()
        .map(|(k, d)| DeviceBatch {
            device: NodeId::from(*d),
            samples: task.dataset(p, per, seed, &[k as u64]),
        })
        .collect()
}

/// Gradient of `(1/K)·Σₖ mean CE` w.r.t. the adapters, through the protocol.
pub fn protocol_grads(
    p: &ModelPartition,
    adapters: &AdapterSet,
    heads: &[DMatrix<f64>],
    bs: &[DeviceBatch],
    topo: &Topology,
) -> (AdapterGrads, ForwardState, Vec<JacobianBatch>) {
    let fwd = forward_round(p, adapters, bs, topo, &"srv".into(), 0.0).unwrap();
    let uploads: Vec<_> = bs
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let labels: Vec<_> = b.samples.iter().map(|s| s.label).collect();
            JacobianBatch {
                device: b.device.clone(),
                jacobians: device_loss_grad(&heads[k], &fwd.representations[k], &labels).jacobians,
                device_flops: 0.0,
            }
        })
        .collect();
    let mut scratch = adapters.clone();
    let out = backward_round(p, &mut scratch, &fwd.state, &uploads, topo, &"srv".into(), 0.0, None, 0.0).unwrap();
    (out.grads, fwd.state, uploads)
}

/// Loss evaluated forward-only, for finite differences.
pub fn federated_loss(p: &ModelPartition, adapters: &AdapterSet, heads: &[DMatrix<f64>], bs: &[DeviceBatch]) -> f64 {
    bs.iter()
        .zip(heads)
        .map(|(b, h)| {
            b.samples
                .iter()
                .map(|s| {
                    let (r, _) = decoder_forward(p, adapters, &p.embed(&s.tokens));
                    edgelam::fedft::task::cross_entropy(h, &r, s.label)
                })
                .sum::<f64>()
                / b.samples.len() as f64
        })
        .sum::<f64>()
        / bs.len() as f64
}

/// ln ∫ p^α q^{1−α} dx for p = N(0, s²), q = N(μ, s²), by composite Simpson
/// in the log domain.
pub fn renyi_quadrature(alpha: f64, mu: f64, s: f64) -> f64 {
    let log_p = |x: f64| -x * x / (2.0 * s * s) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_q = |x: f64| -(x - mu) * (x - mu) / (2.0 * s * s) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let f = |x: f64| alpha * log_p(x) + (1.0 - alpha) * log_q(x);
    let center = (1.0 - alpha) * mu;
    let (lo, hi) = (center - 40.0 * s, center + 40.0 * s);
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let peak = f(center);
    let mut acc = 0.0;
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * (f(x) - peak).exp();
    }
    let log_int = peak + (acc * h / 3.0).ln();
    log_int / (alpha - 1.0)
}
