//! Forward and backward round choreography between devices and the server.
//!
//! Forward: devices upload embeddings, the server waits for all of them,
//! runs the adapted decoder, and unicasts each device its own
//! representations. Backward: devices upload per-sample Jacobian vectors
//! (optionally clipped and noised), the server chain-rules them into adapter
//! gradients, averages uniformly over devices and takes an SGD step.

use nalgebra::DVector;
use serde::Serialize;

use super::model::{decoder_backward, decoder_forward, AdapterGrads, AdapterSet, LayerCache, ModelPartition};
use super::privacy::{add_gaussian_noise, clip, PrivacySpec};
use super::task::Sample;
use super::FedError;
use crate::netsim::{EventClock, NetError, NodeId, Topology};
use crate::rng;

pub const BYTES_PER_SCALAR: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    UplinkEmbedding,
    ServerForward,
    DownlinkRepresentation,
    DeviceBackward,
    UplinkJacobian,
    ServerBackward,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::UplinkEmbedding => "uplink_embedding",
            Phase::ServerForward => "server_forward",
            Phase::DownlinkRepresentation => "downlink_representation",
            Phase::DeviceBackward => "device_backward",
            Phase::UplinkJacobian => "uplink_jacobian",
            Phase::ServerBackward => "server_backward",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    /// `None` for server-only phases.
    pub device: Option<NodeId>,
    pub bytes: u64,
    pub start_s: f64,
    pub latency_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DeviceTraffic {
    pub device: NodeId,
    pub uplink_embedding_bytes: u64,
    pub downlink_repr_bytes: u64,
    pub uplink_jacobian_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RoundTrace {
    pub round: usize,
    pub devices: Vec<DeviceTraffic>,
    pub phases: Vec<PhaseRecord>,
    pub forward_latency_s: f64,
    pub backward_latency_s: f64,
    pub round_loss: f64,
    /// Mean squared difference between noisy and clean adapter gradients,
    /// i.e. the Jacobian noise after it has passed through the chain rule.
    pub gradient_noise_var: f64,
}

impl RoundTrace {
    pub fn latency_s(&self) -> f64 {
        self.forward_latency_s + self.backward_latency_s
    }

    fn traffic_mut(&mut self, device: &NodeId) -> &mut DeviceTraffic {
        let i = self
            .devices
            .iter()
            .position(|d| &d.device == device)
            .unwrap_or_else(|| {
                self.devices.push(DeviceTraffic {
                    device: device.clone(),
                    ..Default::default()
                });
                self.devices.len() - 1
            });
        &mut self.devices[i]
    }
}

#[derive(Debug, Clone)]
pub struct DeviceBatch {
    pub device: NodeId,
    pub samples: Vec<Sample>,
}

/// Activations the server keeps between the forward and backward passes.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub devices: Vec<NodeId>,
    pub caches: Vec<Vec<Vec<LayerCache>>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per device, in batch order.
    pub representations: Vec<Vec<DVector<f64>>>,
    pub state: ForwardState,
    pub trace: RoundTrace,
}

/// Server flops for one adapted layer on one sample.
pub fn layer_forward_flops(d: usize, r: usize) -> f64 {
    (2 * d * d + 4 * r * d + 2 * d) as f64
}

pub fn layer_backward_flops(d: usize, r: usize) -> f64 {
    (2 * d * d + 8 * r * d + 2 * d) as f64
}

fn unreachable(e: NetError, device: &NodeId) -> FedError {
    match e {
        NetError::Unreachable { .. } => FedError::UnreachableDevice(device.clone()),
        other => FedError::Net(other),
    }
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Uplink,
    ServerDone,
    Downlink,
}

pub fn forward_round(
    partition: &ModelPartition,
    adapters: &AdapterSet,
    batches: &[DeviceBatch],
    topology: &Topology,
    server: &NodeId,
    t0: f64,
) -> Result<ForwardOutput, FedError> {
    if batches.is_empty() {
        return Err(FedError::NoDevices);
    }
    let d = partition.d_model();
    let server_rate = topology.node(server)?.compute_rate;
    let mut trace = RoundTrace::default();
    let mut clock = EventClock::new(t0);

    for b in batches {
        let bytes = b.samples.len() as u64 * d as u64 * BYTES_PER_SCALAR;
        let up = topology
            .transfer_latency(&b.device, server, bytes, t0)
            .map_err(|e| unreachable(e, &b.device))?;
        trace.traffic_mut(&b.device).uplink_embedding_bytes = bytes;
        trace.phases.push(PhaseRecord {
            phase: Phase::UplinkEmbedding,
            device: Some(b.device.clone()),
            bytes,
            start_s: t0,
            latency_s: up,
        });
        clock.schedule(t0 + up, Ev::Uplink)?;
    }

    let total_samples: usize = batches.iter().map(|b| b.samples.len()).sum();
    let flops = total_samples as f64
        * partition.num_layers() as f64
        * layer_forward_flops(d, adapters.rank());
    let mut arrived = 0;
    let mut end = t0;
    let mut pending_phases = Vec::new();
    let mut failure = None;
    clock.run_with(|clk, t, ev| {
        match *ev {
            Ev::Uplink => {
                arrived += 1;
                if arrived == batches.len() {
                    let comp = flops / server_rate;
                    pending_phases.push(PhaseRecord {
                        phase: Phase::ServerForward,
                        device: None,
                        bytes: 0,
                        start_s: t,
                        latency_s: comp,
                    });
                    clk.schedule(t + comp, Ev::ServerDone)?;
                }
            }
            Ev::ServerDone => {
                for b in batches {
                    let bytes = b.samples.len() as u64 * d as u64 * BYTES_PER_SCALAR;
                    match topology.transfer_latency(server, &b.device, bytes, t) {
                        Ok(down) => {
                            pending_phases.push(PhaseRecord {
                                phase: Phase::DownlinkRepresentation,
                                device: Some(b.device.clone()),
                                bytes,
                                start_s: t,
                                latency_s: down,
                            });
                            clk.schedule(t + down, Ev::Downlink)?;
                        }
                        Err(e) => {
                            failure.get_or_insert(unreachable(e, &b.device));
                        }
                    }
                }
            }
            Ev::Downlink => end = end.max(t),
        }
        Ok(())
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    for p in pending_phases {
        if p.phase == Phase::DownlinkRepresentation {
            let dev = p.device.clone().expect("downlink has a device");
            trace.traffic_mut(&dev).downlink_repr_bytes = p.bytes;
        }
        trace.phases.push(p);
    }
    trace.forward_latency_s = end - t0;

    let mut representations = Vec::with_capacity(batches.len());
    let mut caches = Vec::with_capacity(batches.len());
    for b in batches {
        let (reprs, cs): (Vec<_>, Vec<_>) = b
            .samples
            .iter()
            .map(|s| decoder_forward(partition, adapters, &partition.embed(&s.tokens)))
            .unzip();
        representations.push(reprs);
        caches.push(cs);
    }
    Ok(ForwardOutput {
        representations,
        state: ForwardState {
            devices: batches.iter().map(|b| b.device.clone()).collect(),
            caches,
        },
        trace,
    })
}

/// Per-sample Jacobians as computed on one device.
#[derive(Debug, Clone)]
pub struct JacobianBatch {
    pub device: NodeId,
    pub jacobians: Vec<DVector<f64>>,
    /// Device compute spent producing them (task head forward/backward).
    pub device_flops: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseSource {
    pub seed: u64,
    pub round: u64,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub grads: AdapterGrads,
    pub trace: RoundTrace,
}

/// Device-side privatization: per-sample clip to `C`, then `N(0, σ²C²·I)`.
pub fn privatize(
    jacobians: &[DVector<f64>],
    spec: &PrivacySpec,
    noise: NoiseSource,
    device_index: usize,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut r = rng::rng(noise.seed, &[rng::tag("dp-noise"), noise.round, device_index as u64]);
    let clipped: Vec<_> = jacobians.iter().map(|j| clip(j, spec.clip_norm)).collect();
    let noisy = clipped
        .iter()
        .map(|j| add_gaussian_noise(j, spec.noise_std(), &mut r))
        .collect();
    (clipped, noisy)
}

/// Gradient of one device's mean loss w.r.t. every adapter.
pub fn device_adapter_grads(
    partition: &ModelPartition,
    adapters: &AdapterSet,
    caches: &[Vec<LayerCache>],
    jacobians: &[DVector<f64>],
) -> AdapterGrads {
    let mut g = AdapterGrads::zeros_like(adapters);
    let w = 1.0 / jacobians.len().max(1) as f64;
    for (c, j) in caches.iter().zip(jacobians) {
        decoder_backward(partition, adapters, c, j, w, &mut g);
    }
    g
}

/// Runs the backward round and applies one SGD step of size `lr`.
#[allow(clippy::too_many_arguments)]
pub fn backward_round(
    partition: &ModelPartition,
    adapters: &mut AdapterSet,
    state: &ForwardState,
    uploads: &[JacobianBatch],
    topology: &Topology,
    server: &NodeId,
    t0: f64,
    privacy: Option<(&PrivacySpec, NoiseSource)>,
    lr: f64,
) -> Result<BackwardOutput, FedError> {
    let d = partition.d_model();
    let mut trace = RoundTrace::default();
    if uploads.len() != state.devices.len() {
        return Err(FedError::DimensionMismatch(format!(
            "{} Jacobian uploads for {} forward devices",
            uploads.len(),
            state.devices.len()
        )));
    }

    let mut per_device = Vec::with_capacity(uploads.len());
    let mut noise_sq = 0.0;
    let mut noise_count = 0usize;
    let mut uplink_done = t0;
    for (k, up) in uploads.iter().enumerate() {
        let caches = &state.caches[k];
        if up.device != state.devices[k] {
            return Err(FedError::DimensionMismatch(format!(
                "upload {k} is from {} but forward slot belongs to {}",
                up.device, state.devices[k]
            )));
        }
        if up.jacobians.len() != caches.len() {
            return Err(FedError::DimensionMismatch(format!(
                "{} Jacobians for {} samples on {}",
                up.jacobians.len(),
                caches.len(),
                up.device
            )));
        }
        if let Some(j) = up.jacobians.iter().find(|j| j.len() != d) {
            return Err(FedError::DimensionMismatch(format!(
                "Jacobian width {} but d = {d}",
                j.len()
            )));
        }

        let grads = match privacy {
            None => device_adapter_grads(partition, adapters, caches, &up.jacobians),
            Some((spec, noise)) => {
                let (clean, noisy) = privatize(&up.jacobians, spec, noise, k);
                let g_clean = device_adapter_grads(partition, adapters, caches, &clean);
                let g_noisy = device_adapter_grads(partition, adapters, caches, &noisy);
                for (a, b) in g_noisy.to_flat().iter().zip(g_clean.to_flat()) {
                    noise_sq += (a - b) * (a - b);
                    noise_count += 1;
                }
                g_noisy
            }
        };
        per_device.push((up.device.clone(), grads));

        let dev_rate = topology.node(&up.device)?.compute_rate;
        let dev_time = up.device_flops / dev_rate;
        let bytes = up.jacobians.len() as u64 * d as u64 * BYTES_PER_SCALAR;
        let lat = topology
            .transfer_latency(&up.device, server, bytes, t0 + dev_time)
            .map_err(|e| unreachable(e, &up.device))?;
        trace.traffic_mut(&up.device).uplink_jacobian_bytes = bytes;
        trace.phases.push(PhaseRecord {
            phase: Phase::DeviceBackward,
            device: Some(up.device.clone()),
            bytes: 0,
            start_s: t0,
            latency_s: dev_time,
        });
        trace.phases.push(PhaseRecord {
            phase: Phase::UplinkJacobian,
            device: Some(up.device.clone()),
            bytes,
            start_s: t0 + dev_time,
            latency_s: lat,
        });
        uplink_done = uplink_done.max(t0 + dev_time + lat);
    }

    // Fixed device-id order makes the average independent of arrival order.
    per_device.sort_by(|a, b| a.0.cmp(&b.0));
    let grads: Vec<AdapterGrads> = per_device.into_iter().map(|(_, g)| g).collect();
    let avg = AdapterGrads::mean(&grads).ok_or(FedError::NoDevices)?;

    let total_samples: usize = state.caches.iter().map(Vec::len).sum();
    let flops = total_samples as f64
        * partition.num_layers() as f64
        * layer_backward_flops(d, adapters.rank());
    let comp = flops / topology.node(server)?.compute_rate;
    trace.phases.push(PhaseRecord {
        phase: Phase::ServerBackward,
        device: None,
        bytes: 0,
        start_s: uplink_done,
        latency_s: comp,
    });
    trace.backward_latency_s = uplink_done + comp - t0;
    trace.gradient_noise_var = if noise_count > 0 {
        noise_sq / noise_count as f64
    } else {
        0.0
    };

    adapters.apply_sgd(&avg, lr);
    Ok(BackwardOutput { grads: avg, trace })
}
