use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::model::{
    attach_lora, budget_rank, decoder_forward, partition_model, AdapterGrads, AdapterSet, ModelPartition,
};
use super::privacy::{rdp_epsilon, PrivacySpec, DEFAULT_ALPHAS};
use super::round::{
    backward_round, device_adapter_grads, forward_round, DeviceBatch, JacobianBatch, NoiseSource, RoundTrace,
};
use super::task::{cross_entropy, device_loss_grad, minibatch, Sample, SyntheticTask};
use super::FedError;
use crate::netsim::{NodeId, Topology};
use crate::rng;

/// The `[fedft]` scenario section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedftConfig {
    pub server: NodeId,
    pub devices: Vec<NodeId>,
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "layers")]
    pub layers: usize,
    #[serde(default = "vocab")]
    pub vocab: usize,
    #[serde(default = "classes")]
    pub classes: usize,
    #[serde(default = "seq_len")]
    pub seq_len: usize,
    /// Shard size per device.
    #[serde(default = "samples")]
    pub samples_per_device: usize,
    /// 0 means full-shard batches.
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default = "eval")]
    pub eval_samples: usize,
    /// Adapter rank; derived from `lora_budget` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// LoRA α; defaults to the rank (unit scale).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "budget")]
    pub lora_budget: f64,
    #[serde(default = "lr")]
    pub lr: f64,
    #[serde(default = "rounds")]
    pub rounds: usize,
    /// Noise multiplier; absent disables clipping and noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default = "clip")]
    pub clip_norm: f64,
    #[serde(default = "delta")]
    pub delta: f64,
    #[serde(default = "alphas")]
    pub alpha_grid: Vec<f64>,
    /// Defaults to `clip_norm`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn d_model() -> usize {
    64
}
fn layers() -> usize {
    4
}
fn vocab() -> usize {
    32
}
fn classes() -> usize {
    4
}
fn seq_len() -> usize {
    4
}
fn samples() -> usize {
    64
}
fn batch() -> usize {
    16
}
fn eval() -> usize {
    256
}
fn budget() -> f64 {
    0.05
}
fn lr() -> f64 {
    0.05
}
fn rounds() -> usize {
    20
}
fn clip() -> f64 {
    1.0
}
fn delta() -> f64 {
    1e-5
}
fn alphas() -> Vec<f64> {
    DEFAULT_ALPHAS.to_vec()
}

impl FedftConfig {
    pub fn new(server: &str, devices: &[&str]) -> Self {
        Self {
            server: server.into(),
            devices: devices.iter().map(|&d| d.into()).collect(),
            d_model: d_model(),
            layers: layers(),
            vocab: vocab(),
            classes: classes(),
            seq_len: seq_len(),
            samples_per_device: samples(),
            batch_size: batch(),
            eval_samples: eval(),
            rank: None,
            alpha: None,
            lora_budget: budget(),
            lr: lr(),
            rounds: rounds(),
            sigma: None,
            clip_norm: clip(),
            delta: delta(),
            alpha_grid: alphas(),
            sensitivity: None,
            seed: None,
        }
    }

    pub fn privacy(&self) -> Option<PrivacySpec> {
        self.sigma.map(|s| PrivacySpec {
            clip_norm: self.clip_norm,
            noise_multiplier: s,
            delta: self.delta,
            alpha_grid: self.alpha_grid.clone(),
        })
    }

    /// Static checks that need no training.
    pub fn validate(&self, topology: &Topology) -> Result<(), FedError> {
        if self.devices.is_empty() {
            return Err(FedError::NoDevices);
        }
        if self.rounds == 0 {
            return Err(FedError::InvalidConfig("rounds must be ≥ 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(FedError::InvalidConfig("lr must be positive".into()));
        }
        if self.samples_per_device == 0 {
            return Err(FedError::InvalidConfig("samples_per_device must be ≥ 1".into()));
        }
        topology.node(&self.server)?;
        for d in &self.devices {
            topology.node(d)?;
            if !topology.reachable(d, &self.server) {
                return Err(FedError::UnreachableDevice(d.clone()));
            }
        }
        if let Some(p) = self.privacy() {
            p.validate()?;
        }
        let part = partition_model(&vec![self.d_model; self.layers], self.vocab, self.classes, 0)?;
        let rank = self.resolve_rank(&part)?;
        if rank > self.d_model {
            return Err(FedError::RankOutOfRange {
                rank,
                d_model: self.d_model,
            });
        }
        Ok(())
    }

    fn resolve_rank(&self, part: &ModelPartition) -> Result<usize, FedError> {
        match self.rank {
            Some(r) => Ok(r),
            None => budget_rank(part, self.lora_budget),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub loss: f64,
    /// Cumulative ε after this round; infinite when noise is disabled.
    pub epsilon: f64,
    pub gradient_noise_var: f64,
    pub latency_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FedReport {
    pub rounds: Vec<RoundSummary>,
    #[serde(skip)]
    pub traces: Vec<RoundTrace>,
    pub final_eval_loss: f64,
    pub rank: usize,
    pub adapter_params: usize,
    pub decoder_params: usize,
    pub delta: f64,
}

impl FedReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.loss).collect()
    }
}

/// Everything derived deterministically from `(config, seed)` before training.
pub struct FedSetup {
    pub partition: ModelPartition,
    pub adapters: AdapterSet,
    pub shards: Vec<Vec<Sample>>,
    pub eval: Vec<Sample>,
}

pub fn setup(cfg: &FedftConfig, seed: u64) -> Result<FedSetup, FedError> {
    let partition = partition_model(&vec![cfg.d_model; cfg.layers], cfg.vocab, cfg.classes, seed)?;
    let rank = cfg.resolve_rank(&partition)?;
    let adapters = attach_lora(&partition, rank, cfg.alpha.unwrap_or(rank as f64), seed)?;
    let task = SyntheticTask::new(&partition, cfg.seq_len, seed);
    let shards = (0..cfg.devices.len())
        .map(|k| task.dataset(&partition, cfg.samples_per_device, seed, &[rng::tag("shard"), k as u64]))
        .collect();
    let eval = task.dataset(&partition, cfg.eval_samples, seed, &[rng::tag("eval")]);
    Ok(FedSetup {
        partition,
        adapters,
        shards,
        eval,
    })
}

fn batch_rng(seed: u64, round: usize, device: usize) -> rand_chacha::ChaCha8Rng {
    rng::rng(seed, &[rng::tag("batch"), round as u64, device as u64])
}

pub fn eval_loss(
    partition: &ModelPartition,
    adapters: &AdapterSet,
    head: &DMatrix<f64>,
    data: &[Sample],
) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter()
        .map(|s| {
            let (r, _) = decoder_forward(partition, adapters, &partition.embed(&s.tokens));
            cross_entropy(head, &r, s.label)
        })
        .sum::<f64>()
        / data.len() as f64
}

/// Runs the full split protocol for `cfg.rounds` rounds.
pub fn run_fedft(cfg: &FedftConfig, topology: &Topology, seed: u64) -> Result<FedReport, FedError> {
    cfg.validate(topology)?;
    let seed = cfg.seed.unwrap_or(seed);
    let FedSetup {
        partition,
        mut adapters,
        shards,
        eval,
    } = setup(cfg, seed)?;
    let privacy = cfg.privacy();
    let sensitivity = cfg.sensitivity.unwrap_or(cfg.clip_norm);
    let mut heads = vec![partition.task_head.clone(); cfg.devices.len()];
    let head_flops = (4 * partition.d_model() * partition.classes()) as f64;

    let mut t = 0.0;
    let mut summaries = Vec::with_capacity(cfg.rounds);
    let mut traces = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let batches: Vec<DeviceBatch> = cfg
            .devices
            .iter()
            .enumerate()
            .map(|(k, dev)| DeviceBatch {
                device: dev.clone(),
                samples: minibatch(&shards[k], cfg.batch_size, &mut batch_rng(seed, round, k)),
            })
            .collect();
        let fwd = forward_round(&partition, &adapters, &batches, topology, &cfg.server, t)?;

        let mut uploads = Vec::with_capacity(batches.len());
        let mut losses = Vec::with_capacity(batches.len());
        for (k, b) in batches.iter().enumerate() {
            let labels: Vec<usize> = b.samples.iter().map(|s| s.label).collect();
            let dl = device_loss_grad(&heads[k], &fwd.representations[k], &labels);
            heads[k] -= &dl.head_grad * cfg.lr;
            losses.push((b.device.clone(), dl.loss));
            uploads.push(JacobianBatch {
                device: b.device.clone(),
                device_flops: head_flops * b.samples.len() as f64,
                jacobians: dl.jacobians,
            });
        }
        losses.sort_by(|a, b| a.0.cmp(&b.0));
        let round_loss = losses.iter().map(|l| l.1).sum::<f64>() / losses.len() as f64;

        let noise = privacy.as_ref().map(|p| {
            (
                p,
                NoiseSource {
                    seed,
                    round: round as u64,
                },
            )
        });
        let t_bwd = t + fwd.trace.forward_latency_s;
        let bwd = backward_round(
            &partition,
            &mut adapters,
            &fwd.state,
            &uploads,
            topology,
            &cfg.server,
            t_bwd,
            noise,
            cfg.lr,
        )?;

        let mut trace = fwd.trace;
        trace.round = round;
        trace.round_loss = round_loss;
        trace.backward_latency_s = bwd.trace.backward_latency_s;
        trace.gradient_noise_var = bwd.trace.gradient_noise_var;
        trace.phases.extend(bwd.trace.phases);
        for dt in bwd.trace.devices {
            if let Some(x) = trace.devices.iter_mut().find(|x| x.device == dt.device) {
                x.uplink_jacobian_bytes = dt.uplink_jacobian_bytes;
            }
        }
        t += trace.latency_s();

        let epsilon = match &privacy {
            Some(p) => rdp_epsilon(p, sensitivity, round as u64 + 1)?.0,
            None => f64::INFINITY,
        };
        summaries.push(RoundSummary {
            round,
            loss: round_loss,
            epsilon,
            gradient_noise_var: trace.gradient_noise_var,
            latency_s: trace.latency_s(),
        });
        traces.push(trace);
    }

    let final_eval_loss = heads
        .iter()
        .map(|h| eval_loss(&partition, &adapters, h, &eval))
        .sum::<f64>()
        / heads.len() as f64;
    Ok(FedReport {
        rounds: summaries,
        traces,
        final_eval_loss,
        rank: adapters.rank(),
        adapter_params: adapters.param_count(),
        decoder_params: partition.decoder_param_count(),
        delta: cfg.delta,
    })
}

/// Monolithic trainer: one data owner, no protocol, no network. Uses the
/// first device's shard and batch stream so it is comparable with a
/// single-device federation.
pub fn train_centralized(cfg: &FedftConfig, seed: u64) -> Result<(Vec<f64>, f64), FedError> {
    let seed = cfg.seed.unwrap_or(seed);
    let FedSetup {
        partition,
        mut adapters,
        shards,
        eval,
    } = setup(cfg, seed)?;
    let shard = shards.first().ok_or(FedError::NoDevices)?;
    let mut head = partition.task_head.clone();
    let mut curve = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let batch = minibatch(shard, cfg.batch_size, &mut batch_rng(seed, round, 0));
        let (reprs, caches): (Vec<_>, Vec<_>) = batch
            .iter()
            .map(|s| decoder_forward(&partition, &adapters, &partition.embed(&s.tokens)))
            .unzip();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let dl = device_loss_grad(&head, &reprs, &labels);
        head -= &dl.head_grad * cfg.lr;
        let g = device_adapter_grads(&partition, &adapters, &caches, &dl.jacobians);
        let g = AdapterGrads::mean(std::slice::from_ref(&g)).expect("one gradient");
        adapters.apply_sgd(&g, cfg.lr);
        curve.push(dl.loss);
    }
    Ok((curve, eval_loss(&partition, &adapters, &head, &eval)))
}
