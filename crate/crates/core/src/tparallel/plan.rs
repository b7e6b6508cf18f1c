//! Split planning: choose column-slice widths that minimize round latency
//! under per-device storage.

use serde::{Deserialize, Serialize};

use super::{TpError, BYTES_PER_SCALAR};
use crate::netsim::{NetError, NodeId, Topology};

/// `X (M×K) · W (K×N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmTask {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl GemmTask {
    pub fn new(m: usize, k: usize, n: usize) -> Result<Self, TpError> {
        let t = Self { m, k, n };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TpError> {
        if self.m == 0 || self.k == 0 || self.n == 0 {
            return Err(TpError::InvalidTask { m: self.m, k: self.k, n: self.n });
        }
        Ok(())
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.m as f64 * self.k as f64 * self.n as f64
    }

    /// Bytes a device keeps for a slice: its weight columns plus its output
    /// columns.
    pub fn shard_bytes(&self, width: usize) -> u64 {
        BYTES_PER_SCALAR * ((self.k + self.m) * width) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Exact search for up to four devices, greedy beyond.
    #[default]
    Auto,
    Exact,
    Greedy,
    /// Equal widths, bounded by the smallest storage among participants.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub device: NodeId,
    pub offset: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub task: GemmTask,
    pub server: NodeId,
    pub assignments: Vec<Slice>,
    pub predicted_latency_s: f64,
    pub mode: PlanMode,
}

impl SplitPlan {
    /// Parameter bytes held across all devices; independent of loop depth.
    pub fn param_bytes(&self) -> u64 {
        BYTES_PER_SCALAR * (self.task.k * self.task.n) as u64
    }

    pub fn widths(&self) -> Vec<(NodeId, usize)> {
        self.assignments.iter().map(|s| (s.device.clone(), s.width)).collect()
    }

    /// Coverage, contiguity and storage checks.
    pub fn validate(&self, topology: &Topology) -> Result<(), TpError> {
        self.task.validate()?;
        let mut next = 0;
        for s in &self.assignments {
            if s.width == 0 {
                return Err(TpError::InvalidPlan(format!("slice for `{}` has width 0", s.device)));
            }
            if s.offset != next {
                return Err(TpError::InvalidPlan(format!(
                    "slice for `{}` starts at {} but {} expected",
                    s.device, s.offset, next
                )));
            }
            next += s.width;
            let storage = topology.node(&s.device)?.storage;
            let need = self.task.shard_bytes(s.width);
            if need > storage {
                return Err(TpError::InfeasibleStorage {
                    device: s.device.clone(),
                    storage,
                    shard_bytes: need,
                });
            }
        }
        if next != self.task.n {
            return Err(TpError::InvalidPlan(format!("slices cover {next} of {} columns", self.task.n)));
        }
        Ok(())
    }
}

/// Widest slice a device can store, capped at `N`.
pub fn storage_cap(task: &GemmTask, storage: u64) -> usize {
    let per_col = task.shard_bytes(1);
    ((storage / per_col) as usize).min(task.n)
}

/// Server merge cost: one op per output entry plus one per received byte.
pub fn merge_flops(m: usize, n: usize, received_bytes: u64) -> f64 {
    (m * n) as f64 + received_bytes as f64
}

fn unreachable_as(device: &NodeId) -> impl Fn(NetError) -> TpError + '_ {
    move |e| match e {
        NetError::Unreachable { .. } => TpError::UnreachableDevice(device.clone()),
        other => other.into(),
    }
}

/// Shard downlink (inputs plus weight columns), compute, and partial-result
/// uplink for one device, evaluated from `t0` in sequence.
pub fn slice_latency(
    task: &GemmTask,
    topology: &Topology,
    server: &NodeId,
    device: &NodeId,
    width: usize,
    t0: f64,
) -> Result<f64, TpError> {
    if width == 0 {
        return Ok(0.0);
    }
    let (m, k, w) = (task.m as u64, task.k as u64, width as u64);
    let err = unreachable_as(device);
    let down_bytes = BYTES_PER_SCALAR * (m * k + k * w);
    let t = t0 + topology.transfer_latency(server, device, down_bytes, t0).map_err(&err)?;
    let flops = 2.0 * task.m as f64 * task.k as f64 * width as f64;
    let t = t + topology.compute_latency(flops, device)?;
    let t = t + topology.transfer_latency(device, server, BYTES_PER_SCALAR * m * w, t).map_err(&err)?;
    Ok(t - t0)
}

fn merge_latency(task: &GemmTask, topology: &Topology, server: &NodeId, widths: &[(NodeId, usize)]) -> Result<f64, TpError> {
    let received: u64 = widths
        .iter()
        .filter(|(d, _)| d != server)
        .map(|(_, w)| BYTES_PER_SCALAR * (task.m * w) as u64)
        .sum();
    Ok(topology.compute_latency(merge_flops(task.m, task.n, received), server)?)
}

/// Max device latency over participating devices plus the server merge.
pub fn round_latency(
    task: &GemmTask,
    topology: &Topology,
    server: &NodeId,
    widths: &[(NodeId, usize)],
    t0: f64,
) -> Result<f64, TpError> {
    let mut worst: f64 = 0.0;
    for (d, w) in widths {
        worst = worst.max(slice_latency(task, topology, server, d, *w, t0)?);
    }
    Ok(worst + merge_latency(task, topology, server, widths)?)
}

/// Plans with [`PlanMode::Auto`] starting at time zero.
pub fn plan_split(task: &GemmTask, topology: &Topology, server: &NodeId, devices: &[NodeId]) -> Result<SplitPlan, TpError> {
    plan_split_with(task, topology, server, devices, PlanMode::Auto, 0.0)
}

pub fn plan_split_with(
    task: &GemmTask,
    topology: &Topology,
    server: &NodeId,
    devices: &[NodeId],
    mode: PlanMode,
    t0: f64,
) -> Result<SplitPlan, TpError> {
    task.validate()?;
    topology.node(server)?;
    let mut devs = devices.to_vec();
    devs.sort();
    devs.dedup();
    if devs.is_empty() {
        return Err(TpError::NoCandidates);
    }
    let mut caps = Vec::with_capacity(devs.len());
    for d in &devs {
        caps.push(storage_cap(task, topology.node(d)?.storage));
        if !topology.reachable(server, d) || !topology.reachable(d, server) {
            return Err(TpError::UnreachableDevice(d.clone()));
        }
    }
    let mode = match mode {
        PlanMode::Auto if devs.len() <= 4 => PlanMode::Exact,
        PlanMode::Auto => PlanMode::Greedy,
        m => m,
    };
    if caps.iter().sum::<usize>() < task.n {
        return Err(binding_device(task, topology, &devs, &caps));
    }
    let widths = match mode {
        PlanMode::Exact => exact_widths(task, topology, server, &devs, &caps, t0)?,
        PlanMode::Greedy => greedy_widths(task, topology, server, &devs, &caps, t0)?,
        PlanMode::Uniform => uniform_widths(task, topology, &devs, &caps)?,
        PlanMode::Auto => unreachable!(),
    };
    let pairs: Vec<(NodeId, usize)> = devs.iter().cloned().zip(widths).filter(|(_, w)| *w > 0).collect();
    let predicted_latency_s = round_latency(task, topology, server, &pairs, t0)?;
    let mut offset = 0;
    let assignments = pairs
        .into_iter()
        .map(|(device, width)| {
            let s = Slice { device, offset, width };
            offset += width;
            s
        })
        .collect();
    Ok(SplitPlan {
        task: *task,
        server: server.clone(),
        assignments,
        predicted_latency_s,
        mode,
    })
}

/// The most storage-constrained device, reported when no split fits.
fn binding_device(task: &GemmTask, topology: &Topology, devs: &[NodeId], caps: &[usize]) -> TpError {
    let i = (0..devs.len()).min_by_key(|&i| (caps[i], i)).unwrap_or(0);
    let share = task.n.div_ceil(devs.len()).max(caps[i] + 1);
    TpError::InfeasibleStorage {
        device: devs[i].clone(),
        storage: topology.node(&devs[i]).map(|n| n.storage).unwrap_or(0),
        shard_bytes: task.shard_bytes(share),
    }
}

/// Exact min-max split. Each device's latency is nondecreasing in its
/// width, so the optimum is the smallest tabulated latency `T` at which
/// the widths reachable within `T` cover `N`. Widths are then filled in
/// device-id order, which yields the lexicographically largest optimal
/// width vector.
fn exact_widths(
    task: &GemmTask,
    topology: &Topology,
    server: &NodeId,
    devs: &[NodeId],
    caps: &[usize],
    t0: f64,
) -> Result<Vec<usize>, TpError> {
    let mut tables = Vec::with_capacity(devs.len());
    for (d, &cap) in devs.iter().zip(caps) {
        let mut tb = Vec::with_capacity(cap);
        for w in 1..=cap {
            tb.push(slice_latency(task, topology, server, d, w, t0)?);
        }
        tables.push(tb);
    }
    let mut values: Vec<f64> = tables.iter().flatten().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let reach = |t: f64| -> Vec<usize> { tables.iter().map(|tb| tb.partition_point(|&v| v <= t)).collect() };
    let idx = values.partition_point(|&t| reach(t).iter().sum::<usize>() < task.n);
    let limits = reach(values[idx]);
    let mut left = task.n;
    Ok(limits
        .into_iter()
        .map(|l| {
            let w = l.min(left);
            left -= w;
            w
        })
        .collect())
}

/// Compute-proportional shares with largest-remainder rounding, then
/// storage repair one column at a time onto the feasible device whose
/// latency after taking the column is smallest.
fn greedy_widths(
    task: &GemmTask,
    topology: &Topology,
    server: &NodeId,
    devs: &[NodeId],
    caps: &[usize],
    t0: f64,
) -> Result<Vec<usize>, TpError> {
    let rates: Vec<f64> = devs
        .iter()
        .map(|d| topology.node(d).map(|n| n.compute_rate))
        .collect::<Result<_, _>>()?;
    let total: f64 = rates.iter().sum();
    let exact: Vec<f64> = rates.iter().map(|r| task.n as f64 * r / total).collect();
    let mut widths: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..devs.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = task.n - widths.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        widths[i] += 1;
    }

    let mut excess = 0;
    for (w, &cap) in widths.iter_mut().zip(caps) {
        if *w > cap {
            excess += *w - cap;
            *w = cap;
        }
    }
    for _ in 0..excess {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..devs.len() {
            if widths[i] >= caps[i] {
                continue;
            }
            let lat = slice_latency(task, topology, server, &devs[i], widths[i] + 1, t0)?;
            if best.is_none_or(|(b, _)| lat < b) {
                best = Some((lat, i));
            }
        }
        match best {
            Some((_, i)) => widths[i] += 1,
            None => return Err(binding_device(task, topology, devs, caps)),
        }
    }
    Ok(widths)
}

fn uniform_widths(task: &GemmTask, topology: &Topology, devs: &[NodeId], caps: &[usize]) -> Result<Vec<usize>, TpError> {
    let d = devs.len().min(task.n);
    let base = task.n / d;
    let extra = task.n % d;
    let widths: Vec<usize> = (0..devs.len())
        .map(|i| if i < d { base + usize::from(i < extra) } else { 0 })
        .collect();
    let min_cap = caps[..d].iter().copied().min().unwrap_or(0);
    if widths[0] > min_cap {
        let i = (0..d).min_by_key(|&i| (caps[i], i)).unwrap_or(0);
        return Err(TpError::InfeasibleStorage {
            device: devs[i].clone(),
            storage: topology.node(&devs[i])?.storage,
            shard_bytes: task.shard_bytes(widths[0]),
        });
    }
    Ok(widths)
}
