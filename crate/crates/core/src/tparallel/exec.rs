//! Executing split plans: plain split GEMM, row-private encoding, and the
//! looped forward pass over a shared block.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::plan::{merge_flops, SplitPlan};
use super::{TpError, BYTES_PER_SCALAR};
use crate::netsim::{EventClock, NodeId, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Identity => z.clone(),
            Activation::Tanh => z.map(f64::tanh),
            Activation::Relu => z.map(|v| v.max(0.0)),
        }
    }
}

/// One timed step of an execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecRecord {
    pub depth: usize,
    pub phase: String,
    pub device: NodeId,
    pub bytes: u64,
    pub start_s: f64,
    pub latency_s: f64,
}

impl ExecRecord {
    fn new(depth: usize, phase: &str, device: &NodeId, bytes: u64, start_s: f64, latency_s: f64) -> Self {
        Self {
            depth,
            phase: phase.to_string(),
            device: device.clone(),
            bytes,
            start_s,
            latency_s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitExecution {
    pub output: DMatrix<f64>,
    pub latency_s: f64,
    pub records: Vec<ExecRecord>,
}

fn check_dims(plan: &SplitPlan, w: &DMatrix<f64>, x_cols: usize, rows: usize) -> Result<(), TpError> {
    let t = &plan.task;
    if w.shape() != (t.k, t.n) {
        return Err(TpError::DimensionMismatch(format!(
            "W is {}x{}, plan expects {}x{}",
            w.nrows(),
            w.ncols(),
            t.k,
            t.n
        )));
    }
    if x_cols != t.k || rows != t.m {
        return Err(TpError::DimensionMismatch(format!(
            "X is {rows}x{x_cols}, plan expects {}x{}",
            t.m, t.k
        )));
    }
    Ok(())
}

fn weight_slice(w: &DMatrix<f64>, offset: usize, width: usize) -> DMatrix<f64> {
    if offset == 0 && width == w.ncols() {
        w.clone()
    } else {
        w.columns(offset, width).into_owned()
    }
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Downlinked(usize),
    Computed(usize),
    Uplinked,
    Merged,
}

/// Each device computes `X·W_slice`; the server concatenates the slices.
pub fn execute_split(
    plan: &SplitPlan,
    topology: &Topology,
    w: &DMatrix<f64>,
    x: &DMatrix<f64>,
    t0: f64,
) -> Result<SplitExecution, TpError> {
    check_dims(plan, w, x.ncols(), x.nrows())?;
    plan.validate(topology)?;
    let (m, k) = (plan.task.m, plan.task.k);
    let mut output = DMatrix::zeros(m, plan.task.n);
    for s in &plan.assignments {
        let part = x * weight_slice(w, s.offset, s.width);
        output.columns_mut(s.offset, s.width).copy_from(&part);
    }

    let server = &plan.server;
    let mut records = Vec::new();
    let mut clock = EventClock::new(t0);
    for (i, s) in plan.assignments.iter().enumerate() {
        let bytes = BYTES_PER_SCALAR * (m * k + k * s.width) as u64;
        let lat = topology.transfer_latency(server, &s.device, bytes, t0)?;
        records.push(ExecRecord::new(1, "shard_downlink", &s.device, bytes, t0, lat));
        clock.schedule(t0 + lat, Ev::Downlinked(i))?;
    }
    let mut pending = plan.assignments.len();
    let received: u64 = plan
        .assignments
        .iter()
        .filter(|s| &s.device != server)
        .map(|s| BYTES_PER_SCALAR * (m * s.width) as u64)
        .sum();
    let mut finish = t0;
    clock.run_with(|clk, t, ev| {
        match *ev {
            Ev::Downlinked(i) => {
                let s = &plan.assignments[i];
                let flops = 2.0 * m as f64 * k as f64 * s.width as f64;
                let lat = topology.compute_latency(flops, &s.device)?;
                records.push(ExecRecord::new(1, "shard_compute", &s.device, 0, t, lat));
                clk.schedule(t + lat, Ev::Computed(i))?;
            }
            Ev::Computed(i) => {
                let s = &plan.assignments[i];
                let bytes = BYTES_PER_SCALAR * (m * s.width) as u64;
                let lat = topology.transfer_latency(&s.device, server, bytes, t)?;
                records.push(ExecRecord::new(1, "partial_uplink", &s.device, bytes, t, lat));
                clk.schedule(t + lat, Ev::Uplinked)?;
            }
            Ev::Uplinked => {
                pending -= 1;
                if pending == 0 {
                    let lat = topology.compute_latency(merge_flops(m, plan.task.n, received), server)?;
                    records.push(ExecRecord::new(1, "merge", server, received, t, lat));
                    clk.schedule(t + lat, Ev::Merged)?;
                }
            }
            Ev::Merged => finish = t,
        }
        Ok(())
    })?;
    Ok(SplitExecution {
        output,
        latency_s: finish - t0,
        records,
    })
}

/// Raw input rows held privately by one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceRows {
    pub device: NodeId,
    pub x: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct EncodeOutput {
    /// `activation(X·W)` with rows stacked in input order.
    pub output: DMatrix<f64>,
    pub pre_activation: DMatrix<f64>,
    pub latency_s: f64,
    pub records: Vec<ExecRecord>,
}

/// Row-private forward pass. Every data device fetches the weight slices
/// it lacks from their holders, encodes its own rows as `X_k·W_j`, and
/// uploads only those `m_k × w_j` encodings. The server places each block,
/// then applies the nonlinearity once.
pub fn encode_forward(
    plan: &SplitPlan,
    topology: &Topology,
    rows: &[DeviceRows],
    w: &DMatrix<f64>,
    activation: Activation,
    t0: f64,
) -> Result<EncodeOutput, TpError> {
    encode_at_depth(plan, topology, rows, w, activation, t0, 1)
}

fn encode_at_depth(
    plan: &SplitPlan,
    topology: &Topology,
    rows: &[DeviceRows],
    w: &DMatrix<f64>,
    activation: Activation,
    t0: f64,
    depth: usize,
) -> Result<EncodeOutput, TpError> {
    let total_rows: usize = rows.iter().map(|r| r.x.nrows()).sum();
    for r in rows {
        if r.x.ncols() != plan.task.k {
            return Err(TpError::DimensionMismatch(format!(
                "rows on `{}` have {} columns, plan expects {}",
                r.device,
                r.x.ncols(),
                plan.task.k
            )));
        }
    }
    check_dims(plan, w, plan.task.k, total_rows)?;
    plan.validate(topology)?;
    let k = plan.task.k;
    let server = &plan.server;
    let mut z = DMatrix::zeros(total_rows, plan.task.n);
    let mut records = Vec::new();
    let mut finish = t0;
    let mut received = 0u64;
    let mut row0 = 0;
    for r in rows {
        let mk = r.x.nrows();
        if mk == 0 {
            continue;
        }
        let mut busy = t0;
        let mut up_free = t0;
        for s in &plan.assignments {
            let shard_bytes = BYTES_PER_SCALAR * (k * s.width) as u64;
            let fetch = topology.transfer_latency(&s.device, &r.device, shard_bytes, t0)?;
            if s.device != r.device {
                records.push(ExecRecord::new(depth, "shard_transfer", &r.device, shard_bytes, t0, fetch));
            }
            let start = busy.max(t0 + fetch);
            let flops = 2.0 * mk as f64 * k as f64 * s.width as f64;
            let comp = topology.compute_latency(flops, &r.device)?;
            records.push(ExecRecord::new(depth, "encode_compute", &r.device, 0, start, comp));
            busy = start + comp;

            let enc = &r.x * weight_slice(w, s.offset, s.width);
            z.view_mut((row0, s.offset), (mk, s.width)).copy_from(&enc);

            let bytes = BYTES_PER_SCALAR * (mk * s.width) as u64;
            let up_start = busy.max(up_free);
            let up = topology.transfer_latency(&r.device, server, bytes, up_start)?;
            records.push(ExecRecord::new(depth, "encoding_uplink", &r.device, bytes, up_start, up));
            up_free = up_start + up;
            if &r.device != server {
                received += bytes;
            }
        }
        finish = finish.max(up_free);
        row0 += mk;
    }
    let merge = topology.compute_latency(merge_flops(total_rows, plan.task.n, received), server)?;
    records.push(ExecRecord::new(depth, "merge", server, received, finish, merge));
    finish += merge;
    Ok(EncodeOutput {
        output: activation.apply(&z),
        pre_activation: z,
        latency_s: finish - t0,
        records,
    })
}

/// One square parameter block reused at every depth.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSpec {
    pub depth: usize,
    pub shared_block: DMatrix<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct LoopOutput {
    pub output: DMatrix<f64>,
    pub latency_s: f64,
    /// Weight bytes held across devices, the same for every depth.
    pub param_bytes: u64,
    pub records: Vec<ExecRecord>,
}

/// Applies [`encode_forward`] `depth` times with the same block. Between
/// depths the server returns each device's activation rows to it.
pub fn looped_forward(
    spec: &LoopSpec,
    plan: &SplitPlan,
    topology: &Topology,
    rows: &[DeviceRows],
    t0: f64,
) -> Result<LoopOutput, TpError> {
    let b = &spec.shared_block;
    if b.nrows() != b.ncols() {
        return Err(TpError::NonSquareBlock { rows: b.nrows(), cols: b.ncols() });
    }
    if spec.depth == 0 {
        return Err(TpError::InvalidPlan("loop depth must be at least 1".into()));
    }
    let mut current: Vec<DeviceRows> = rows.to_vec();
    let mut t = t0;
    let mut records = Vec::new();
    let mut output = DMatrix::zeros(0, 0);
    for depth in 1..=spec.depth {
        if depth > 1 {
            let mut ready = t;
            let mut row0 = 0;
            for r in &mut current {
                let mk = r.x.nrows();
                r.x = output.rows(row0, mk).into_owned();
                row0 += mk;
                if mk == 0 {
                    continue;
                }
                let bytes = BYTES_PER_SCALAR * (mk * b.ncols()) as u64;
                let lat = topology.transfer_latency(&plan.server, &r.device, bytes, t)?;
                records.push(ExecRecord::new(depth, "activation_downlink", &r.device, bytes, t, lat));
                ready = ready.max(t + lat);
            }
            t = ready;
        }
        let step = encode_at_depth(plan, topology, &current, b, spec.activation, t, depth)?;
        t += step.latency_s;
        records.extend(step.records);
        output = step.output;
    }
    Ok(LoopOutput {
        output,
        latency_s: t - t0,
        param_bytes: plan.param_bytes(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{LinkState, NodeSpec, RateFn, Role};
    use crate::tparallel::{plan_split, round_latency, GemmTask};

    fn star(n: usize) -> (Topology, Vec<NodeId>) {
        let mut nodes = vec![NodeSpec::new("srv", 1e10, 1 << 40, Role::Server)];
        let mut links = Vec::new();
        let mut ids = Vec::new();
        for i in 0..n {
            let id = format!("d{i}");
            nodes.push(NodeSpec::new(&id, 1e8 * (i + 1) as f64, 1 << 30, Role::Device));
            links.push(LinkState::new("srv", &id, RateFn::Constant { bps: 1e6 * (i + 1) as f64 }, 1e-3));
            ids.push(NodeId(id));
        }
        (Topology::new(nodes, links, 0).unwrap(), ids)
    }

    #[test]
    fn executed_latency_matches_prediction() {
        let (t, ids) = star(3);
        let task = GemmTask::new(8, 8, 12).unwrap();
        let plan = plan_split(&task, &t, &"srv".into(), &ids).unwrap();
        let w = DMatrix::from_fn(8, 12, |i, j| (i * 12 + j) as f64 * 0.01);
        let x = DMatrix::from_fn(8, 8, |i, j| (i as f64 - j as f64) * 0.1);
        let ex = execute_split(&plan, &t, &w, &x, 0.0).unwrap();
        assert_eq!(ex.latency_s, plan.predicted_latency_s);
        let again = round_latency(&task, &t, &"srv".into(), &plan.widths(), 0.0).unwrap();
        assert_eq!(again, plan.predicted_latency_s);
    }

    #[test]
    fn single_slice_is_bitwise_monolithic() {
        let (t, ids) = star(1);
        let task = GemmTask::new(5, 7, 9).unwrap();
        let plan = plan_split(&task, &t, &"srv".into(), &ids).unwrap();
        let w = DMatrix::from_fn(7, 9, |i, j| ((i * 9 + j) as f64).sin());
        let x = DMatrix::from_fn(5, 7, |i, j| ((i * 7 + j) as f64).cos());
        assert_eq!(execute_split(&plan, &t, &w, &x, 0.0).unwrap().output, &x * &w);
    }

    #[test]
    fn zero_batch_gives_activation_of_zero() {
        let (t, ids) = star(2);
        let task = GemmTask::new(4, 3, 3).unwrap();
        let plan = plan_split(&task, &t, &"srv".into(), &ids).unwrap();
        let rows = vec![DeviceRows { device: ids[0].clone(), x: DMatrix::zeros(4, 3) }];
        let w = DMatrix::from_element(3, 3, 0.7);
        let out = encode_forward(&plan, &t, &rows, &w, Activation::Tanh, 0.0).unwrap();
        assert!(out.pre_activation.iter().all(|&v| v == 0.0));
        assert!(out.output.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_square_block_is_rejected() {
        let (t, ids) = star(1);
        let task = GemmTask::new(2, 3, 4).unwrap();
        let plan = plan_split(&task, &t, &"srv".into(), &ids).unwrap();
        let spec = LoopSpec { depth: 2, shared_block: DMatrix::zeros(3, 4), activation: Activation::Identity };
        let err = looped_forward(&spec, &plan, &t, &[], 0.0).unwrap_err();
        assert_eq!(err, TpError::NonSquareBlock { rows: 3, cols: 4 });
    }
}
