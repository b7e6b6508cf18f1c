//! Synthetic classification task and the device-side task module.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;

use super::model::{gaussian, ModelPartition};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Fine-tuning target: labels come from the frozen stack with a planted
/// rank-one shift `W + γ·u·vᵀ/d` per layer, read out by the initial task
/// head. The shift lies in the span a rank-one adapter can represent.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    shifted: Vec<DMatrix<f64>>,
    head: DMatrix<f64>,
    seq_len: usize,
}

/// Spectral scale of the planted shift.
pub const SHIFT_SCALE: f64 = 1.5;

impl SyntheticTask {
    pub fn new(partition: &ModelPartition, seq_len: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed, &[rng::tag("teacher")]);
        let d = partition.d_model();
        let shifted = partition
            .decoder()
            .iter()
            .map(|w| {
                let u = gaussian(&mut r, d, 1, 1.0);
                let v = gaussian(&mut r, 1, d, 1.0);
                w + (u * v) * (SHIFT_SCALE / d as f64)
            })
            .collect();
        Self {
            shifted,
            head: partition.task_head.clone(),
            seq_len: seq_len.max(1),
        }
    }

    pub fn draw<R: Rng>(&self, partition: &ModelPartition, r: &mut R) -> Sample {
        let tokens: Vec<usize> = (0..self.seq_len)
            .map(|_| r.gen_range(0..partition.vocab()))
            .collect();
        let repr = self
            .shifted
            .iter()
            .fold(partition.embed(&tokens), |x, w| (w * x).map(f64::tanh));
        let scores = self.head.transpose() * repr;
        Sample {
            tokens,
            label: scores.imax(),
        }
    }

    pub fn dataset(&self, partition: &ModelPartition, n: usize, seed: u64, tags: &[u64]) -> Vec<Sample> {
        let mut r = rng::rng(seed, tags);
        (0..n).map(|_| self.draw(partition, &mut r)).collect()
    }
}

/// Uniform minibatch without replacement (whole shard if it is smaller).
pub fn minibatch<R: Rng>(shard: &[Sample], batch: usize, r: &mut R) -> Vec<Sample> {
    if batch == 0 || batch >= shard.len() {
        return shard.to_vec();
    }
    let mut idx = sample(r, shard.len(), batch).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| shard[i].clone()).collect()
}

/// Loss and gradients computed on a device from its received representations.
#[derive(Debug, Clone)]
pub struct DeviceLossGrad {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Per-sample `∂ℓᵢ/∂rᵢ`, the Jacobian vectors sent upstream.
    pub jacobians: Vec<DVector<f64>>,
    /// Mean gradient of the local task head.
    pub head_grad: DMatrix<f64>,
}

pub fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let m = z.max();
    let e = z.map(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

pub fn cross_entropy(head: &DMatrix<f64>, repr: &DVector<f64>, label: usize) -> f64 {
    let logits = head.transpose() * repr;
    let m = logits.max();
    let lse = m + logits.map(|v| (v - m).exp()).sum().ln();
    lse - logits[label]
}

pub fn device_loss_grad(head: &DMatrix<f64>, reprs: &[DVector<f64>], labels: &[usize]) -> DeviceLossGrad {
    let n = reprs.len().max(1) as f64;
    let mut loss = 0.0;
    let mut head_grad = DMatrix::zeros(head.nrows(), head.ncols());
    let mut jacobians = Vec::with_capacity(reprs.len());
    for (r, &y) in reprs.iter().zip(labels) {
        let logits = head.transpose() * r;
        let mut p = softmax(&logits);
        loss += cross_entropy(head, r, y);
        p[y] -= 1.0;
        jacobians.push(head * &p);
        head_grad += r * p.transpose();
    }
    DeviceLossGrad {
        loss: loss / n,
        jacobians,
        head_grad: head_grad / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedft::model::partition_model;

    #[test]
    fn jacobian_matches_finite_difference() {
        let p = partition_model(&[6], 8, 3, 5).unwrap();
        let r = DVector::from_fn(6, |i, _| 0.3 * i as f64 - 0.7);
        let g = device_loss_grad(&p.task_head, std::slice::from_ref(&r), &[2]);
        let h = 1e-6;
        for i in 0..6 {
            let mut up = r.clone();
            up[i] += h;
            let mut dn = r.clone();
            dn[i] -= h;
            let fd = (cross_entropy(&p.task_head, &up, 2) - cross_entropy(&p.task_head, &dn, 2)) / (2.0 * h);
            assert!((fd - g.jacobians[0][i]).abs() < 1e-8);
        }
    }

    #[test]
    fn minibatch_is_sorted_subset() {
        let p = partition_model(&[4], 8, 2, 5).unwrap();
        let task = SyntheticTask::new(&p, 3, 1);
        let data = task.dataset(&p, 20, 1, &[0]);
        let mb = minibatch(&data, 5, &mut rng::rng(0, &[]));
        assert_eq!(mb.len(), 5);
        assert!(mb.iter().all(|s| data.contains(s)));
        assert_eq!(minibatch(&data, 0, &mut rng::rng(0, &[])).len(), 20);
    }
}
