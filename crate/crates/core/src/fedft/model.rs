//! Three-way model split and the low-rank adapters trained on the server.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::FedError;
use crate::rng;

/// Embedding and task modules live on devices, the frozen decoder stack on
/// the server.
#[derive(Debug, Clone)]
pub struct ModelPartition {
    /// `vocab × d`; row `t` is the vector for token `t`.
    pub embedding: DMatrix<f64>,
    decoder: Vec<DMatrix<f64>>,
    /// `d × classes` initial task head; every device starts from a copy.
    pub task_head: DMatrix<f64>,
}

impl ModelPartition {
    pub fn d_model(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn vocab(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn classes(&self) -> usize {
        self.task_head.ncols()
    }

    pub fn num_layers(&self) -> usize {
        self.decoder.len()
    }

    /// Frozen decoder weights; there is deliberately no mutable accessor.
    pub fn decoder(&self) -> &[DMatrix<f64>] {
        &self.decoder
    }

    pub fn decoder_param_count(&self) -> usize {
        self.decoder.iter().map(|w| w.len()).sum()
    }

    /// Device-side embedding: mean of the token vectors.
    pub fn embed(&self, tokens: &[usize]) -> DVector<f64> {
        let d = self.d_model();
        let mut x = DVector::zeros(d);
        for &t in tokens {
            x += self.embedding.row(t).transpose();
        }
        if !tokens.is_empty() {
            x /= tokens.len() as f64;
        }
        x
    }
}

/// Builds a partition with one `d × d` frozen layer per entry of
/// `layer_widths`. The stack is chained, so all widths must agree.
pub fn partition_model(
    layer_widths: &[usize],
    vocab: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelPartition, FedError> {
    let Some(&d) = layer_widths.first() else {
        return Err(FedError::InvalidWidth("at least one decoder layer is required".into()));
    };
    if d == 0 || vocab == 0 || classes == 0 {
        return Err(FedError::InvalidWidth("dimensions must be positive".into()));
    }
    if layer_widths.iter().any(|&w| w != d) {
        return Err(FedError::InvalidWidth(format!(
            "chained square layers need equal widths, got {layer_widths:?}"
        )));
    }
    let mut r = rng::rng(seed, &[rng::tag("partition")]);
    let std = 1.0 / (d as f64).sqrt();
    let embedding = gaussian(&mut r, vocab, d, 1.0);
    let decoder = layer_widths
        .iter()
        .map(|_| gaussian(&mut r, d, d, std))
        .collect();
    let task_head = gaussian(&mut r, d, classes, std);
    Ok(ModelPartition {
        embedding,
        decoder,
        task_head,
    })
}

pub(crate) fn gaussian<R: Rng>(r: &mut R, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    // Fill row-major so the draw order does not depend on storage layout.
    let vals: Vec<f64> = (0..rows * cols)
        .map(|_| std * r.sample::<f64, _>(StandardNormal))
        .collect();
    DMatrix::from_row_slice(rows, cols, &vals)
}

/// Low-rank update `scale · B·A` added to one frozen layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r × d`
    pub a: DMatrix<f64>,
    /// `d × r`, zero at initialization.
    pub b: DMatrix<f64>,
    pub alpha: f64,
    pub layer_index: usize,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `W + scale·B·A`, for inspection and tests.
    pub fn effective_weight(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        w + (&self.b * &self.a) * self.scale()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub layers: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn rank(&self) -> usize {
        self.layers.first().map_or(0, LoraAdapter::rank)
    }

    pub fn apply_sgd(&mut self, grads: &AdapterGrads, lr: f64) {
        for (ad, (ga, gb)) in self.layers.iter_mut().zip(grads.a.iter().zip(&grads.b)) {
            ad.a -= ga * lr;
            ad.b -= gb * lr;
        }
    }

    /// Flat parameter view (A then B per layer, column-major).
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.a.iter().chain(l.b.iter()).copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for v in l.a.iter_mut().chain(l.b.iter_mut()) {
                *v = it.next().expect("flat vector too short");
            }
        }
    }
}

/// Largest rank whose adapters stay within `fraction` of the frozen decoder's
/// parameter count: `⌊fraction·Σd² / Σ2d⌋`.
pub fn budget_rank(partition: &ModelPartition, fraction: f64) -> Result<usize, FedError> {
    let frozen = partition.decoder_param_count() as f64;
    let per_rank = (2 * partition.d_model() * partition.num_layers()) as f64;
    let r = (fraction * frozen / per_rank).floor() as usize;
    if r == 0 {
        return Err(FedError::RankOutOfRange {
            rank: 0,
            d_model: partition.d_model(),
        });
    }
    Ok(r.min(partition.d_model()))
}

/// One adapter per decoder layer: `A ~ N(0, 1/d)`, `B = 0`.
pub fn attach_lora(
    partition: &ModelPartition,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<AdapterSet, FedError> {
    let d = partition.d_model();
    if rank == 0 || rank > d {
        return Err(FedError::RankOutOfRange { rank, d_model: d });
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(FedError::InvalidConfig("lora alpha must be positive".into()));
    }
    let mut r = rng::rng(seed, &[rng::tag("lora")]);
    let std = 1.0 / (d as f64).sqrt();
    let layers = (0..partition.num_layers())
        .map(|layer_index| LoraAdapter {
            a: gaussian(&mut r, rank, d, std),
            b: DMatrix::zeros(d, rank),
            alpha,
            layer_index,
        })
        .collect();
    Ok(AdapterSet { layers })
}

/// Gradients with the same shapes as an [`AdapterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

impl AdapterGrads {
    pub fn zeros_like(set: &AdapterSet) -> Self {
        Self {
            a: set.layers.iter().map(|l| DMatrix::zeros(l.a.nrows(), l.a.ncols())).collect(),
            b: set.layers.iter().map(|l| DMatrix::zeros(l.b.nrows(), l.b.ncols())).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .flat_map(|(a, b)| a.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|&v| v == 0.0)
    }

    fn zip_map(&self, other: &Self, f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>) -> Self {
        Self {
            a: self.a.iter().zip(&other.a).map(|(x, y)| f(x, y)).collect(),
            b: self.b.iter().zip(&other.b).map(|(x, y)| f(x, y)).collect(),
        }
    }

    /// Uniform mean, anchored at the first entry: `g₀ + Σ(gₖ − g₀)/K`.
    /// Identical inputs therefore average to themselves bit-for-bit.
    pub fn mean(grads: &[AdapterGrads]) -> Option<AdapterGrads> {
        let first = grads.first()?;
        let k = grads.len() as f64;
        let mut acc = first.zip_map(first, |x, _| DMatrix::zeros(x.nrows(), x.ncols()));
        for g in grads {
            acc = acc.zip_map(&g.zip_map(first, |x, y| x - y), |s, d| s + d);
        }
        Some(first.zip_map(&acc, |f, s| f + s / k))
    }
}

/// Activations of one adapted layer kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: DVector<f64>,
    /// `A·x`
    pub down: DVector<f64>,
    pub output: DVector<f64>,
}

/// Server-side decoder pass: `x ↦ tanh(W·x + scale·B·(A·x))` per layer.
pub fn decoder_forward(
    partition: &ModelPartition,
    adapters: &AdapterSet,
    x0: &DVector<f64>,
) -> (DVector<f64>, Vec<LayerCache>) {
    let mut x = x0.clone();
    let mut caches = Vec::with_capacity(partition.num_layers());
    for (w, ad) in partition.decoder.iter().zip(&adapters.layers) {
        let down = &ad.a * &x;
        let z = w * &x + (&ad.b * &down) * ad.scale();
        let out = z.map(f64::tanh);
        caches.push(LayerCache {
            input: x,
            down,
            output: out.clone(),
        });
        x = out;
    }
    (x, caches)
}

/// The frozen model alone, evaluated in the same operation order as
/// [`decoder_forward`] with a zero update.
pub fn frozen_forward(partition: &ModelPartition, x0: &DVector<f64>) -> DVector<f64> {
    partition
        .decoder
        .iter()
        .fold(x0.clone(), |x, w| (w * &x).map(f64::tanh))
}

/// Chain-rules `weight · ∂ℓ/∂repr` back through the decoder, accumulating
/// adapter gradients into `grads`. Returns `∂ℓ/∂x₀` (scaled by `weight`).
pub fn decoder_backward(
    partition: &ModelPartition,
    adapters: &AdapterSet,
    caches: &[LayerCache],
    grad_repr: &DVector<f64>,
    weight: f64,
    grads: &mut AdapterGrads,
) -> DVector<f64> {
    let mut g = grad_repr * weight;
    for (l, cache) in caches.iter().enumerate().rev() {
        let ad = &adapters.layers[l];
        let s = ad.scale();
        let delta = g.component_mul(&cache.output.map(|y| 1.0 - y * y));
        let bt_delta = ad.b.transpose() * &delta;
        grads.b[l] += (&delta * cache.down.transpose()) * s;
        grads.a[l] += (&bt_delta * cache.input.transpose()) * s;
        g = partition.decoder[l].transpose() * &delta + ad.a.transpose() * bt_delta * s;
    }
    g
}
