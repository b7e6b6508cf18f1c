//! Small sequence predictors over a flat parameter vector with hand-written
//! backpropagation.
//!
//! Inputs are `W` complex gains stacked as (re, im) pairs; outputs are the
//! next `H` gains in the same layout. The loss is the mean squared error
//! over all output components of a batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::channel::Window;
use super::ChanError;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    LinearAr,
    GruCell,
    /// Vanilla tanh recurrent cell.
    Rnn,
    AttnLora,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 4] =
        [PredictorKind::LinearAr, PredictorKind::GruCell, PredictorKind::Rnn, PredictorKind::AttnLora];

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::LinearAr => "linear_ar",
            PredictorKind::GruCell => "gru_cell",
            PredictorKind::Rnn => "rnn",
            PredictorKind::AttnLora => "attn_lora",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    pub window: usize,
    pub horizon: usize,
    pub hidden: usize,
    /// Adapter rank; attn_lora only.
    pub lora_rank: usize,
    /// attn_lora: train adapters and head only.
    pub freeze_base: bool,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self { kind: PredictorKind::LinearAr, window: 16, horizon: 4, hidden: 16, lora_rank: 2, freeze_base: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Blk {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Blk {
    fn len(self) -> usize {
        self.rows * self.cols
    }
    fn range(self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }
}

struct Alloc(usize);

impl Alloc {
    fn take(&mut self, rows: usize, cols: usize) -> Blk {
        let b = Blk { off: self.0, rows, cols };
        self.0 += rows * cols;
        b
    }
}

#[derive(Debug, Clone, Copy)]
struct Head {
    v: Blk,
    c: Blk,
}

#[derive(Debug, Clone, Copy)]
enum Layout {
    Linear { a: Blk, b: Blk },
    Rnn { wx: Blk, u: Blk, b: Blk, head: Head },
    /// Gates ordered reset, update, candidate.
    Gru { wx: [Blk; 3], u: [Blk; 3], b: [Blk; 3], head: Head },
    Attn { e: Blk, p: Blk, wq: Blk, wk: Blk, wv: Blk, wo: Blk, aq: Blk, bq: Blk, av: Blk, bv: Blk, head: Head },
}

impl PredictorSpec {
    pub fn validate(&self) -> Result<(), ChanError> {
        if self.window == 0 || self.horizon == 0 {
            return Err(ChanError::InvalidParameter("window and horizon must be at least 1".into()));
        }
        if self.kind != PredictorKind::LinearAr && self.hidden == 0 {
            return Err(ChanError::InvalidParameter("hidden width must be at least 1".into()));
        }
        if self.kind == PredictorKind::AttnLora && !(1..=self.hidden).contains(&self.lora_rank) {
            return Err(ChanError::InvalidParameter(format!(
                "lora rank {} out of range 1..={}",
                self.lora_rank, self.hidden
            )));
        }
        Ok(())
    }

    fn layout(&self) -> (Layout, usize) {
        let (w2, h2, n) = (2 * self.window, 2 * self.horizon, self.hidden);
        let mut al = Alloc(0);
        let layout = match self.kind {
            PredictorKind::LinearAr => Layout::Linear { a: al.take(h2, w2), b: al.take(h2, 1) },
            PredictorKind::Rnn => Layout::Rnn {
                wx: al.take(n, 2),
                u: al.take(n, n),
                b: al.take(n, 1),
                head: Head { v: al.take(h2, n), c: al.take(h2, 1) },
            },
            PredictorKind::GruCell => {
                let wx = [al.take(n, 2), al.take(n, 2), al.take(n, 2)];
                let u = [al.take(n, n), al.take(n, n), al.take(n, n)];
                let b = [al.take(n, 1), al.take(n, 1), al.take(n, 1)];
                Layout::Gru { wx, u, b, head: Head { v: al.take(h2, n), c: al.take(h2, 1) } }
            }
            PredictorKind::AttnLora => {
                let r = self.lora_rank;
                Layout::Attn {
                    e: al.take(n, 2),
                    p: al.take(self.window, n),
                    wq: al.take(n, n),
                    wk: al.take(n, n),
                    wv: al.take(n, n),
                    wo: al.take(n, n),
                    aq: al.take(r, n),
                    bq: al.take(n, r),
                    av: al.take(r, n),
                    bv: al.take(n, r),
                    head: Head { v: al.take(h2, n), c: al.take(h2, 1) },
                }
            }
        };
        (layout, al.0)
    }

    pub fn num_params(&self) -> usize {
        self.layout().1
    }

    /// Which coordinates SGD updates.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let (layout, total) = self.layout();
        let mut mask = vec![true; total];
        if let Layout::Attn { e, p, wq, wk, wv, wo, .. } = layout {
            if self.freeze_base {
                for b in [e, p, wq, wk, wv, wo] {
                    mask[b.range()].iter_mut().for_each(|m| *m = false);
                }
            }
        }
        mask
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_mask().iter().filter(|&&m| m).count()
    }

    /// Adapter coordinates (attn_lora); empty otherwise.
    pub fn adapter_params(&self) -> usize {
        match self.layout().0 {
            Layout::Attn { aq, bq, av, bv, .. } => aq.len() + bq.len() + av.len() + bv.len(),
            _ => 0,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mv(p: &[f64], b: Blk, x: &[f64]) -> Vec<f64> {
    (0..b.rows).map(|i| dot(&p[b.off + i * b.cols..b.off + (i + 1) * b.cols], x)).collect()
}

fn mtv(p: &[f64], b: Blk, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; b.cols];
    for (i, yi) in y.iter().enumerate() {
        let row = &p[b.off + i * b.cols..b.off + (i + 1) * b.cols];
        for (o, w) in out.iter_mut().zip(row) {
            *o += yi * w;
        }
    }
    out
}

fn outer(g: &mut [f64], b: Blk, dy: &[f64], x: &[f64]) {
    for (i, d) in dy.iter().enumerate() {
        let row = &mut g[b.off + i * b.cols..b.off + (i + 1) * b.cols];
        for (gj, xj) in row.iter_mut().zip(x) {
            *gj += d * xj;
        }
    }
}

fn add_to(g: &mut [f64], b: Blk, v: &[f64]) {
    for (gi, vi) in g[b.range()].iter_mut().zip(v) {
        *gi += vi;
    }
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, xi) in acc.iter_mut().zip(x) {
        *o += a * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bias(p: &[f64], b: Blk) -> &[f64] {
    &p[b.range()]
}

/// `W + B·A` as a dense `n × n` block stored in its own buffer.
fn lora_effective(p: &[f64], w: Blk, bm: Blk, am: Blk) -> Vec<f64> {
    let (n, r) = (w.rows, am.rows);
    let mut out = p[w.range()].to_vec();
    for i in 0..n {
        for k in 0..r {
            let bik = p[bm.off + i * r + k];
            if bik != 0.0 {
                axpy(&mut out[i * n..(i + 1) * n], bik, &p[am.off + k * n..am.off + (k + 1) * n]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub spec: PredictorSpec,
    pub params: Vec<f64>,
}

enum Cache {
    None,
    Rnn { hs: Vec<Vec<f64>> },
    Gru { steps: Vec<GruStep> },
    Attn(Box<AttnCache>),
}

struct GruStep {
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

struct AttnCache {
    es: Vec<Vec<f64>>,
    wq_eff: Vec<f64>,
    wv_eff: Vec<f64>,
    q: Vec<f64>,
    ks: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
    a: Vec<f64>,
    o: Vec<f64>,
    u: Vec<f64>,
}

impl Predictor {
    /// Seeded initialization; adapter `B` factors start at zero.
    pub fn init(spec: &PredictorSpec, seed: u64) -> Result<Self, ChanError> {
        spec.validate()?;
        let (layout, total) = spec.layout();
        let mut params = vec![0.0; total];
        let mut r = rng::rng(seed, &[rng::tag("chanpred-init")]);
        let mut fill = |params: &mut [f64], b: Blk, scale: f64| {
            for v in &mut params[b.range()] {
                *v = r.gen_range(-scale..scale);
            }
        };
        let glorot = |b: Blk| (6.0 / (b.rows + b.cols) as f64).sqrt();
        match layout {
            Layout::Linear { a, .. } => fill(&mut params, a, glorot(a)),
            Layout::Rnn { wx, u, head, .. } => {
                for b in [wx, u, head.v] {
                    fill(&mut params, b, glorot(b));
                }
            }
            Layout::Gru { wx, u, head, .. } => {
                for b in wx.into_iter().chain(u).chain([head.v]) {
                    fill(&mut params, b, glorot(b));
                }
            }
            Layout::Attn { e, p, wq, wk, wv, wo, aq, av, head, .. } => {
                for b in [e, wq, wk, wv, wo, aq, av, head.v] {
                    fill(&mut params, b, glorot(b));
                }
                fill(&mut params, p, 0.1);
            }
        }
        Ok(Self { spec: *spec, params })
    }

    pub fn from_params(spec: &PredictorSpec, params: Vec<f64>) -> Result<Self, ChanError> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(ChanError::InvalidParameter(format!(
                "expected {} parameters, got {}",
                spec.num_params(),
                params.len()
            )));
        }
        Ok(Self { spec: *spec, params })
    }

    fn check_window(&self, w: &Window) -> Result<(), ChanError> {
        if w.x.len() != 2 * self.spec.window || w.y.len() != 2 * self.spec.horizon {
            return Err(ChanError::InvalidParameter(format!(
                "window shape ({}, {}) does not match predictor ({}, {})",
                w.x.len() / 2,
                w.y.len() / 2,
                self.spec.window,
                self.spec.horizon
            )));
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Cache) {
        let p = &self.params;
        let (layout, _) = self.spec.layout();
        let steps = self.spec.window;
        let head = |h: &[f64], hd: Head| {
            let mut y = mv(p, hd.v, h);
            axpy(&mut y, 1.0, bias(p, hd.c));
            y
        };
        match layout {
            Layout::Linear { a, b } => {
                let mut y = mv(p, a, x);
                axpy(&mut y, 1.0, bias(p, b));
                (y, Cache::None)
            }
            Layout::Rnn { wx, u, b, head: hd } => {
                let mut hs = vec![vec![0.0; self.spec.hidden]];
                for t in 0..steps {
                    let mut a = mv(p, wx, &x[2 * t..2 * t + 2]);
                    axpy(&mut a, 1.0, &mv(p, u, &hs[t]));
                    axpy(&mut a, 1.0, bias(p, b));
                    hs.push(a.into_iter().map(f64::tanh).collect());
                }
                (head(&hs[steps], hd), Cache::Rnn { hs })
            }
            Layout::Gru { wx, u, b, head: hd } => {
                let mut h = vec![0.0; self.spec.hidden];
                let mut cache = Vec::with_capacity(steps);
                for t in 0..steps {
                    let xt = &x[2 * t..2 * t + 2];
                    let gate = |g: usize, hin: &[f64]| {
                        let mut a = mv(p, wx[g], xt);
                        axpy(&mut a, 1.0, &mv(p, u[g], hin));
                        axpy(&mut a, 1.0, bias(p, b[g]));
                        a
                    };
                    let r: Vec<f64> = gate(0, &h).into_iter().map(sigmoid).collect();
                    let z: Vec<f64> = gate(1, &h).into_iter().map(sigmoid).collect();
                    let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
                    let n: Vec<f64> = gate(2, &rh).into_iter().map(f64::tanh).collect();
                    let next: Vec<f64> = (0..h.len()).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect();
                    cache.push(GruStep { h_prev: std::mem::replace(&mut h, next), r, z, n, rh });
                }
                (head(&h, hd), Cache::Gru { steps: cache })
            }
            Layout::Attn { e, p: pos, wq, wk, wv, wo, aq, bq, av, bv, head: hd } => {
                let d = self.spec.hidden;
                let sq = Blk { off: 0, rows: d, cols: d };
                let es: Vec<Vec<f64>> = (0..steps)
                    .map(|t| {
                        let mut et = mv(p, e, &x[2 * t..2 * t + 2]);
                        axpy(&mut et, 1.0, &p[pos.off + t * d..pos.off + (t + 1) * d]);
                        et
                    })
                    .collect();
                let wq_eff = lora_effective(p, wq, bq, aq);
                let wv_eff = lora_effective(p, wv, bv, av);
                let last = &es[steps - 1];
                let q = mv(&wq_eff, sq, last);
                let ks: Vec<Vec<f64>> = es.iter().map(|et| mv(p, wk, et)).collect();
                let vs: Vec<Vec<f64>> = es.iter().map(|et| mv(&wv_eff, sq, et)).collect();
                let scale = 1.0 / (d as f64).sqrt();
                let s: Vec<f64> = ks.iter().map(|k| dot(&q, k) * scale).collect();
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                let a: Vec<f64> = ex.iter().map(|v| v / z).collect();
                let mut o = vec![0.0; d];
                for (at, vt) in a.iter().zip(&vs) {
                    axpy(&mut o, *at, vt);
                }
                let mut u = last.clone();
                axpy(&mut u, 1.0, &mv(p, wo, &o));
                let y = head(&u, hd);
                (y, Cache::Attn(Box::new(AttnCache { es, wq_eff, wv_eff, q, ks, vs, a, o, u })))
            }
        }
    }

    fn backward(&self, x: &[f64], cache: &Cache, dy: &[f64], g: &mut [f64]) {
        let p = &self.params;
        let (layout, _) = self.spec.layout();
        let head_back = |g: &mut [f64], hd: Head, h: &[f64]| {
            outer(g, hd.v, dy, h);
            add_to(g, hd.c, dy);
            mtv(p, hd.v, dy)
        };
        match (layout, cache) {
            (Layout::Linear { a, b }, _) => {
                outer(g, a, dy, x);
                add_to(g, b, dy);
            }
            (Layout::Rnn { wx, u, b, head: hd }, Cache::Rnn { hs }) => {
                let steps = hs.len() - 1;
                let mut dh = head_back(g, hd, &hs[steps]);
                for t in (0..steps).rev() {
                    let da: Vec<f64> = dh.iter().zip(&hs[t + 1]).map(|(d, h)| d * (1.0 - h * h)).collect();
                    outer(g, wx, &da, &x[2 * t..2 * t + 2]);
                    outer(g, u, &da, &hs[t]);
                    add_to(g, b, &da);
                    dh = mtv(p, u, &da);
                }
            }
            (Layout::Gru { wx, u, b, head: hd }, Cache::Gru { steps }) => {
                let last = steps.last().expect("window >= 1");
                let h_last: Vec<f64> =
                    (0..last.z.len()).map(|i| (1.0 - last.z[i]) * last.n[i] + last.z[i] * last.h_prev[i]).collect();
                let mut dh = head_back(g, hd, &h_last);
                for (t, st) in steps.iter().enumerate().rev() {
                    let xt = &x[2 * t..2 * t + 2];
                    let len = dh.len();
                    let mut dhp: Vec<f64> = (0..len).map(|i| dh[i] * st.z[i]).collect();
                    let dan: Vec<f64> = (0..len).map(|i| dh[i] * (1.0 - st.z[i]) * (1.0 - st.n[i] * st.n[i])).collect();
                    let daz: Vec<f64> =
                        (0..len).map(|i| dh[i] * (st.h_prev[i] - st.n[i]) * st.z[i] * (1.0 - st.z[i])).collect();
                    outer(g, wx[2], &dan, xt);
                    outer(g, u[2], &dan, &st.rh);
                    add_to(g, b[2], &dan);
                    let drh = mtv(p, u[2], &dan);
                    let dar: Vec<f64> = (0..len).map(|i| drh[i] * st.h_prev[i] * st.r[i] * (1.0 - st.r[i])).collect();
                    for i in 0..len {
                        dhp[i] += drh[i] * st.r[i];
                    }
                    for (gate, da) in [(1, &daz), (0, &dar)] {
                        outer(g, wx[gate], da, xt);
                        outer(g, u[gate], da, &st.h_prev);
                        add_to(g, b[gate], da);
                        axpy(&mut dhp, 1.0, &mtv(p, u[gate], da));
                    }
                    dh = dhp;
                }
            }
            (Layout::Attn { e, p: pos, wq, wk, wv, wo, aq, bq, av, bv, head: hd }, Cache::Attn(c)) => {
                let d = self.spec.hidden;
                let steps = c.es.len();
                let sq = Blk { off: 0, rows: d, cols: d };
                let du = head_back(g, hd, &c.u);
                let mut des = vec![vec![0.0; d]; steps];
                axpy(&mut des[steps - 1], 1.0, &du);
                outer(g, wo, &du, &c.o);
                let d_o = mtv(p, wo, &du);
                let da: Vec<f64> = c.vs.iter().map(|v| dot(&d_o, v)).collect();
                let mean = dot(&c.a, &da);
                let scale = 1.0 / (d as f64).sqrt();
                let ds: Vec<f64> = c.a.iter().zip(&da).map(|(a, g)| a * (g - mean) * scale).collect();
                let mut dq = vec![0.0; d];
                let mut dwv_eff = vec![0.0; d * d];
                for t in 0..steps {
                    axpy(&mut dq, ds[t], &c.ks[t]);
                    let dk: Vec<f64> = c.q.iter().map(|q| q * ds[t]).collect();
                    outer(g, wk, &dk, &c.es[t]);
                    axpy(&mut des[t], 1.0, &mtv(p, wk, &dk));
                    let dv: Vec<f64> = d_o.iter().map(|v| v * c.a[t]).collect();
                    outer(&mut dwv_eff, sq, &dv, &c.es[t]);
                    axpy(&mut des[t], 1.0, &mtv(&c.wv_eff, sq, &dv));
                }
                let mut dwq_eff = vec![0.0; d * d];
                outer(&mut dwq_eff, sq, &dq, &c.es[steps - 1]);
                axpy(&mut des[steps - 1], 1.0, &mtv(&c.wq_eff, sq, &dq));
                for (w, bm, am, dw) in [(wq, bq, aq, &dwq_eff), (wv, bv, av, &dwv_eff)] {
                    add_to(g, w, dw);
                    let r = am.rows;
                    // dB = dW·Aᵀ, dA = Bᵀ·dW
                    for i in 0..d {
                        for k in 0..r {
                            g[bm.off + i * r + k] += dot(&dw[i * d..(i + 1) * d], &p[am.off + k * d..am.off + (k + 1) * d]);
                            let bik = p[bm.off + i * r + k];
                            axpy(&mut g[am.off + k * d..am.off + (k + 1) * d], bik, &dw[i * d..(i + 1) * d]);
                        }
                    }
                }
                for (t, det) in des.iter().enumerate() {
                    outer(g, e, det, &x[2 * t..2 * t + 2]);
                    axpy(&mut g[pos.off + t * d..pos.off + (t + 1) * d], 1.0, det);
                }
            }
            _ => unreachable!("cache kind follows layout"),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).0
    }

    pub fn loss(&self, batch: &[Window]) -> Result<f64, ChanError> {
        if batch.is_empty() {
            return Err(ChanError::InsufficientData { needed: 1, got: 0 });
        }
        let mut s = 0.0;
        for w in batch {
            self.check_window(w)?;
            s += self.predict(&w.x).iter().zip(&w.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(s / (batch.len() * 2 * self.spec.horizon) as f64)
    }

    /// Batch loss and its gradient over every parameter (frozen ones
    /// included).
    pub fn loss_and_grad(&self, batch: &[Window]) -> Result<(f64, Vec<f64>), ChanError> {
        self.grad_refs(&batch.iter().collect::<Vec<_>>())
    }

    pub(crate) fn grad_refs(&self, batch: &[&Window]) -> Result<(f64, Vec<f64>), ChanError> {
        if batch.is_empty() {
            return Err(ChanError::InsufficientData { needed: 1, got: 0 });
        }
        let norm = (batch.len() * 2 * self.spec.horizon) as f64;
        let mut g = vec![0.0; self.params.len()];
        let mut s = 0.0;
        for w in batch {
            self.check_window(w)?;
            let (y, cache) = self.forward(&w.x);
            let dy: Vec<f64> = y.iter().zip(&w.y).map(|(a, b)| 2.0 * (a - b) / norm).collect();
            s += y.iter().zip(&w.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            self.backward(&w.x, &cache, &dy, &mut g);
        }
        Ok((s / norm, g))
    }
}
