//! Local and federated SGD for the channel predictors, plus the
//! federated-versus-local comparison harness.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::channel::{add_estimation_noise, gen_jakes, make_windows, Window};
use super::model::{Predictor, PredictorKind, PredictorSpec};
use super::ChanError;
use crate::rng;

/// Bytes per exchanged scalar.
pub const BYTES_PER_SCALAR: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOpts {
    pub steps: usize,
    pub lr: f64,
    /// Minibatch size drawn with replacement; `None` for full batch.
    pub batch: Option<usize>,
    /// Steps between logged evaluations.
    pub log_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub num_clients: usize,
    pub shard_fraction: f64,
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    pub batch: Option<usize>,
    pub seed: u64,
}

/// Windows the loss and NMSE are reported on.
#[derive(Debug, Clone, Copy)]
pub struct EvalData<'a> {
    pub train: &'a [Window],
    /// Held-out windows for NMSE; may be empty.
    pub heldout: &'a [Window],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    /// Loss on the evaluation windows after each round (or log interval).
    pub round_loss: Vec<f64>,
    pub final_loss: f64,
    pub nmse: Option<f64>,
    pub bytes_per_round: u64,
    pub params: Vec<f64>,
}

fn batch_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    rng::rng(seed, &[rng::tag("chanpred-batch"), stream])
}

fn sgd_steps(
    pred: &mut Predictor,
    mask: &[bool],
    shard: &[Window],
    steps: usize,
    lr: f64,
    batch: Option<usize>,
    r: &mut ChaCha8Rng,
) -> Result<(), ChanError> {
    for step in 0..steps {
        let picked: Vec<&Window> = match batch {
            None => shard.iter().collect(),
            Some(b) => (0..b).map(|_| &shard[r.gen_range(0..shard.len())]).collect(),
        };
        let (loss, g) = pred.grad_refs(&picked)?;
        if !loss.is_finite() {
            return Err(ChanError::Diverged { step });
        }
        for ((p, gi), m) in pred.params.iter_mut().zip(&g).zip(mask) {
            if *m {
                *p -= lr * gi;
            }
        }
    }
    Ok(())
}

fn finish(pred: &Predictor, eval: &EvalData<'_>, initial_loss: f64, round_loss: Vec<f64>, bytes: u64) -> Result<TrainReport, ChanError> {
    let final_loss = *round_loss.last().unwrap_or(&initial_loss);
    if !final_loss.is_finite() {
        return Err(ChanError::Diverged { step: round_loss.len() });
    }
    let nmse = if eval.heldout.is_empty() { None } else { Some(nmse_windows(pred, eval.heldout)?) };
    Ok(TrainReport { initial_loss, round_loss, final_loss, nmse, bytes_per_round: bytes, params: pred.params.clone() })
}

fn check_opts(shard: &[Window], lr: f64, batch: Option<usize>) -> Result<(), ChanError> {
    if shard.is_empty() {
        return Err(ChanError::InsufficientData { needed: 1, got: 0 });
    }
    if !(lr > 0.0 && lr.is_finite()) || batch == Some(0) {
        return Err(ChanError::InvalidConfig(format!("need lr > 0 and batch >= 1, got lr={lr}, batch={batch:?}")));
    }
    Ok(())
}

/// SGD on one shard; minibatches come from stream `stream` of `seed`.
pub fn train_local_stream(
    init: &Predictor,
    shard: &[Window],
    opts: &TrainOpts,
    eval: &EvalData<'_>,
    seed: u64,
    stream: u64,
) -> Result<TrainReport, ChanError> {
    check_opts(shard, opts.lr, opts.batch)?;
    let mut pred = init.clone();
    let mask = pred.spec.trainable_mask();
    let mut r = batch_stream(seed, stream);
    let initial_loss = pred.loss(eval.train)?;
    let every = opts.log_every.max(1);
    let mut round_loss = Vec::new();
    let mut done = 0;
    while done < opts.steps {
        let n = every.min(opts.steps - done);
        sgd_steps(&mut pred, &mask, shard, n, opts.lr, opts.batch, &mut r)?;
        done += n;
        round_loss.push(pred.loss(eval.train)?);
    }
    finish(&pred, eval, initial_loss, round_loss, 0)
}

pub fn train_local(
    init: &Predictor,
    shard: &[Window],
    opts: &TrainOpts,
    eval: &EvalData<'_>,
    seed: u64,
) -> Result<TrainReport, ChanError> {
    train_local_stream(init, shard, opts, eval, seed, 0)
}

/// Federated averaging: every round each client runs `local_steps` of SGD
/// from the global parameters and the server moves the global model by the
/// mean client delta, anchored at client 0 so identical updates average
/// exactly.
pub fn train_federated(
    init: &Predictor,
    shards: &[Vec<Window>],
    fed: &FedConfig,
    eval: &EvalData<'_>,
) -> Result<TrainReport, ChanError> {
    if shards.is_empty() || shards.len() != fed.num_clients {
        return Err(ChanError::InvalidConfig(format!(
            "{} shards for {} clients",
            shards.len(),
            fed.num_clients
        )));
    }
    for s in shards {
        check_opts(s, fed.lr, fed.batch)?;
    }
    let mut global = init.clone();
    let mask = global.spec.trainable_mask();
    let mut streams: Vec<ChaCha8Rng> = (0..shards.len()).map(|i| batch_stream(fed.seed, i as u64)).collect();
    let initial_loss = global.loss(eval.train)?;
    let n = shards.len() as f64;
    let mut round_loss = Vec::with_capacity(fed.rounds);
    for _ in 0..fed.rounds {
        let mut locals = Vec::with_capacity(shards.len());
        for (shard, r) in shards.iter().zip(&mut streams) {
            let mut local = global.clone();
            sgd_steps(&mut local, &mask, shard, fed.local_steps, fed.lr, fed.batch, r)?;
            locals.push(local.params);
        }
        let anchor = &locals[0];
        for (k, g) in global.params.iter_mut().enumerate() {
            let spread: f64 = locals.iter().map(|l| l[k] - anchor[k]).sum();
            *g = anchor[k] + spread / n;
        }
        round_loss.push(global.loss(eval.train)?);
    }
    let bytes = 2 * fed.num_clients as u64 * global.spec.num_trainable() as u64 * BYTES_PER_SCALAR;
    finish(&global, eval, initial_loss, round_loss, bytes)
}

fn nmse_windows(pred: &Predictor, windows: &[Window]) -> Result<f64, ChanError> {
    let (mut err, mut pow) = (0.0, 0.0);
    for w in windows {
        let y = pred.predict(&w.x);
        err += y.iter().zip(&w.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        pow += w.y.iter().map(|b| b * b).sum::<f64>();
    }
    Ok(err / pow)
}

/// `Σ|ĥ − h|² / Σ|h|²` over every window of the series.
pub fn evaluate_nmse(pred: &Predictor, series: &[Complex64]) -> Result<f64, ChanError> {
    let windows = make_windows(series, pred.spec.window, pred.spec.horizon)?;
    nmse_windows(pred, &windows)
}

/// Disjoint iid shards, each `fraction` of the shuffled pool.
pub fn make_shards(pool: &[Window], num_clients: usize, fraction: f64, seed: u64) -> Result<Vec<Vec<Window>>, ChanError> {
    if num_clients == 0 || !(fraction > 0.0) || fraction * num_clients as f64 > 1.0 + 1e-12 {
        return Err(ChanError::InvalidConfig(format!(
            "{num_clients} clients with shard fraction {fraction} do not fit in the pool"
        )));
    }
    let size = (fraction * pool.len() as f64).floor() as usize;
    if size == 0 {
        return Err(ChanError::InsufficientData { needed: (1.0 / fraction).ceil() as usize, got: pool.len() });
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng::rng(seed, &[rng::tag("shards")]));
    Ok((0..num_clients).map(|c| idx[c * size..(c + 1) * size].iter().map(|&i| pool[i].clone()).collect()).collect())
}

/// Up to `max` windows taken round-robin across shards.
pub fn eval_subset(shards: &[Vec<Window>], max: usize) -> Vec<Window> {
    let longest = shards.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    'outer: for i in 0..longest {
        for s in shards {
            if out.len() == max {
                break 'outer;
            }
            if let Some(w) = s.get(i) {
                out.push(w.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChanpredConfig {
    pub doppler_hz: f64,
    pub sample_period_s: f64,
    pub num_paths: usize,
    /// Independent realizations making up the training pool.
    pub pool_series: usize,
    pub series_len: usize,
    pub heldout_len: usize,
    /// Per-component std of CSI estimation noise.
    pub noise_std: f64,
    pub window: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub lora_rank: usize,
    pub freeze_base: bool,
    pub models: Vec<PredictorKind>,
    pub clients: Vec<usize>,
    pub shard_fraction: f64,
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    /// Minibatch size; 0 for full batch.
    pub batch: usize,
    pub eval_windows: usize,
}

impl Default for ChanpredConfig {
    fn default() -> Self {
        Self {
            doppler_hz: 10.0,
            sample_period_s: 1e-3,
            num_paths: 32,
            pool_series: 100,
            series_len: 200,
            heldout_len: 1000,
            noise_std: 0.05,
            window: 16,
            horizon: 4,
            hidden: 16,
            lora_rank: 2,
            freeze_base: true,
            models: vec![PredictorKind::LinearAr, PredictorKind::GruCell, PredictorKind::Rnn, PredictorKind::AttnLora],
            clients: vec![2, 6, 10],
            shard_fraction: 0.05,
            rounds: 30,
            local_steps: 5,
            lr: 0.2,
            batch: 8,
            eval_windows: 256,
        }
    }
}

impl ChanpredConfig {
    pub fn spec(&self, kind: PredictorKind) -> PredictorSpec {
        PredictorSpec {
            kind,
            window: self.window,
            horizon: self.horizon,
            hidden: self.hidden,
            lora_rank: self.lora_rank,
            freeze_base: self.freeze_base,
        }
    }

    pub fn batch(&self) -> Option<usize> {
        (self.batch > 0).then_some(self.batch)
    }

    pub fn validate(&self) -> Result<(), ChanError> {
        for k in &self.models {
            self.spec(*k).validate()?;
        }
        let max_clients = self.clients.iter().copied().max().unwrap_or(0);
        if self.models.is_empty() || self.clients.is_empty() || self.clients.contains(&0) || max_clients > 10 {
            return Err(ChanError::InvalidConfig("need at least one model and client counts in 1..=10".into()));
        }
        if self.shard_fraction * max_clients as f64 > 1.0 + 1e-12 || self.shard_fraction <= 0.0 {
            return Err(ChanError::InvalidConfig(format!(
                "shard fraction {} times {max_clients} clients exceeds the pool",
                self.shard_fraction
            )));
        }
        if self.rounds == 0 || self.local_steps == 0 || self.eval_windows == 0 || !(self.lr > 0.0) {
            return Err(ChanError::InvalidConfig("rounds, local_steps, eval_windows and lr must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(ChanError::InvalidParameter("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    fn series(&self, len: usize, seed: u64) -> Result<Vec<Complex64>, ChanError> {
        let mut s = gen_jakes(self.doppler_hz, self.sample_period_s, len, self.num_paths, seed)?.samples;
        add_estimation_noise(&mut s, self.noise_std, seed)?;
        Ok(s)
    }

    /// Training pool: windows of independent noisy realizations.
    pub fn pool(&self, seed: u64) -> Result<Vec<Window>, ChanError> {
        let mut out = Vec::new();
        for i in 0..self.pool_series {
            let s = self.series(self.series_len, rng::derive_seed(seed, &[rng::tag("pool"), i as u64]))?;
            out.extend(make_windows(&s, self.window, self.horizon)?);
        }
        Ok(out)
    }

    pub fn heldout(&self, seed: u64) -> Result<Vec<Window>, ChanError> {
        let s = self.series(self.heldout_len, rng::derive_seed(seed, &[rng::tag("heldout")]))?;
        make_windows(&s, self.window, self.horizon)
    }
}

/// One point of a plotted loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub round: usize,
    /// `federated_<model>` or `local_<model>` (median over clients).
    pub setting: String,
    pub num_clients: usize,
    pub loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub model: PredictorKind,
    pub num_clients: usize,
    pub federated_loss: f64,
    pub local_losses: Vec<f64>,
    pub local_median: f64,
    pub federated_nmse: f64,
    pub local_median_nmse: f64,
    pub bytes_per_round: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyReport {
    pub seed: u64,
    pub rows: Vec<LossRow>,
    pub summaries: Vec<CaseSummary>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Federated training against local-only training on each client's shard,
/// for every configured model and client count. Every run is scored on the
/// same windows drawn from the union of the largest configuration's shards.
pub fn run_case_study(cfg: &ChanpredConfig, seed: u64) -> Result<CaseStudyReport, ChanError> {
    cfg.validate()?;
    let pool = cfg.pool(seed)?;
    let heldout = cfg.heldout(seed)?;
    let max_clients = cfg.clients.iter().copied().max().unwrap_or(1);
    // Nested: an N-client run uses the first N shards of one partition.
    let all_shards = make_shards(&pool, max_clients, cfg.shard_fraction, rng::derive_seed(seed, &[rng::tag("shards")]))?;
    // One evaluation set for every client count so losses are comparable.
    let train = eval_subset(&all_shards, cfg.eval_windows);
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &kind in &cfg.models {
        let init = Predictor::init(&cfg.spec(kind), rng::derive_seed(seed, &[rng::tag(kind.name())]))?;
        for &n in &cfg.clients {
            let shards = &all_shards[..n];
            let eval = EvalData { train: &train, heldout: &heldout };
            let run_seed = rng::derive_seed(seed, &[rng::tag(kind.name()), n as u64]);
            let fed = FedConfig {
                num_clients: n,
                shard_fraction: cfg.shard_fraction,
                rounds: cfg.rounds,
                local_steps: cfg.local_steps,
                lr: cfg.lr,
                batch: cfg.batch(),
                seed: run_seed,
            };
            let fed_rep = train_federated(&init, shards, &fed, &eval)?;
            let opts = TrainOpts { steps: cfg.rounds * cfg.local_steps, lr: cfg.lr, batch: cfg.batch(), log_every: cfg.local_steps };
            let locals: Vec<TrainReport> = shards
                .iter()
                .enumerate()
                .map(|(i, s)| train_local_stream(&init, s, &opts, &eval, run_seed, i as u64))
                .collect::<Result<_, _>>()?;
            let fed_name = format!("federated_{}", kind.name());
            let local_name = format!("local_{}", kind.name());
            for r in 0..=cfg.rounds {
                let at = |rep: &TrainReport| if r == 0 { rep.initial_loss } else { rep.round_loss[r - 1] };
                rows.push(LossRow { round: r, setting: fed_name.clone(), num_clients: n, loss: at(&fed_rep), seed });
                let ls: Vec<f64> = locals.iter().map(at).collect();
                rows.push(LossRow { round: r, setting: local_name.clone(), num_clients: n, loss: median(&ls), seed });
            }
            let local_losses: Vec<f64> = locals.iter().map(|l| l.final_loss).collect();
            let local_nmse: Vec<f64> = locals.iter().map(|l| l.nmse.unwrap_or(f64::NAN)).collect();
            summaries.push(CaseSummary {
                model: kind,
                num_clients: n,
                federated_loss: fed_rep.final_loss,
                local_median: median(&local_losses),
                local_losses,
                federated_nmse: fed_rep.nmse.unwrap_or(f64::NAN),
                local_median_nmse: median(&local_nmse),
                bytes_per_round: fed_rep.bytes_per_round,
            });
        }
    }
    Ok(CaseStudyReport { seed, rows, summaries })
}
