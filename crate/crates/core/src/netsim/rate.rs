//! Piecewise-constant link rate functions and flow-level transfer timing.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::NetError;
use crate::rng;

/// Default step of the block-fading grid, in seconds.
pub const DEFAULT_STEP_S: f64 = 0.01;

/// Achievable link rate as a function of time, in bits per second.
///
/// All variants are piecewise constant, so the transferred volume over an
/// interval is a finite sum and replays exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum RateFn {
    Constant { bps: f64 },
    /// Sorted `(start_s, bps)` breakpoints; the first starts at 0 and the
    /// last extends forever.
    Steps { segments: Vec<(f64, f64)> },
    /// Block Rayleigh fading: on `[k·step, (k+1)·step)` the rate is
    /// `mean_bps · max(floor, E_k)` with `E_k ~ Exp(1)` drawn from
    /// `(seed, k)`, i.e. the power gain of a unit Rayleigh channel.
    BlockFading {
        mean_bps: f64,
        step_s: f64,
        floor: f64,
        seed: u64,
    },
}

impl RateFn {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |reason: &str| Err(NetError::InvalidRate(reason.to_string()));
        match self {
            RateFn::Constant { bps } => {
                if !(bps.is_finite() && *bps > 0.0) {
                    return bad("constant rate must be positive and finite");
                }
            }
            RateFn::Steps { segments } => {
                if segments.is_empty() {
                    return bad("step schedule needs at least one segment");
                }
                if segments[0].0 != 0.0 {
                    return bad("first segment must start at t = 0");
                }
                for w in segments.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return bad("segment start times must be strictly increasing");
                    }
                }
                if segments.iter().any(|&(_, r)| !(r.is_finite() && r > 0.0)) {
                    return bad("segment rates must be positive and finite");
                }
            }
            RateFn::BlockFading {
                mean_bps,
                step_s,
                floor,
                ..
            } => {
                if !(mean_bps.is_finite() && *mean_bps > 0.0) {
                    return bad("fading mean rate must be positive");
                }
                if !(step_s.is_finite() && *step_s > 0.0) {
                    return bad("fading step must be positive");
                }
                if !(floor.is_finite() && *floor > 0.0) {
                    return bad("fading floor must be positive so the rate never vanishes");
                }
            }
        }
        Ok(())
    }

    /// Rate in force at time `t` and the time at which it next changes.
    pub fn segment_at(&self, t: f64) -> (f64, f64) {
        match self {
            RateFn::Constant { bps } => (*bps, f64::INFINITY),
            RateFn::Steps { segments } => {
                let idx = segments.partition_point(|&(start, _)| start <= t).max(1) - 1;
                let next = segments.get(idx + 1).map_or(f64::INFINITY, |s| s.0);
                (segments[idx].1, next)
            }
            RateFn::BlockFading {
                mean_bps,
                step_s,
                floor,
                seed,
            } => {
                let mut k = (t / step_s).floor().max(0.0) as u64;
                // Guard against t sitting exactly on a boundary that rounds down.
                if (k + 1) as f64 * step_s <= t {
                    k += 1;
                }
                let gain: f64 = Exp1.sample(&mut rng::rng(*seed, &[k]));
                (mean_bps * gain.max(*floor), (k + 1) as f64 * step_s)
            }
        }
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        self.segment_at(t).0
    }

    /// Time needed to push `bits` through the link starting at `t0`, capped
    /// by `horizon_s`.
    pub fn drain_time(&self, bits: f64, t0: f64, horizon_s: f64) -> Result<f64, NetError> {
        if bits <= 0.0 {
            return Ok(0.0);
        }
        let mut remaining = bits;
        let mut t = t0;
        loop {
            if t >= horizon_s {
                return Err(NetError::HorizonExceeded {
                    start_s: t0,
                    horizon_s,
                    remaining_bits: remaining,
                });
            }
            let (rate, next) = self.segment_at(t);
            let end = next.min(horizon_s);
            let capacity = rate * (end - t);
            if capacity >= remaining {
                return Ok(t + remaining / rate - t0);
            }
            remaining -= capacity;
            t = end;
        }
    }
}

/// Serializable description of a rate function; stochastic variants get
/// their seed from the topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateSpec {
    Constant {
        bps: f64,
    },
    Steps {
        segments: Vec<RateSegment>,
    },
    BlockFading {
        mean_bps: f64,
        #[serde(default = "default_step")]
        step_s: f64,
        #[serde(default = "default_floor")]
        floor: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSegment {
    pub start_s: f64,
    pub bps: f64,
}

fn default_step() -> f64 {
    DEFAULT_STEP_S
}

fn default_floor() -> f64 {
    0.05
}

impl RateSpec {
    pub fn resolve(&self, seed: u64) -> RateFn {
        match self {
            RateSpec::Constant { bps } => RateFn::Constant { bps: *bps },
            RateSpec::Steps { segments } => RateFn::Steps {
                segments: segments.iter().map(|s| (s.start_s, s.bps)).collect(),
            },
            RateSpec::BlockFading {
                mean_bps,
                step_s,
                floor,
            } => RateFn::BlockFading {
                mean_bps: *mean_bps,
                step_s: *step_s,
                floor: *floor,
                seed,
            },
        }
    }
}

/// Draws a uniformly random fading link description; used by fixture builders.
pub fn random_fading_spec<R: Rng>(rng: &mut R, lo_bps: f64, hi_bps: f64) -> RateSpec {
    RateSpec::BlockFading {
        mean_bps: rng.gen_range(lo_bps..hi_bps),
        step_s: DEFAULT_STEP_S,
        floor: default_floor(),
    }
}
