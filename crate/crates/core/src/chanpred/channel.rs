//! Sum-of-sinusoids Rayleigh fading and sliding-window datasets.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ChanError;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSeries {
    pub samples: Vec<Complex64>,
    pub ts: f64,
    pub fd: f64,
    pub num_paths: usize,
    pub seed: u64,
}

/// `h[t] = P^{-1/2} Σ_p exp(i(2π fd cos θ_p t Ts + φ_p))` for explicit
/// `(θ_p, φ_p)` pairs.
pub fn sum_of_sinusoids(fd: f64, ts: f64, length: usize, paths: &[(f64, f64)]) -> Vec<Complex64> {
    let norm = 1.0 / (paths.len() as f64).sqrt();
    (0..length)
        .map(|t| {
            let tt = t as f64 * ts;
            paths
                .iter()
                .map(|&(theta, phi)| Complex64::from_polar(1.0, 2.0 * PI * fd * theta.cos() * tt + phi))
                .sum::<Complex64>()
                * norm
        })
        .collect()
}

pub fn gen_jakes(fd: f64, ts: f64, length: usize, num_paths: usize, seed: u64) -> Result<ChannelSeries, ChanError> {
    if !(fd > 0.0 && fd.is_finite()) || !(ts > 0.0 && ts.is_finite()) || num_paths == 0 {
        return Err(ChanError::InvalidParameter(format!(
            "need fd > 0, Ts > 0 and at least one path, got fd={fd}, Ts={ts}, paths={num_paths}"
        )));
    }
    let mut r = rng::rng(seed, &[rng::tag("jakes")]);
    let paths: Vec<(f64, f64)> = (0..num_paths)
        .map(|_| (r.gen_range(0.0..2.0 * PI), r.gen_range(0.0..2.0 * PI)))
        .collect();
    Ok(ChannelSeries { samples: sum_of_sinusoids(fd, ts, length, &paths), ts, fd, num_paths, seed })
}

/// Adds circular complex Gaussian estimation noise with per-component
/// standard deviation `std`.
pub fn add_estimation_noise(samples: &mut [Complex64], std: f64, seed: u64) -> Result<(), ChanError> {
    if std == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, std).map_err(|e| ChanError::InvalidParameter(e.to_string()))?;
    let mut r = rng::rng(seed, &[rng::tag("csi-noise")]);
    for h in samples {
        *h += Complex64::new(normal.sample(&mut r), normal.sample(&mut r));
    }
    Ok(())
}

/// One training example: `W` past gains and the `H` that follow, each as
/// interleaved (re, im) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

fn stack(h: &[Complex64]) -> Vec<f64> {
    h.iter().flat_map(|c| [c.re, c.im]).collect()
}

/// All stride-1 windows of a series.
pub fn make_windows(samples: &[Complex64], window: usize, horizon: usize) -> Result<Vec<Window>, ChanError> {
    let need = window + horizon;
    if window == 0 || horizon == 0 {
        return Err(ChanError::InvalidParameter("window and horizon must be at least 1".into()));
    }
    if samples.len() < need {
        return Err(ChanError::InsufficientData { needed: need, got: samples.len() });
    }
    Ok((0..=samples.len() - need)
        .map(|s| Window { x: stack(&samples[s..s + window]), y: stack(&samples[s + window..s + need]) })
        .collect())
}
