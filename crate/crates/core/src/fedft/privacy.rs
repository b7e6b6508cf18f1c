//! Gaussian-mechanism Rényi-DP accounting and device-side privatization.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::FedError;

/// Default Rényi orders.
pub const DEFAULT_ALPHAS: [f64; 14] = [
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub alpha_grid: Vec<f64>,
}

impl PrivacySpec {
    pub fn new(clip_norm: f64, noise_multiplier: f64, delta: f64) -> Self {
        Self {
            clip_norm,
            noise_multiplier,
            delta,
            alpha_grid: DEFAULT_ALPHAS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: &str| Err(FedError::InvalidPrivacy(m.to_string()));
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.noise_multiplier.is_finite() && self.noise_multiplier > 0.0) {
            return bad("noise multiplier must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if self.alpha_grid.is_empty() {
            return bad("alpha grid is empty");
        }
        if self.alpha_grid.iter().any(|&a| !(a.is_finite() && a > 1.0)) {
            return bad("every Rényi order must exceed 1");
        }
        Ok(())
    }

    /// Noise standard deviation per coordinate, `σ·C`.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_norm
    }

    /// Per-round RDP of order `alpha`: `α·Δ² / (2σ²C²)`.
    pub fn rdp_per_round(&self, alpha: f64, sensitivity: f64) -> f64 {
        let s = self.noise_std();
        alpha * sensitivity * sensitivity / (2.0 * s * s)
    }
}

/// `(ε, δ)` after `rounds` compositions, minimized over the order grid:
/// `min_α [T·ε(α) + ln(1/δ)/(α − 1)]`.
pub fn rdp_epsilon(spec: &PrivacySpec, sensitivity: f64, rounds: u64) -> Result<(f64, f64), FedError> {
    spec.validate()?;
    if !(sensitivity.is_finite() && sensitivity > 0.0) {
        return Err(FedError::InvalidPrivacy("sensitivity must be positive".into()));
    }
    if rounds == 0 {
        return Err(FedError::InvalidPrivacy("at least one round is required".into()));
    }
    let log_inv_delta = (1.0 / spec.delta).ln();
    let eps = spec
        .alpha_grid
        .iter()
        .map(|&a| rounds as f64 * spec.rdp_per_round(a, sensitivity) + log_inv_delta / (a - 1.0))
        .fold(f64::INFINITY, f64::min);
    Ok((eps, spec.delta))
}

/// Scales `v` onto the ball of radius `c`; vectors already inside are
/// returned unchanged.
pub fn clip(v: &DVector<f64>, c: f64) -> DVector<f64> {
    let n = v.norm();
    if n > c {
        v * (c / n)
    } else {
        v.clone()
    }
}

/// Adds `N(0, (σC)²·I)`.
pub fn add_gaussian_noise<R: Rng>(v: &DVector<f64>, std: f64, rng: &mut R) -> DVector<f64> {
    v.map(|x| x + std * rng.sample::<f64, _>(StandardNormal))
}
