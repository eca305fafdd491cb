//! Overlapping Allan deviation for characterizing inertial sensor noise.

use serde::Serialize;
use thiserror::Error;

/// Minimum number of samples accepted by [`allan_variance`].
pub const MIN_SAMPLES: usize = 100;

// σ_min = sqrt(2 ln 2 / π) · B for a flicker (bias-instability) floor.
const BIAS_INSTABILITY_FACTOR: f64 = 0.664_282_9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllanError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("sample rate must be positive")]
    InvalidRate,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AllanPoint {
    /// Averaging time, seconds.
    pub tau: f64,
    /// Allan deviation.
    pub sigma: f64,
    /// Number of overlapping differences behind the estimate.
    pub terms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AllanResult {
    pub curve: Vec<AllanPoint>,
    /// White-noise density (angle / velocity random walk), units · s^-1/2.
    pub white_noise_density: f64,
    /// Bias instability from the curve minimum.
    pub bias_instability: f64,
}

/// Overlapping Allan deviation of `samples` taken at `rate_hz`, on
/// logarithmically spaced cluster sizes (about `points_per_decade` per decade).
pub fn allan_deviation(samples: &[f64], rate_hz: f64, points_per_decade: usize) -> Result<Vec<AllanPoint>, AllanError> {
    if !(rate_hz > 0.0) {
        return Err(AllanError::InvalidRate);
    }
    if samples.len() < MIN_SAMPLES {
        return Err(AllanError::InsufficientData { needed: MIN_SAMPLES, got: samples.len() });
    }
    if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
        return Err(AllanError::NonFinite(i));
    }
    let n = samples.len();
    let dt = 1.0 / rate_hz;
    // Integrated signal θ_k with θ_0 = 0.
    let mut theta = Vec::with_capacity(n + 1);
    theta.push(0.0);
    let mut acc = 0.0;
    for &y in samples {
        acc += y * dt;
        theta.push(acc);
    }

    let max_m = (n - 1) / 2;
    let mut sizes: Vec<usize> = Vec::new();
    let steps = ((max_m as f64).log10() * points_per_decade as f64).ceil() as usize;
    for i in 0..=steps {
        let m = 10f64.powf(i as f64 / points_per_decade as f64).round() as usize;
        if m >= 1 && m <= max_m && sizes.last() != Some(&m) {
            sizes.push(m);
        }
    }

    Ok(sizes
        .into_iter()
        .map(|m| {
            let tau = m as f64 * dt;
            let terms = n + 1 - 2 * m;
            let sum: f64 = (0..terms)
                .map(|k| {
                    let d = theta[k + 2 * m] - 2.0 * theta[k + m] + theta[k];
                    d * d
                })
                .sum();
            let avar = sum / (2.0 * tau * tau * terms as f64);
            AllanPoint { tau, sigma: avar.sqrt(), terms }
        })
        .collect())
}

/// Allan curve plus fitted white-noise density and bias instability.
///
/// The white-noise density is the value at τ = 1 s of a slope −½ line fitted
/// through the points whose local log-log slope is close to −½.
pub fn allan_variance(samples: &[f64], rate_hz: f64) -> Result<AllanResult, AllanError> {
    let curve = allan_deviation(samples, rate_hz, 10)?;
    let positive: Vec<&AllanPoint> = curve.iter().filter(|p| p.sigma > 0.0).collect();
    if positive.is_empty() {
        return Ok(AllanResult { curve, white_noise_density: 0.0, bias_instability: 0.0 });
    }

    let slope = |i: usize| -> f64 {
        let (a, b) = if i + 1 < positive.len() { (positive[i], positive[i + 1]) } else { (positive[i - 1], positive[i]) };
        (b.sigma.ln() - a.sigma.ln()) / (b.tau.ln() - a.tau.ln())
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..positive.len() {
        let s = if positive.len() > 1 { slope(i) } else { -0.5 };
        if (-0.75..=-0.25).contains(&s) {
            let p = positive[i];
            let w = p.terms as f64;
            num += w * (p.sigma * p.tau.sqrt()).ln();
            den += w;
        }
    }
    let white_noise_density = if den > 0.0 {
        (num / den).exp()
    } else {
        positive[0].sigma * positive[0].tau.sqrt()
    };
    let min_sigma = positive.iter().map(|p| p.sigma).fold(f64::INFINITY, f64::min);
    Ok(AllanResult { curve, white_noise_density, bias_instability: min_sigma / BIAS_INSTABILITY_FACTOR })
}
