//! Effective sample size and ancestor selection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// `(Σw)² / Σw²` from unnormalised log-weights.
///
/// Equal log-weights give exactly `K`.
pub fn ess_from_log_weights(log_weights: &[f64]) -> Result<f64> {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateEnsemble);
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for l in log_weights {
        let w = (l - max).exp();
        s1 += w;
        s2 += w * w;
    }
    Ok((s1 * s1 / s2).clamp(1.0, log_weights.len() as f64))
}

/// `(Σw)² / Σw²` for non-negative weights.
pub fn ess(weights: &[f64]) -> Result<f64> {
    let max = weights.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::DegenerateEnsemble);
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for w in weights {
        let w = w / max;
        s1 += w;
        s2 += w * w;
    }
    Ok((s1 * s1 / s2).clamp(1.0, weights.len() as f64))
}

/// Normalised weights `exp(l_k) / Σ exp(l_j)`.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateEnsemble);
    }
    let w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

// Smallest index with `point <= cum[j]` and positive weight.
fn locate(weights: &[f64], cum: &[f64], point: f64, from: usize) -> usize {
    let mut j = from;
    while j < cum.len() && (point > cum[j] || weights[j] <= 0.0) {
        j += 1;
    }
    if j == cum.len() {
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    } else {
        j
    }
}

/// Systematic resampling on the grid `(u + i) / n`.
///
/// Grid points that fall exactly on a cumulative-weight boundary go to the
/// lower index. The returned indices are nondecreasing.
pub fn resample_systematic(weights: &[f64], n: usize, u: f64) -> Vec<usize> {
    let cum = cumulative(weights);
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let point = (u + i as f64) / n as f64;
        j = locate(weights, &cum, point, j);
        out.push(j);
    }
    out
}

/// `n` independent categorical draws.
pub fn resample_multinomial<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let cum = cumulative(weights);
    let total = *cum.last().unwrap_or(&0.0);
    (0..n)
        .map(|_| {
            let point = rng.random::<f64>() * total;
            let j = cum.partition_point(|&c| c < point);
            locate(weights, &cum, point, j.min(cum.len()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resampling {
    Multinomial,
    #[default]
    Systematic,
}

impl Resampling {
    pub fn as_str(self) -> &'static str {
        match self {
            Resampling::Multinomial => "multinomial",
            Resampling::Systematic => "systematic",
        }
    }

    /// Ancestor indices for normalised `weights`.
    pub fn ancestors<R: Rng + ?Sized>(self, weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
        match self {
            Resampling::Multinomial => resample_multinomial(weights, n, rng),
            Resampling::Systematic => resample_systematic(weights, n, rng.random::<f64>()),
        }
    }
}

impl fmt::Display for Resampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Resampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multinomial" => Ok(Resampling::Multinomial),
            "systematic" => Ok(Resampling::Systematic),
            other => Err(Error::InvalidConfig(format!(
                "unknown resampling scheme `{other}`"
            ))),
        }
    }
}
