//! Flow-time sampling: the uniform student time `τ` and the anchor
//! (teacher) time `r`.
//!
//! The anchor is logit-normal, `r = sigmoid(μ + σ ε)` with `ε ~ N(0, 1)`,
//! which with the defaults `μ = 4.0, σ = 1.6` puts the median at
//! `sigmoid(4) ≈ 0.982`. Uniform and fixed anchors exist for the ablations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    Uniform,
    LogitNormal,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub kind: AnchorKind,
    pub mu: f64,
    pub sigma: f64,
    pub fixed_value: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self::logit_normal(4.0, 1.6)
    }
}

impl AnchorConfig {
    pub fn logit_normal(mu: f64, sigma: f64) -> Self {
        Self {
            kind: AnchorKind::LogitNormal,
            mu,
            sigma,
            fixed_value: 1.0,
        }
    }

    pub fn uniform() -> Self {
        Self {
            kind: AnchorKind::Uniform,
            ..Self::default()
        }
    }

    pub fn fixed(value: f64) -> Self {
        Self {
            kind: AnchorKind::Fixed,
            fixed_value: value,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AnchorKind::LogitNormal if !(self.sigma > 0.0 && self.sigma.is_finite() && self.mu.is_finite()) => {
                Err(Error::Config(format!("logit-normal anchor needs finite mu and sigma > 0 (got mu={}, sigma={})", self.mu, self.sigma)))
            }
            AnchorKind::Fixed if !(0.0..=1.0).contains(&self.fixed_value) => Err(Error::Config(format!(
                "fixed anchor value {} outside [0, 1]",
                self.fixed_value
            ))),
            _ => Ok(()),
        }
    }

    /// The anchor for a given standard-normal draw (logit-normal only).
    pub fn logit_normal_at(&self, eps: f64) -> f64 {
        sigmoid(self.mu + self.sigma * eps)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Student time `τ ~ U[0, 1]`.
pub fn sample_tau<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

pub fn sample_anchor<R: Rng + ?Sized>(cfg: &AnchorConfig, rng: &mut R) -> f64 {
    match cfg.kind {
        AnchorKind::Uniform => rng.random::<f64>(),
        AnchorKind::LogitNormal => {
            let eps: f64 = StandardNormal.sample(rng);
            cfg.logit_normal_at(eps)
        }
        AnchorKind::Fixed => cfg.fixed_value,
    }
}

/// Empirical CDF of `samples` on `grid` thresholds, `F(a) = P(x <= a)`.
pub fn empirical_cdf(samples: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    grid.iter()
        .map(|&a| sorted.partition_point(|&x| x <= a) as f64 / n)
        .collect()
}

pub fn median(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const N: usize = 50_000;

    #[test]
    fn tau_is_uniform() {
        let mut r = rng::stream(1, rng::STREAM_TAU, 0);
        let xs: Vec<f64> = (0..N).map(|_| sample_tau(&mut r)).collect();
        let mean = xs.iter().sum::<f64>() / N as f64;
        assert!((0.49..=0.51).contains(&mean));
        assert!(xs.iter().cloned().fold(f64::INFINITY, f64::min) < 0.01);
        assert!(xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > 0.99);
        let mut r2 = rng::stream(1, rng::STREAM_TAU, 0);
        assert!(xs.iter().take(100).all(|&x| x == sample_tau(&mut r2)));
    }

    #[test]
    fn anchor_median_point() {
        let cfg = AnchorConfig::default();
        assert!((cfg.logit_normal_at(0.0) - 0.98201).abs() < 1e-5);
    }

    #[test]
    fn fixed_anchor_is_constant() {
        let cfg = AnchorConfig::fixed(1.0);
        let mut r = rng::stream(0, rng::STREAM_ANCHOR, 0);
        assert!((0..1000).all(|_| sample_anchor(&cfg, &mut r) == 1.0));
    }

    #[test]
    fn logit_normal_mass_and_support() {
        let cfg = AnchorConfig::default();
        let mut r = rng::stream(3, rng::STREAM_ANCHOR, 0);
        let xs: Vec<f64> = (0..N).map(|_| sample_anchor(&cfg, &mut r)).collect();
        assert!(xs.iter().all(|&x| x > 0.0 && x < 1.0));
        let frac = xs.iter().filter(|&&x| x >= 0.5).count() as f64 / N as f64;
        assert!(frac >= 0.93, "{frac}");
        let m = median(&xs);
        assert!((0.975..=0.989).contains(&m), "{m}");
    }

    #[test]
    fn logit_normal_dominates_uniform() {
        let mut r = rng::stream(4, rng::STREAM_ANCHOR, 0);
        let las: Vec<f64> = (0..N).map(|_| sample_anchor(&AnchorConfig::default(), &mut r)).collect();
        let uni: Vec<f64> = (0..N).map(|_| sample_anchor(&AnchorConfig::uniform(), &mut r)).collect();
        let grid: Vec<f64> = (0..100).map(|k| k as f64 / 99.0).collect();
        let f_las = empirical_cdf(&las, &grid);
        let f_uni = empirical_cdf(&uni, &grid);
        assert!(f_las.iter().zip(&f_uni).all(|(a, b)| a <= b));
        assert!(f_las.iter().zip(&f_uni).any(|(a, b)| a < b));
    }

    #[test]
    fn validation() {
        assert!(AnchorConfig::logit_normal(4.0, 0.0).validate().is_err());
        assert!(AnchorConfig::fixed(1.5).validate().is_err());
        assert!(AnchorConfig::fixed(1.0).validate().is_ok());
        assert!(AnchorConfig::uniform().validate().is_ok());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }
}
