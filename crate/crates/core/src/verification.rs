//! Numerical checks of the spectral and sampling theory behind the objective.
//!
//! Each check returns a [`CheckReport`] with the worst observed error, the
//! tolerance it was held to and the seed needed to reproduce it.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluation::Estimate;
use crate::network::{FieldConfig, VelocityField};
use crate::objectives::{evaluate, grad_inner_product, prediction_cosine, weighted_spectral_grad, BandMask, ObjectiveConfig, Sample, Variant};
use crate::rng::{self, StreamRng};
use crate::sampler::{empirical_cdf, sample_anchor, AnchorConfig};
use crate::spectral::DctPlan;
use crate::trajectory::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub seed: u64,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl CheckReport {
    fn new(name: &str, seed: u64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: true,
            seed,
            trials: 0,
            max_error: 0.0,
            tolerance,
            detail: String::new(),
            metrics: BTreeMap::new(),
        }
    }

    fn observe(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.trials += 1;
        if err.is_nan() || err > self.tolerance {
            if self.passed {
                self.detail = what();
            }
            self.passed = false;
        }
        if err > self.max_error || err.is_nan() {
            self.max_error = err;
        }
    }

    fn fail(&mut self, why: String) {
        if self.passed {
            self.detail = why;
        }
        self.passed = false;
    }
}

fn gaussian(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `‖x‖² = ‖Tx‖²` for random vectors, with `T` supplied by `transform(L)`.
/// Builds a forward transform for a given length.
pub type TransformFactory = dyn Fn(usize) -> Box<dyn Fn(&[f64]) -> Vec<f64>>;

pub fn check_parseval_with(
    trials: usize,
    lengths: &[usize],
    seed: u64,
    transform: &TransformFactory,
) -> CheckReport {
    let mut rep = CheckReport::new("parseval", seed, 1e-10);
    for &l in lengths {
        let t = transform(l);
        let mut r = rng::stream(seed, "parseval", l as u64);
        for k in 0..trials {
            let x = gaussian(&mut r, l);
            let (a, b) = (sq(&x), sq(&t(&x)));
            let rel = (a - b).abs() / a.max(f64::MIN_POSITIVE);
            rep.observe(rel, || format!("L={l} trial {k}: ‖x‖²={a}, ‖Dx‖²={b}"));
        }
        let zero = vec![0.0; l];
        if sq(&t(&zero)) != 0.0 {
            rep.fail(format!("L={l}: zero vector has nonzero transform"));
        }
    }
    rep
}

pub fn check_parseval(trials: usize, lengths: &[usize], seed: u64) -> CheckReport {
    check_parseval_with(trials, lengths, seed, &|l| {
        let plan = DctPlan::new(l);
        Box::new(move |x: &[f64]| plan.forward(x).expect("length matches plan"))
    })
}

/// Gradient cosine of the full spectral loss against the prefix time loss
/// equals `‖Pe‖/‖e‖` and is positive whenever `Pe ≠ 0`.
pub fn check_prediction_cosine(trials: usize, max_len: usize, seed: u64) -> CheckReport {
    let mut rep = CheckReport::new("prediction_cosine", seed, 1e-12);
    let mut r = rng::stream(seed, "prediction-cosine", 0);
    let mut zero_prefix = 0;
    for k in 0..trials {
        let l = r.random_range(1..=max_len);
        let h = r.random_range(1..=l);
        let mut e = gaussian(&mut r, l);
        // Exercise the boundary where the prefix vanishes.
        if k % 50 == 0 {
            e[..h].iter_mut().for_each(|x| *x = 0.0);
        }
        let pe = sq(&e[..h]).sqrt();
        let plan = DctPlan::new(l);
        match prediction_cosine(&plan, &e, h) {
            Ok(Some(c)) => {
                let want = pe / sq(&e).sqrt();
                rep.observe((c - want).abs(), || format!("trial {k} (L={l}, H={h}): cos={c}, ‖Pe‖/‖e‖={want}"));
                if pe > 0.0 && (c.is_nan() || c <= 0.0) {
                    rep.fail(format!("trial {k}: non-positive cosine {c} with Pe ≠ 0"));
                }
            }
            Ok(None) => {
                zero_prefix += 1;
                rep.trials += 1;
                if pe != 0.0 {
                    rep.fail(format!("trial {k}: undefined cosine with Pe ≠ 0"));
                }
            }
            Err(e) => rep.fail(format!("trial {k}: {e}")),
        }
    }
    rep.metrics.insert("zero_prefix_cases".into(), zero_prefix as f64);
    rep
}

/// For a constant error `c·1`, the coefficient-domain gradient peaks `√L`
/// times higher than the time-domain gradient.
pub fn check_spectral_gain(lengths: &[usize], constants: &[f64]) -> CheckReport {
    let mut rep = CheckReport::new("spectral_gain", 0, 1e-9);
    for &l in lengths {
        let plan = DctPlan::new(l);
        for &c in constants {
            let e = vec![c; l];
            let coeff_grad: Vec<f64> = plan.forward(&e).expect("plan length").iter().map(|x| 2.0 * x).collect();
            let time_grad: Vec<f64> = e.iter().map(|x| 2.0 * x).collect();
            let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let gain = max_abs(&coeff_grad) / max_abs(&time_grad);
            let want = (l as f64).sqrt();
            rep.observe((gain - want).abs(), || format!("L={l}, c={c}: gain {gain}, expected {want}"));
            rep.metrics.insert(format!("gain_L{l}"), gain);
        }
    }
    rep
}

fn dense_weighted_grad(plan: &DctPlan, e: &[f64], w: &[f64]) -> Vec<f64> {
    let d = plan.basis();
    let l = e.len();
    let de: Vec<f64> = (0..l).map(|u| (0..l).map(|i| d[[u, i]] * e[i]).sum()).collect();
    let w2de: Vec<f64> = (0..l).map(|u| w[u] * w[u] * de[u]).collect();
    (0..l).map(|i| (0..l).map(|u| d[[u, i]] * w2de[u]).sum()).collect()
}

fn high_band_fraction(plan: &DctPlan, g: &[f64]) -> f64 {
    let c = plan.forward(g).expect("plan length");
    let half = c.len() / 2;
    sq(&c[half..]) / sq(&c)
}

/// Analytic gradient of `½‖W·De‖²` equals `DᵀW²De`, and a decaying `W`
/// moves gradient energy out of the upper half of the spectrum.
pub fn check_weighted_gradient(trials: usize, seed: u64) -> CheckReport {
    let mut rep = CheckReport::new("weighted_gradient", seed, 1e-9);
    let mut r = rng::stream(seed, "weighted-gradient", 0);
    let mut attenuated = 0;
    for k in 0..trials {
        let l = r.random_range(2..=48);
        let plan = DctPlan::new(l);
        let e = gaussian(&mut r, l);
        let w: Vec<f64> = (0..l).map(|_| r.random_range(0.1..2.0)).collect();
        let got = match weighted_spectral_grad(&plan, &e, &w) {
            Ok(g) => g,
            Err(err) => {
                rep.fail(format!("trial {k}: {err}"));
                continue;
            }
        };
        let want = dense_weighted_grad(&plan, &e, &w);
        let err = got.iter().zip(&want).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        rep.observe(err, || format!("trial {k} (L={l}): max deviation {err}"));

        let identity = weighted_spectral_grad(&plan, &e, &vec![1.0; l]).expect("plan length");
        let id_err = identity.iter().zip(&e).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        rep.observe(id_err, || format!("trial {k} (L={l}): identity weights do not return e"));

        let low_pass: Vec<f64> = (0..l).map(|u| (-(u as f64) / (l as f64 / 4.0)).exp()).collect();
        let lp = weighted_spectral_grad(&plan, &e, &low_pass).expect("plan length");
        if high_band_fraction(&plan, &lp) < high_band_fraction(&plan, &identity) {
            attenuated += 1;
        } else {
            rep.fail(format!("trial {k} (L={l}): low-pass weights did not attenuate the high band"));
        }
    }
    rep.metrics.insert("low_pass_attenuated".into(), attenuated as f64);
    rep
}

/// Monte Carlo expectations of a decreasing `ε(s)` under two anchor laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingEstimate {
    pub las: Estimate,
    pub uniform: Estimate,
    /// `(E_uniform − E_las) / combined standard error`.
    pub separation: f64,
}

pub fn anchor_expectation(anchor: &AnchorConfig, eps: &dyn Fn(f64) -> f64, samples: usize, rng: &mut StreamRng) -> Estimate {
    let xs: Vec<f64> = (0..samples).map(|_| eps(sample_anchor(anchor, rng))).collect();
    Estimate::from_samples(&xs)
}

pub fn fsd_ordering(las: &AnchorConfig, eps: &dyn Fn(f64) -> f64, samples: usize, seed: u64) -> OrderingEstimate {
    let a = anchor_expectation(las, eps, samples, &mut rng::stream(seed, "fsd-las", 0));
    let b = anchor_expectation(&AnchorConfig::uniform(), eps, samples, &mut rng::stream(seed, "fsd-uniform", 0));
    let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    OrderingEstimate {
        las: a,
        uniform: b,
        separation: (b.mean - a.mean) / se,
    }
}

/// With `ε(s) = (1 − s)²` the anchored law gives a smaller expected teacher
/// error than uniform anchors, by at least five standard errors.
pub fn check_fsd_ordering(las: &AnchorConfig, samples: usize, seed: u64) -> CheckReport {
    let mut rep = CheckReport::new("fsd_ordering", seed, 3.0);
    let eps = |s: f64| (1.0 - s) * (1.0 - s);
    let est = fsd_ordering(las, &eps, samples, seed);
    let z_uniform = (est.uniform.mean - 1.0 / 3.0).abs() / est.uniform.stderr;
    rep.observe(z_uniform, || format!("uniform expectation {} is {z_uniform:.2} SE from 1/3", est.uniform.mean));
    if est.separation.is_nan() || est.separation < 5.0 {
        rep.fail(format!(
            "E_las={} vs E_uniform={}: separation {:.2} SE < 5",
            est.las.mean, est.uniform.mean, est.separation
        ));
    }
    let grid: Vec<f64> = (0..100).map(|k| k as f64 / 99.0).collect();
    let mut r = rng::stream(seed, "fsd-cdf", 0);
    let a: Vec<f64> = (0..samples).map(|_| sample_anchor(las, &mut r)).collect();
    let b: Vec<f64> = (0..samples).map(|_| sample_anchor(&AnchorConfig::uniform(), &mut r)).collect();
    let (fa, fb) = (empirical_cdf(&a, &grid), empirical_cdf(&b, &grid));
    if !fa.iter().zip(&fb).all(|(x, y)| x <= y) {
        rep.fail("anchored CDF exceeds the uniform CDF somewhere on the grid".into());
    }
    rep.metrics.insert("e_las".into(), est.las.mean);
    rep.metrics.insert("e_uniform".into(), est.uniform.mean);
    rep.metrics.insert("separation_se".into(), est.separation);
    rep.metrics.insert("uniform_vs_third_se".into(), z_uniform);
    rep
}

/// Every objective configuration exercised by the gradient check.
pub fn gradient_check_objectives(horizon: usize, prefix: usize) -> Vec<(String, ObjectiveConfig)> {
    let mut out: Vec<(String, ObjectiveConfig)> = Variant::ALL
        .iter()
        .map(|&v| {
            let mut cfg = ObjectiveConfig {
                prefix_len: prefix,
                lambda: 0.5,
                ..ObjectiveConfig::with_variant(v)
            };
            if v == Variant::WeightedSpectral {
                cfg.spectral_weights = Some((0..horizon).map(|u| 1.0 / (1.0 + u as f64)).collect());
            }
            (v.name().to_string(), cfg)
        })
        .collect();
    for (name, band) in [("focal_low_only", BandMask::LowOnly), ("focal_high_only", BandMask::HighOnly)] {
        out.push((
            name.to_string(),
            ObjectiveConfig {
                prefix_len: prefix,
                lambda: 0.5,
                band_mask: band,
                ..ObjectiveConfig::default()
            },
        ));
    }
    out
}

fn random_samples(cfg: &FieldConfig, n: usize, adjacent: bool, r: &mut StreamRng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let (l, d) = (cfg.horizon, cfg.action_dim);
            let tau: f64 = r.random_range(0.0..0.95);
            let r_time = if adjacent { tau + 0.01 } else { r.random_range(0.0..1.0) };
            Sample {
                observation: Observation {
                    values: gaussian(r, cfg.obs_dim),
                    step: 0,
                },
                target: Array2::from_shape_vec((l, d), gaussian(r, l * d)).expect("shape"),
                noise: Array2::from_shape_vec((l, d), gaussian(r, l * d)).expect("shape"),
                tau,
                r: r_time,
            }
        })
        .collect()
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Parameter gradients of every objective against central differences.
///
/// The teacher is a separate network held fixed, so the reference derivative
/// is the partial with respect to the live parameters only.
pub fn check_gradients_fd(params_per_loss: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("gradients_fd", seed, 1e-5);
    let field = FieldConfig {
        horizon: 8,
        action_dim: 2,
        obs_dim: 3,
        hidden: vec![10, 9],
        time_embed_dim: 4,
    };
    let h = 1e-5;
    let floor = 1e-6;
    for (k, (name, obj)) in gradient_check_objectives(field.horizon, 3).into_iter().enumerate() {
        let mut r = rng::stream(seed, "gradient-check", k as u64);
        let live = VelocityField::init(field.clone(), &mut r);
        let teacher = VelocityField::init(field.clone(), &mut r);
        let samples = random_samples(&field, 3, obj.variant.is_adjacent_consistency(), &mut r);
        let base = evaluate(&obj, &live, &teacher, &samples, false)?;
        let n = live.param_count();
        let mut worst = 0.0f64;
        for _ in 0..params_per_loss {
            let i = r.random_range(0..n);
            let at = |delta: f64| -> Result<f64> {
                let mut p = live.params().to_vec();
                p[i] += delta;
                let moved = VelocityField::from_params(field.clone(), p)?;
                Ok(evaluate(&obj, &moved, &teacher, &samples, false)?.report.l_total)
            };
            let numeric = (at(h)? - at(-h)?) / (2.0 * h);
            let err = relative_error(base.grad[i], numeric, floor);
            worst = worst.max(err);
            rep.observe(err, || format!("{name}: parameter {i}: analytic {} vs numeric {numeric}", base.grad[i]));
        }
        rep.metrics.insert(format!("max_rel_{name}"), worst);
    }
    Ok(rep)
}

/// Fraction of random batches with a positive parameter-space inner product
/// between the spectral and prefix gradients. Reported only.
pub fn measure_param_cosine(batches: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("param_cosine", seed, f64::INFINITY);
    let field = FieldConfig {
        horizon: 12,
        action_dim: 2,
        obs_dim: 5,
        hidden: vec![32, 32],
        time_embed_dim: 8,
    };
    let mut r = rng::stream(seed, "param-cosine", 0);
    let net = VelocityField::init(field.clone(), &mut r);
    let mut positive = 0;
    let mut cosines = Vec::new();
    for _ in 0..batches {
        let samples = random_samples(&field, 16, false, &mut r);
        let probe = grad_inner_product(&net, &samples, 4)?;
        if probe.inner > 0.0 {
            positive += 1;
        }
        if let Some(c) = probe.cosine {
            cosines.push(c);
        }
        rep.trials += 1;
    }
    rep.metrics.insert("positive_fraction".into(), positive as f64 / batches.max(1) as f64);
    rep.metrics.insert("mean_cosine".into(), cosines.iter().sum::<f64>() / cosines.len().max(1) as f64);
    rep.detail = "measured, not asserted".into();
    Ok(rep)
}

pub const CHECK_NAMES: [&str; 7] = [
    "parseval",
    "prediction_cosine",
    "spectral_gain",
    "weighted_gradient",
    "fsd_ordering",
    "gradients_fd",
    "param_cosine",
];

/// Run the named checks (all when `only` is empty) at the standard sizes.
pub fn run_suite(only: &[String], seed: u64) -> Result<Vec<CheckReport>> {
    let wanted = |n: &str| only.is_empty() || only.iter().any(|o| o == n);
    let mut out = Vec::new();
    if wanted("parseval") {
        out.push(check_parseval(100, &[2, 12, 36, 256], seed));
    }
    if wanted("prediction_cosine") {
        out.push(check_prediction_cosine(1000, 64, seed));
    }
    if wanted("spectral_gain") {
        out.push(check_spectral_gain(&[1, 16, 144], &[1.0, -0.3, 7.5]));
    }
    if wanted("weighted_gradient") {
        out.push(check_weighted_gradient(100, seed));
    }
    if wanted("fsd_ordering") {
        out.push(check_fsd_ordering(&AnchorConfig::default(), 50_000, seed));
    }
    if wanted("gradients_fd") {
        out.push(check_gradients_fd(50, seed)?);
    }
    if wanted("param_cosine") {
        out.push(measure_param_cosine(50, seed)?);
    }
    Ok(out)
}
