//! Training objectives.
//!
//! The composite objective pairs a prefix consistency term with a spectral
//! term on the whole macro-trajectory:
//!
//! ```text
//! L_time = ‖[f_θ(M_τ, τ, o) − f_θ⁻(M_r, r, o)]_{0..H}‖²
//! L_freq = ‖DCT(f_θ(M_τ, τ, o)) − DCT(M_1)‖²
//! L      = L_time + λ · L_freq
//! ```
//!
//! The teacher branch `f_θ⁻` is evaluated with the EMA parameters outside the
//! tape, so it never receives gradient. Every ablation arm, plus the plain
//! flow-matching and adjacent-time consistency baselines, is expressed as a
//! [`Variant`] of the same machinery.
//!
//! Losses are computed per sample at the prediction level together with their
//! gradient with respect to the student prediction; the tape then pulls that
//! gradient back through `f = M_τ + (1 − τ) v` into the network.

use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::flow::{ot_interpolate, standard_normal, terminal_map};
use crate::network::{FlowState, Tape, VelocityField};
use crate::rng::StreamRng;
use crate::sampler::{sample_anchor, sample_tau, AnchorConfig};
use crate::spectral::DctPlan;
use crate::trajectory::{Observation, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Focal,
    WoLas,
    WoFcoLas,
    TimeOnlyFco,
    FreqOnlyFco,
    FixedRLas,
    FcoFullMacro,
    FcoProxFreq,
    FmBaseline,
    FlowpolicyBaseline,
    WeightedSpectral,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Focal,
        Variant::WoLas,
        Variant::WoFcoLas,
        Variant::TimeOnlyFco,
        Variant::FreqOnlyFco,
        Variant::FixedRLas,
        Variant::FcoFullMacro,
        Variant::FcoProxFreq,
        Variant::FmBaseline,
        Variant::FlowpolicyBaseline,
        Variant::WeightedSpectral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Focal => "focal",
            Variant::WoLas => "wo_las",
            Variant::WoFcoLas => "wo_fco_las",
            Variant::TimeOnlyFco => "time_only_fco",
            Variant::FreqOnlyFco => "freq_only_fco",
            Variant::FixedRLas => "fixed_r_las",
            Variant::FcoFullMacro => "fco_full_macro",
            Variant::FcoProxFreq => "fco_prox_freq",
            Variant::FmBaseline => "fm_baseline",
            Variant::FlowpolicyBaseline => "flowpolicy_baseline",
            Variant::WeightedSpectral => "weighted_spectral",
        }
    }

    /// Adjacent-time consistency (student at τ, teacher at τ + Δτ).
    pub fn is_adjacent_consistency(self) -> bool {
        matches!(self, Variant::WoFcoLas | Variant::FlowpolicyBaseline)
    }

    fn has_spectral_term(self) -> bool {
        matches!(
            self,
            Variant::Focal
                | Variant::WoLas
                | Variant::FreqOnlyFco
                | Variant::FixedRLas
                | Variant::FcoFullMacro
                | Variant::FcoProxFreq
                | Variant::WeightedSpectral
        )
    }

    /// The anchor distribution this arm trains with, given the configured one.
    pub fn effective_anchor(self, configured: AnchorConfig) -> AnchorConfig {
        match self {
            Variant::WoLas => AnchorConfig::uniform(),
            Variant::FixedRLas => AnchorConfig::fixed(1.0),
            _ => configured,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMask {
    All,
    LowOnly,
    HighOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub lambda: f64,
    /// Velocity-term weight of the adjacent-time consistency baselines.
    pub alpha: f64,
    /// Teacher offset of the adjacent-time consistency baselines.
    pub delta_tau: f64,
    /// Prefix length `H` of the time-domain term; follows the chunk size of
    /// the training horizon rather than being configured directly.
    #[serde(skip)]
    pub prefix_len: usize,
    pub spectral_weights: Option<Vec<f64>>,
    pub band_mask: BandMask,
    /// Number of coefficients counted as low frequency; `None` means `⌈L/4⌉`.
    pub low_band: Option<usize>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Focal,
            lambda: 1e-4,
            alpha: 1.0,
            delta_tau: 1e-2,
            prefix_len: 4,
            spectral_weights: None,
            band_mask: BandMask::All,
            low_band: None,
        }
    }
}

impl ObjectiveConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn low_band_len(&self, horizon: usize) -> usize {
        self.low_band.unwrap_or(horizon.div_ceil(4))
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0 (got {})", self.lambda));
        }
        if self.prefix_len == 0 || self.prefix_len > horizon {
            return Err(Error::Range {
                context: "prefix length H (must satisfy 1 <= H <= L)",
                value: self.prefix_len as f64,
                min: 1.0,
                max: horizon as f64,
            });
        }
        if self.variant.is_adjacent_consistency() {
            if !(self.delta_tau > 0.0 && self.delta_tau < 1.0) {
                return bad(format!("delta_tau must lie in (0, 1) (got {})", self.delta_tau));
            }
            if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
                return bad(format!("alpha must be finite and >= 0 (got {})", self.alpha));
            }
        }
        match (&self.spectral_weights, self.variant) {
            (None, Variant::WeightedSpectral) => {
                return bad("weighted_spectral requires spectral_weights".into());
            }
            (Some(w), Variant::WeightedSpectral) => {
                check_dim("spectral weight count", horizon, w.len())?;
                if !w.iter().all(|&x| x > 0.0 && x.is_finite()) {
                    return bad("spectral weights must be positive".into());
                }
            }
            (Some(_), v) => return bad(format!("spectral_weights are only valid for weighted_spectral, not {v}")),
            (None, _) => {}
        }
        if self.band_mask != BandMask::All {
            if !self.variant.has_spectral_term() || self.variant == Variant::WeightedSpectral {
                return bad(format!("band_mask needs a plain spectral term; {} has none", self.variant));
            }
            let low = self.low_band_len(horizon);
            if low == 0 || low >= horizon {
                return bad(format!("low band length {low} must lie in [1, L-1] for L = {horizon}"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Prediction-level losses.

fn sq_norm(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Squared distance over the first `h` rows.
pub fn loss_time(student: ArrayView2<'_, f64>, teacher: ArrayView2<'_, f64>, h: usize) -> Result<f64> {
    Ok(loss_time_grad(student, teacher, h)?.0)
}

/// [`loss_time`] and its gradient with respect to `student`.
pub fn loss_time_grad(student: ArrayView2<'_, f64>, teacher: ArrayView2<'_, f64>, h: usize) -> Result<(f64, Array2<f64>)> {
    check_dim("time loss rows", student.nrows(), teacher.nrows())?;
    check_dim("time loss columns", student.ncols(), teacher.ncols())?;
    if h > student.nrows() {
        return Err(Error::Range {
            context: "time loss prefix H",
            value: h as f64,
            min: 0.0,
            max: student.nrows() as f64,
        });
    }
    let mut grad = Array2::zeros(student.dim());
    let diff = &student.slice(s![..h, ..]) - &teacher.slice(s![..h, ..]);
    grad.slice_mut(s![..h, ..]).assign(&(&diff * 2.0));
    Ok((sq_norm(diff.view()), grad))
}

/// `‖DCT(pred) − DCT(expert)‖²` summed over action dimensions.
pub fn loss_freq(plan: &DctPlan, pred: ArrayView2<'_, f64>, expert: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(spectral_term(plan, pred, expert, SpectralShape::Band(None))?.0)
}

#[derive(Debug, Clone, Copy)]
enum SpectralShape<'a> {
    /// Unweighted; `Some((lo, hi))` keeps only coefficients `lo..hi`.
    Band(Option<(usize, usize)>),
    /// `½‖W · DCT(e)‖²`.
    Weighted(&'a [f64]),
}

fn spectral_term(
    plan: &DctPlan,
    pred: ArrayView2<'_, f64>,
    expert: ArrayView2<'_, f64>,
    shape: SpectralShape<'_>,
) -> Result<(f64, Array2<f64>)> {
    check_dim("frequency loss rows", pred.nrows(), expert.nrows())?;
    check_dim("frequency loss columns", pred.ncols(), expert.ncols())?;
    let e = &pred - &expert;
    let mut coeffs = plan.forward_columns(e.view())?;
    match shape {
        SpectralShape::Band(band) => {
            if let Some((lo, hi)) = band {
                for (u, mut row) in coeffs.rows_mut().into_iter().enumerate() {
                    if u < lo || u >= hi {
                        row.fill(0.0);
                    }
                }
            }
            let value = sq_norm(coeffs.view());
            let grad = plan.inverse_columns(coeffs.view())? * 2.0;
            Ok((value, grad))
        }
        SpectralShape::Weighted(w) => {
            check_dim("spectral weight count", plan.len(), w.len())?;
            let mut value = 0.0;
            for (u, mut row) in coeffs.rows_mut().into_iter().enumerate() {
                let w2 = w[u] * w[u];
                for c in row.iter_mut() {
                    value += 0.5 * w2 * *c * *c;
                    *c *= w2;
                }
            }
            Ok((value, plan.inverse_columns(coeffs.view())?))
        }
    }
}

/// Gradient of `½‖W·DCT(e)‖²` with respect to the prediction, `Dᵀ W² D e`.
pub fn weighted_spectral_grad(plan: &DctPlan, error: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let e = Array2::from_shape_vec((error.len(), 1), error.to_vec()).expect("column vector");
    let (_, g) = spectral_term(plan, e.view(), Array2::zeros((error.len(), 1)).view(), SpectralShape::Weighted(weights))?;
    Ok(g.column(0).to_vec())
}

/// Value and gradient of `½‖W·DCT(e)‖²` for a single sequence.
pub fn weighted_spectral_loss(plan: &DctPlan, error: &[f64], weights: &[f64]) -> Result<f64> {
    let e = Array2::from_shape_vec((error.len(), 1), error.to_vec()).expect("column vector");
    Ok(spectral_term(plan, e.view(), Array2::zeros((error.len(), 1)).view(), SpectralShape::Weighted(weights))?.0)
}

/// Per-sample loss terms at the prediction level.
#[derive(Debug, Clone)]
pub struct Terms {
    /// Consistency / time-domain term.
    pub time: f64,
    /// Spectral (or full-macro MSE) term, before `λ`.
    pub freq: f64,
    pub total: f64,
    /// `∂total/∂student` split by term (already weighted).
    pub d_time: Array2<f64>,
    pub d_freq: Array2<f64>,
}

/// The composite objective of the spectral-family variants at the prediction
/// level: student and teacher terminal predictions against the expert.
pub fn loss_fco(
    cfg: &ObjectiveConfig,
    student: ArrayView2<'_, f64>,
    teacher: ArrayView2<'_, f64>,
    expert: ArrayView2<'_, f64>,
) -> Result<Terms> {
    let l = student.nrows();
    cfg.validate(l)?;
    check_dim("expert rows", l, expert.nrows())?;
    check_dim("expert columns", student.ncols(), expert.ncols())?;
    let h = cfg.prefix_len;
    let lam = cfg.lambda;
    let full = |a: ArrayView2<'_, f64>| a.to_owned();
    match cfg.variant {
        Variant::Focal | Variant::WoLas | Variant::FixedRLas | Variant::FcoFullMacro | Variant::WeightedSpectral => {
            let th = if cfg.variant == Variant::FcoFullMacro { l } else { h };
            let (time, d_time) = loss_time_grad(student, teacher, th)?;
            let plan = DctPlan::new(l);
            let shape = match (&cfg.spectral_weights, cfg.band_mask) {
                (Some(w), _) => SpectralShape::Weighted(w),
                (None, BandMask::All) => SpectralShape::Band(None),
                (None, BandMask::LowOnly) => SpectralShape::Band(Some((0, cfg.low_band_len(l)))),
                (None, BandMask::HighOnly) => SpectralShape::Band(Some((cfg.low_band_len(l), l))),
            };
            let (freq, g) = spectral_term(&plan, student, expert, shape)?;
            Ok(Terms {
                time,
                freq,
                total: time + lam * freq,
                d_time,
                d_freq: g * lam,
            })
        }
        Variant::TimeOnlyFco => {
            let (time, d_time) = loss_time_grad(student, teacher, h)?;
            let n = (l * student.ncols()) as f64;
            let e = &student - &expert;
            let freq = sq_norm(e.view()) / n;
            Ok(Terms {
                time,
                freq,
                total: time + lam * freq,
                d_time,
                d_freq: e * (2.0 * lam / n),
            })
        }
        Variant::FreqOnlyFco => {
            let time = loss_time(student, teacher, h)?;
            let (freq, g) = spectral_term(&DctPlan::new(l), student, expert, band_shape(cfg, l))?;
            Ok(Terms {
                time,
                freq,
                total: lam * freq,
                d_time: Array2::zeros(student.dim()),
                d_freq: g * lam,
            })
        }
        Variant::FcoProxFreq => {
            let (time, d_time) = loss_time_grad(student, teacher, l)?;
            let plan = DctPlan::new(h);
            let (freq, g) = spectral_term(
                &plan,
                student.slice(s![..h, ..]),
                expert.slice(s![..h, ..]),
                SpectralShape::Band(None),
            )?;
            let mut d_freq = Array2::zeros(student.dim());
            d_freq.slice_mut(s![..h, ..]).assign(&(g * lam));
            Ok(Terms {
                time,
                freq,
                total: time + lam * freq,
                d_time,
                d_freq,
            })
        }
        v => {
            let _ = full;
            Err(Error::Config(format!("{v} is not a composite-objective variant")))
        }
    }
}

fn band_shape(cfg: &ObjectiveConfig, l: usize) -> SpectralShape<'_> {
    match cfg.band_mask {
        BandMask::All => SpectralShape::Band(None),
        BandMask::LowOnly => SpectralShape::Band(Some((0, cfg.low_band_len(l)))),
        BandMask::HighOnly => SpectralShape::Band(Some((cfg.low_band_len(l), l))),
    }
}

// ---------------------------------------------------------------------------
// Network-level objectives.

/// One training example with its sampled noise and flow times.
#[derive(Debug, Clone)]
pub struct Sample {
    pub observation: Observation,
    /// Expert macro-trajectory `M_1` (normalized).
    pub target: Array2<f64>,
    /// Noise `M_0`.
    pub noise: Array2<f64>,
    pub tau: f64,
    /// Teacher time (`τ + Δτ` for the adjacent-time baselines).
    pub r: f64,
}

/// Attach noise and flow times to a batch of windows.
///
/// Uses three independent streams so that ablations that change only the
/// anchor law keep identical noise and student times.
pub fn draw_samples(
    windows: Vec<Window>,
    variant: Variant,
    anchor: &AnchorConfig,
    delta_tau: f64,
    noise_rng: &mut StreamRng,
    tau_rng: &mut StreamRng,
    anchor_rng: &mut StreamRng,
) -> Vec<Sample> {
    windows
        .into_iter()
        .map(|w| {
            let (l, d) = w.target.dim();
            let noise = standard_normal(noise_rng, l, d);
            let u = sample_tau(tau_rng);
            let anchor_draw = sample_anchor(anchor, anchor_rng);
            let (tau, r) = if variant.is_adjacent_consistency() {
                let tau = u * (1.0 - delta_tau);
                (tau, (tau + delta_tau).min(1.0))
            } else if variant == Variant::FmBaseline {
                (u, u)
            } else {
                (u, anchor_draw)
            };
            Sample {
                observation: Observation {
                    values: w.observation,
                    step: 0,
                },
                target: w.target,
                noise,
                tau,
                r,
            }
        })
        .collect()
}

/// Scalar loss of a batch together with its parameter gradients.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub lr: f64,
    pub l_time: f64,
    pub l_freq: f64,
    pub l_velocity: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    pub grad_norm_time: Option<f64>,
    pub grad_norm_freq: Option<f64>,
    /// `⟨∇ secondary, ∇ primary⟩` of the two weighted terms.
    pub grad_inner: Option<f64>,
    pub grad_cosine: Option<f64>,
    /// Fraction of the batch with teacher time below the student time.
    pub frac_r_below_tau: f64,
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub report: LossReport,
    pub grad: Vec<f64>,
}

fn mean_over(n: usize, x: f64) -> f64 {
    x / n.max(1) as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of two vectors; `None` when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot(a, b) / (na * nb))
    }
}

/// Batch loss and gradient for any variant. `teacher` is the stop-gradient
/// EMA network (unused by the flow-matching baseline). With `split_terms`
/// the two terms are back-propagated separately so their gradient norms and
/// inner product can be reported.
pub fn evaluate(
    cfg: &ObjectiveConfig,
    net: &VelocityField,
    teacher: &VelocityField,
    samples: &[Sample],
    split_terms: bool,
) -> Result<LossEval> {
    let l = net.config().horizon;
    cfg.validate(l)?;
    if samples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let n = samples.len();
    let student_states: Vec<FlowState> = samples
        .iter()
        .map(|s| {
            let m_tau = ot_interpolate(s.noise.view(), s.target.view(), s.tau)?;
            FlowState::new(m_tau, s.tau, s.observation.clone())
        })
        .collect::<Result<_>>()?;

    let mut tape = Tape::new(net);
    let (node, v_student) = tape.forward(&student_states)?;

    let teacher_out = if cfg.variant == Variant::FmBaseline {
        None
    } else {
        let teacher_states: Vec<FlowState> = samples
            .iter()
            .map(|s| {
                if s.r < 0.0 || s.r > 1.0 {
                    return Err(Error::Range {
                        context: "teacher time (tau + delta_tau must stay <= 1)",
                        value: s.r,
                        min: 0.0,
                        max: 1.0,
                    });
                }
                let m_r = ot_interpolate(s.noise.view(), s.target.view(), s.r)?;
                FlowState::new(m_r, s.r, s.observation.clone())
            })
            .collect::<Result<_>>()?;
        let v = teacher.forward_batch(&teacher_states)?;
        let preds = teacher_states
            .iter()
            .zip(v.rows())
            .map(|(st, row)| {
                let v = crate::network::unflatten(row.to_vec(), l, st.state.ncols());
                let f = terminal_map(v.view(), st)?;
                Ok((v, f))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(preds)
    };

    let mut sum_time = 0.0;
    let mut sum_freq = 0.0;
    let mut sum_vel = 0.0;
    let mut sum_total = 0.0;
    let mut seeds_time = Vec::with_capacity(n);
    let mut seeds_freq = Vec::with_capacity(n);
    let scale = 1.0 / n as f64;

    for (k, (s, st)) in samples.iter().zip(&student_states).enumerate() {
        let v = &v_student[k];
        let w = 1.0 - s.tau;
        match cfg.variant {
            Variant::FmBaseline => {
                let diff = v - &(&s.target - &s.noise);
                let val = sq_norm(diff.view());
                sum_time += val;
                sum_total += val;
                seeds_time.push(diff * (2.0 * scale));
                seeds_freq.push(Array2::zeros(v.dim()));
            }
            Variant::WoFcoLas | Variant::FlowpolicyBaseline => {
                let (v_t, f_t) = &teacher_out.as_ref().unwrap()[k];
                let f_s = terminal_map(v.view(), st)?;
                let df = &f_s - f_t;
                let dv = v - v_t;
                let t_val = sq_norm(df.view());
                let v_val = sq_norm(dv.view());
                sum_time += t_val;
                sum_vel += v_val;
                sum_total += t_val + cfg.alpha * v_val;
                seeds_time.push(df * (2.0 * w * scale));
                seeds_freq.push(dv * (2.0 * cfg.alpha * scale));
            }
            _ => {
                let (_, f_t) = &teacher_out.as_ref().unwrap()[k];
                let f_s = terminal_map(v.view(), st)?;
                let terms = loss_fco(cfg, f_s.view(), f_t.view(), s.target.view())?;
                sum_time += terms.time;
                sum_freq += terms.freq;
                sum_total += terms.total;
                seeds_time.push(terms.d_time * (w * scale));
                seeds_freq.push(terms.d_freq * (w * scale));
            }
        }
    }

    let r_below = samples.iter().filter(|s| s.r < s.tau).count() as f64 / n as f64;
    let mut report = LossReport {
        l_time: mean_over(n, sum_time),
        l_freq: mean_over(n, sum_freq),
        l_velocity: mean_over(n, sum_vel),
        l_total: mean_over(n, sum_total),
        frac_r_below_tau: r_below,
        ..LossReport::default()
    };

    let grad = if split_terms {
        tape.seed(node, &seeds_time)?;
        let g_time = tape.backward()?;
        tape.clear_seeds();
        tape.seed(node, &seeds_freq)?;
        let g_freq = tape.backward()?;
        report.grad_norm_time = Some(l2(&g_time));
        report.grad_norm_freq = Some(l2(&g_freq));
        report.grad_inner = Some(dot(&g_freq, &g_time));
        report.grad_cosine = cosine(&g_freq, &g_time);
        g_time.iter().zip(&g_freq).map(|(a, b)| a + b).collect::<Vec<f64>>()
    } else {
        let combined: Vec<Array2<f64>> = seeds_time.into_iter().zip(seeds_freq).map(|(a, b)| a + b).collect();
        tape.seed(node, &combined)?;
        tape.backward()?
    };
    report.grad_norm = l2(&grad);
    Ok(LossEval { report, grad })
}

/// Flow-matching loss `E‖v_θ(x_τ, τ, o) − (x₁ − x₀)‖²` with uniform `τ`.
pub fn loss_fm(net: &VelocityField, batch: &[Window], rng: &mut StreamRng) -> Result<f64> {
    let samples = samples_with(batch, rng, |rng| {
        let t = sample_tau(rng);
        (t, t)
    });
    let cfg = ObjectiveConfig::with_variant(Variant::FmBaseline);
    Ok(evaluate(&cfg, net, net, &samples, false)?.report.l_total)
}

/// Adjacent-time consistency loss
/// `‖f_θ(A_τ) − f_θ⁻(A_{τ+Δτ})‖² + α‖v_θ(A_τ) − v_θ⁻(A_{τ+Δτ})‖²`.
pub fn loss_flowpolicy(
    net: &VelocityField,
    ema: &VelocityField,
    batch: &[Window],
    rng: &mut StreamRng,
    alpha: f64,
    delta_tau: f64,
) -> Result<f64> {
    if !(delta_tau > 0.0 && delta_tau < 1.0) {
        return Err(Error::Range {
            context: "delta_tau",
            value: delta_tau,
            min: 0.0,
            max: 1.0,
        });
    }
    let samples = samples_with(batch, rng, |rng| {
        let t = sample_tau(rng) * (1.0 - delta_tau);
        (t, t + delta_tau)
    });
    let cfg = ObjectiveConfig {
        variant: Variant::FlowpolicyBaseline,
        alpha,
        delta_tau,
        ..ObjectiveConfig::default()
    };
    Ok(evaluate(&cfg, net, ema, &samples, false)?.report.l_total)
}

fn samples_with(batch: &[Window], rng: &mut StreamRng, mut times: impl FnMut(&mut StreamRng) -> (f64, f64)) -> Vec<Sample> {
    batch
        .iter()
        .map(|w| {
            let (l, d) = w.target.dim();
            let noise = standard_normal(rng, l, d);
            let (tau, r) = times(rng);
            Sample {
                observation: Observation {
                    values: w.observation.clone(),
                    step: 0,
                },
                target: w.target.clone(),
                noise,
                tau,
                r,
            }
        })
        .collect()
}

/// Inner product and cosine of the parameter gradients of the full-horizon
/// spectral loss and the prefix time loss, both measured against the expert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradProbe {
    pub inner: f64,
    pub cosine: Option<f64>,
}

pub fn grad_inner_product(net: &VelocityField, samples: &[Sample], prefix_len: usize) -> Result<GradProbe> {
    let l = net.config().horizon;
    if prefix_len == 0 || prefix_len > l {
        return Err(Error::Range {
            context: "probe prefix length",
            value: prefix_len as f64,
            min: 1.0,
            max: l as f64,
        });
    }
    let plan = DctPlan::new(l);
    let states: Vec<FlowState> = samples
        .iter()
        .map(|s| FlowState::new(ot_interpolate(s.noise.view(), s.target.view(), s.tau)?, s.tau, s.observation.clone()))
        .collect::<Result<_>>()?;
    let mut tape = Tape::new(net);
    let (node, vs) = tape.forward(&states)?;
    let mut seeds_freq = Vec::new();
    let mut seeds_time = Vec::new();
    for ((s, st), v) in samples.iter().zip(&states).zip(&vs) {
        let f = terminal_map(v.view(), st)?;
        let w = 1.0 - s.tau;
        let (_, gf) = spectral_term(&plan, f.view(), s.target.view(), SpectralShape::Band(None))?;
        let (_, gt) = loss_time_grad(f.view(), s.target.view(), prefix_len)?;
        seeds_freq.push(gf * w);
        seeds_time.push(gt * w);
    }
    tape.seed(node, &seeds_freq)?;
    let g_freq = tape.backward()?;
    tape.clear_seeds();
    tape.seed(node, &seeds_time)?;
    let g_time = tape.backward()?;
    Ok(GradProbe {
        inner: dot(&g_freq, &g_time),
        cosine: cosine(&g_freq, &g_time),
    })
}

/// Prediction-space cosine between `∇‖De‖²` and `∇‖Pe‖²` for a single
/// sequence `e` and prefix projector `P` onto the first `h` entries.
pub fn prediction_cosine(plan: &DctPlan, e: &[f64], h: usize) -> Result<Option<f64>> {
    let col = Array2::from_shape_vec((e.len(), 1), e.to_vec()).expect("column vector");
    let zero = Array2::zeros((e.len(), 1));
    let (_, g_freq) = spectral_term(plan, col.view(), zero.view(), SpectralShape::Band(None))?;
    let (_, g_time) = loss_time_grad(col.view(), zero.view(), h)?;
    Ok(cosine(g_freq.as_slice().unwrap(), g_time.as_slice().unwrap()))
}

/// Random `(τ, r)` draws for a batch under an anchor law; convenience for probes.
pub fn random_samples(batch: Vec<Window>, anchor: &AnchorConfig, rng: &mut StreamRng) -> Vec<Sample> {
    batch
        .into_iter()
        .map(|w| {
            let (l, d) = w.target.dim();
            let noise = standard_normal(rng, l, d);
            let tau = rng.random::<f64>();
            let r = sample_anchor(anchor, rng);
            Sample {
                observation: Observation {
                    values: w.observation,
                    step: 0,
                },
                target: w.target,
                noise,
                tau,
                r,
            }
        })
        .collect()
}
