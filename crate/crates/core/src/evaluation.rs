//! Rollout metrics and Monte Carlo estimators.
//!
//! Smoothness is measured with the action total variation
//! `ATV = (1 / ((T−1)·d)) Σ_t Σ_j |a_{t+1,j} − a_{t,j}|` and a trajectory
//! smoothness statistic `TS(a) = mean_t ‖a_{t+2} − 2a_{t+1} + a_t‖₂`, scored as
//! the gap `|TS(expert) − TS(policy)|`. The TS statistic is a jerk proxy and
//! only meaningful comparatively.
//!
//! Teacher error `ε(s) = E‖v_θ⁻(M_s, s, o) − (M_1 − M_0)‖²` and the
//! propagation-efficiency estimate `Ê = −E_r 4‖u* − v_θ⁻(M_r, r, o)‖²` are
//! estimated by plain Monte Carlo with standard errors.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::flow::{ot_interpolate, rollout, standard_normal, RolloutConfig, RolloutMode, RolloutTrace, TaskEnv};
use crate::network::{FlowState, VelocityModel};
use crate::rng::StreamRng;
use crate::sampler::{sample_anchor, AnchorConfig};
use crate::trajectory::{Dataset, Demonstration, Horizon, Normalization, Observation, TaskKind};

/// Default goal tolerance, in the position units of the synthetic tasks.
pub const DEFAULT_SUCCESS_TOLERANCE: f64 = 0.05;

/// Action total variation of a `T × d` sequence.
pub fn atv(actions: ArrayView2<'_, f64>) -> Result<f64> {
    let (t, d) = actions.dim();
    if t < 2 {
        return Err(Error::Range {
            context: "ATV sequence length",
            value: t as f64,
            min: 2.0,
            max: f64::INFINITY,
        });
    }
    let mut total = 0.0;
    for k in 0..t - 1 {
        for j in 0..d {
            total += (actions[[k + 1, j]] - actions[[k, j]]).abs();
        }
    }
    Ok(total / ((t - 1) * d.max(1)) as f64)
}

/// Mean L2 norm of the second difference.
pub fn trajectory_smoothness(actions: ArrayView2<'_, f64>) -> Result<f64> {
    let (t, d) = actions.dim();
    if t < 3 {
        return Err(Error::Range {
            context: "TS sequence length",
            value: t as f64,
            min: 3.0,
            max: f64::INFINITY,
        });
    }
    let total: f64 = (0..t - 2)
        .map(|k| {
            (0..d)
                .map(|j| {
                    let dd = actions[[k + 2, j]] - 2.0 * actions[[k + 1, j]] + actions[[k, j]];
                    dd * dd
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / (t - 2) as f64)
}

pub fn ts_score(policy: ArrayView2<'_, f64>, expert: ArrayView2<'_, f64>) -> Result<f64> {
    check_dim("TS action dim", expert.ncols(), policy.ncols())?;
    Ok((trajectory_smoothness(expert)? - trajectory_smoothness(policy)?).abs())
}

fn cumsum(actions: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = actions.to_owned();
    for k in 1..out.nrows() {
        for j in 0..out.ncols() {
            out[[k, j]] += out[[k - 1, j]];
        }
    }
    out
}

/// Per-step position gap of two action sequences integrated from the origin.
pub fn compounding_error(policy: ArrayView2<'_, f64>, expert: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    check_dim("compounding error length", expert.nrows(), policy.nrows())?;
    check_dim("compounding error action dim", expert.ncols(), policy.ncols())?;
    let (p, e) = (cumsum(policy), cumsum(expert));
    Ok(p.rows()
        .into_iter()
        .zip(e.rows())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .collect())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn position_gaps(trace: &RolloutTrace) -> Vec<f64> {
    trace
        .positions
        .iter()
        .zip(&trace.expert_positions)
        .map(|(a, b)| distance(a, b))
        .collect()
}

/// Goal-tolerance success of a rollout.
///
/// Goal tasks succeed when the final position is within `tol` of the goal; in
/// open loop (which stops after one macro-trajectory) the expert's position at
/// the same step stands in for the goal. Tracking tasks succeed when the mean
/// position gap to the expert is below `tol`.
pub fn task_success(trace: &RolloutTrace, demo: &Demonstration, tol: f64) -> bool {
    let Some(last) = trace.positions.last() else {
        return false;
    };
    match (demo.task, trace.mode) {
        (TaskKind::Lissajous, _) => {
            let gaps = position_gaps(trace);
            gaps.iter().sum::<f64>() / gaps.len() as f64 <= tol
        }
        (_, RolloutMode::OpenLoop) => distance(last, trace.expert_positions.last().unwrap()) <= tol,
        (_, RolloutMode::ClosedLoop) => {
            !trace.truncated && distance(last, demo.goal().expect("goal task")) <= tol
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub atv: f64,
    pub expert_atv: f64,
    /// `|ATV(policy) − ATV(expert)|` over the same steps.
    pub atv_gap: f64,
    pub ts_score: f64,
    /// Final-position Euclidean distance to the expert.
    pub endpoint_error: f64,
    pub error_curve: Vec<f64>,
    pub success_rate: f64,
    pub nfe_per_decision: usize,
}

fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

pub fn metric_report(trace: &RolloutTrace, demo: &Demonstration, tol: f64) -> Result<MetricReport> {
    let pol = to_array(&trace.actions);
    let exp = to_array(&trace.expert_actions);
    let a = atv(pol.view())?;
    let ea = atv(exp.view())?;
    let error_curve = position_gaps(trace);
    Ok(MetricReport {
        atv: a,
        expert_atv: ea,
        atv_gap: (a - ea).abs(),
        ts_score: ts_score(pol.view(), exp.view())?,
        endpoint_error: *error_curve.last().unwrap_or(&0.0),
        error_curve,
        success_rate: if task_success(trace, demo, tol) { 1.0 } else { 0.0 },
        nfe_per_decision: trace.nfe_per_decision,
    })
}

/// Mean of per-episode reports; the error curve is averaged pointwise over
/// the shortest common length.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    let n = reports.len();
    if n == 0 {
        return Err(Error::Config("cannot aggregate zero episodes".into()));
    }
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    let len = reports.iter().map(|r| r.error_curve.len()).min().unwrap_or(0);
    let error_curve = (0..len)
        .map(|k| reports.iter().map(|r| r.error_curve[k]).sum::<f64>() / n as f64)
        .collect();
    Ok(MetricReport {
        atv: mean(|r| r.atv),
        expert_atv: mean(|r| r.expert_atv),
        atv_gap: mean(|r| r.atv_gap),
        ts_score: mean(|r| r.ts_score),
        endpoint_error: mean(|r| r.endpoint_error),
        error_curve,
        success_rate: mean(|r| r.success_rate),
        nfe_per_decision: reports[0].nfe_per_decision,
    })
}

/// Roll a policy out on every demonstration and score each episode.
pub fn evaluate_policy<M: VelocityModel + ?Sized>(
    model: &M,
    demos: &[Demonstration],
    normalization: &Normalization,
    horizon: Horizon,
    cfg: &RolloutConfig,
    tol: f64,
    rng: &mut StreamRng,
) -> Result<Vec<MetricReport>> {
    demos
        .iter()
        .map(|demo| {
            let env = TaskEnv {
                demo,
                normalization,
                horizon,
            };
            let trace = rollout(model, env, cfg, rng)?;
            metric_report(&trace, demo, tol)
        })
        .collect()
}

/// Open-loop rollouts from `starts` evenly spaced windows of every demonstration.
pub fn evaluate_open_loop<M: VelocityModel + ?Sized>(
    model: &M,
    demos: &[Demonstration],
    normalization: &Normalization,
    horizon: Horizon,
    starts: usize,
    tol: f64,
    rng: &mut StreamRng,
) -> Result<Vec<MetricReport>> {
    let l = horizon.len();
    let mut out = Vec::new();
    for demo in demos {
        let last = demo.len().checked_sub(l).ok_or(Error::Range {
            context: "demonstration length for open-loop evaluation",
            value: demo.len() as f64,
            min: l as f64,
            max: f64::INFINITY,
        })?;
        for k in 0..starts {
            let t0 = if starts == 1 { 0 } else { k * last / (starts - 1) };
            let env = TaskEnv {
                demo,
                normalization,
                horizon,
            };
            let trace = rollout(model, env, &RolloutConfig::open_loop(t0), rng)?;
            out.push(metric_report(&trace, demo, tol)?);
        }
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "episode,atv,expert_atv,atv_gap,ts_score,endpoint_error,success_rate,nfe_per_decision";

fn csv_row(label: &str, r: &MetricReport) -> String {
    format!(
        "{label},{},{},{},{},{},{},{}",
        r.atv, r.expert_atv, r.atv_gap, r.ts_score, r.endpoint_error, r.success_rate, r.nfe_per_decision
    )
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-episode rows followed by a `mean` row.
pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<MetricReport> {
    let agg = aggregate(reports)?;
    let mut body = String::from(CSV_HEADER);
    body.push('\n');
    for (i, r) in reports.iter().enumerate() {
        body.push_str(&csv_row(&i.to_string(), r));
        body.push('\n');
    }
    body.push_str(&csv_row("mean", &agg));
    body.push('\n');
    write_file(path, &body)?;
    Ok(agg)
}

/// Long-format error curves: `episode,step,error`.
pub fn write_curves_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut body = String::from("episode,step,error\n");
    for (i, r) in reports.iter().enumerate() {
        for (k, e) in r.error_curve.iter().enumerate() {
            body.push_str(&format!("{i},{k},{e}\n"));
        }
    }
    write_file(path, &body)
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

struct Draw {
    observation: Observation,
    m0: Array2<f64>,
    m1: Array2<f64>,
}

fn draws(dataset: &Dataset, n: usize, rng: &mut StreamRng) -> Vec<Draw> {
    dataset
        .sample(rng, n)
        .into_iter()
        .map(|w| {
            let (l, d) = w.target.dim();
            Draw {
                observation: Observation {
                    values: w.observation,
                    step: 0,
                },
                m0: standard_normal(rng, l, d),
                m1: w.target,
            }
        })
        .collect()
}

/// `‖u* − v_model(M_t, t, o)‖²` per draw, each at its own time.
fn velocity_errors<M: VelocityModel + ?Sized>(model: &M, draws: &[Draw], times: &[f64]) -> Result<Vec<f64>> {
    draws
        .iter()
        .zip(times)
        .map(|(d, &t)| {
            let state = FlowState::new(ot_interpolate(d.m0.view(), d.m1.view(), t)?, t, d.observation.clone())?;
            let v = model.velocity(&state)?;
            let u = &d.m1 - &d.m0;
            Ok((&u - &v).iter().map(|x| x * x).sum())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherErrorPoint {
    pub time: f64,
    pub error: Estimate,
}

/// Monte Carlo teacher error on a grid of flow times.
pub fn teacher_error<M: VelocityModel + ?Sized>(
    teacher: &M,
    dataset: &Dataset,
    grid: &[f64],
    samples: usize,
    rng: &mut StreamRng,
) -> Result<Vec<TeacherErrorPoint>> {
    if grid.is_empty() {
        return Err(Error::Config("teacher-error grid is empty".into()));
    }
    grid.iter()
        .map(|&s| {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Range {
                    context: "teacher-error grid time",
                    value: s,
                    min: 0.0,
                    max: 1.0,
                });
            }
            let d = draws(dataset, samples, rng);
            let errs = velocity_errors(teacher, &d, &vec![s; samples])?;
            Ok(TeacherErrorPoint {
                time: s,
                error: Estimate::from_samples(&errs),
            })
        })
        .collect()
}

/// Whether a sequence never increases.
pub fn is_non_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] <= w[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyPoint {
    pub tau: f64,
    /// `−E‖g_cons − g_sup‖²` with both gradients formed explicitly.
    pub raw: Estimate,
    /// `−4 E_r[ε(r)]` on independent draws.
    pub simplified: Estimate,
}

impl EfficiencyPoint {
    /// Difference between the two forms in units of their combined standard error.
    pub fn z_score(&self) -> f64 {
        let se = (self.raw.stderr.powi(2) + self.simplified.stderr.powi(2)).sqrt();
        let diff = (self.raw.mean - self.simplified.mean).abs();
        if se == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / se
        }
    }
}

/// Propagation efficiency per student time `τ`, with anchors `r ~ anchor`.
///
/// The raw form builds the consistency gradient `2(v_θ(M_τ) − v_θ⁻(M_r))` and
/// the supervised gradient `2(v_θ(M_τ) − u*)` and measures their squared gap;
/// the simplified form estimates `4 E_r[ε(r)]` from fresh draws.
pub fn propagation_efficiency<L: VelocityModel + ?Sized, T: VelocityModel + ?Sized>(
    live: &L,
    teacher: &T,
    anchor: &AnchorConfig,
    dataset: &Dataset,
    tau_grid: &[f64],
    samples: usize,
    rng: &mut StreamRng,
) -> Result<Vec<EfficiencyPoint>> {
    check_dim("live/teacher horizon", live.horizon(), teacher.horizon())?;
    tau_grid
        .iter()
        .map(|&tau| {
            let d = draws(dataset, samples, rng);
            let rs: Vec<f64> = (0..samples).map(|_| sample_anchor(anchor, rng)).collect();
            let raw: Vec<f64> = d
                .iter()
                .zip(&rs)
                .map(|(draw, &r)| {
                    let s_tau = FlowState::new(
                        ot_interpolate(draw.m0.view(), draw.m1.view(), tau)?,
                        tau,
                        draw.observation.clone(),
                    )?;
                    let s_r = FlowState::new(ot_interpolate(draw.m0.view(), draw.m1.view(), r)?, r, draw.observation.clone())?;
                    let v_live = live.velocity(&s_tau)?;
                    let v_teacher = teacher.velocity(&s_r)?;
                    let u = &draw.m1 - &draw.m0;
                    let g_cons = (&v_live - &v_teacher) * 2.0;
                    let g_sup = (&v_live - &u) * 2.0;
                    Ok(-(&g_cons - &g_sup).iter().map(|x| x * x).sum::<f64>())
                })
                .collect::<Result<_>>()?;
            let d2 = draws(dataset, samples, rng);
            let rs2: Vec<f64> = (0..samples).map(|_| sample_anchor(anchor, rng)).collect();
            let simplified: Vec<f64> = velocity_errors(teacher, &d2, &rs2)?.into_iter().map(|e| -4.0 * e).collect();
            Ok(EfficiencyPoint {
                tau,
                raw: Estimate::from_samples(&raw),
                simplified: Estimate::from_samples(&simplified),
            })
        })
        .collect()
}
