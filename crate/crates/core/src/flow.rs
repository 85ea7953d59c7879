//! OT-path interpolation, the terminal map `f(M_τ) = M_τ + (1 − τ) v`,
//! one-step (and Euler) inference, and receding-horizon rollouts on the
//! synthetic tasks.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::network::{FlowState, VelocityModel};
use crate::rng::StreamRng;
use crate::trajectory::{Demonstration, Horizon, Normalization, Observation};

/// `(1 − t) m0 + t m1`.
pub fn ot_interpolate(m0: ArrayView2<'_, f64>, m1: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
    check_dim("interpolation rows", m0.nrows(), m1.nrows())?;
    check_dim("interpolation columns", m0.ncols(), m1.ncols())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range {
            context: "interpolation time",
            value: t,
            min: 0.0,
            max: 1.0,
        });
    }
    // Exact endpoints, independent of rounding in the blend.
    if t == 0.0 {
        return Ok(m0.to_owned());
    }
    if t == 1.0 {
        return Ok(m1.to_owned());
    }
    Ok(Array2::from_shape_fn(m0.dim(), |ij| (1.0 - t) * m0[ij] + t * m1[ij]))
}

/// Terminal prediction `state + (1 − time) · v`.
pub fn terminal_map(v: ArrayView2<'_, f64>, state: &FlowState) -> Result<Array2<f64>> {
    check_dim("velocity rows", state.state.nrows(), v.nrows())?;
    check_dim("velocity columns", state.state.ncols(), v.ncols())?;
    let w = 1.0 - state.time;
    Ok(Array2::from_shape_fn(v.dim(), |ij| state.state[ij] + w * v[ij]))
}

pub fn standard_normal(rng: &mut StreamRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Draw `M_0 ~ N(0, I)` and map it to the data end in one network evaluation.
pub fn one_step_infer<M: VelocityModel + ?Sized>(model: &M, obs: &Observation, rng: &mut StreamRng) -> Result<Array2<f64>> {
    let m0 = standard_normal(rng, model.horizon(), model.action_dim());
    let state = FlowState::new(m0, 0.0, obs.clone())?;
    let v = model.velocity(&state)?;
    terminal_map(v.view(), &state)
}

/// Explicit Euler integration of the flow ODE with `steps` evaluations.
pub fn euler_infer<M: VelocityModel + ?Sized>(
    model: &M,
    obs: &Observation,
    steps: usize,
    rng: &mut StreamRng,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::Config("Euler inference needs at least one step".into()));
    }
    let mut m = standard_normal(rng, model.horizon(), model.action_dim());
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let state = FlowState::new(m, k as f64 * dt, obs.clone())?;
        let v = model.velocity(&state)?;
        m = state.state + &(v * dt);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    OneStep,
    Euler { steps: usize },
}

impl Inference {
    pub fn nfe(self) -> usize {
        match self {
            Inference::OneStep => 1,
            Inference::Euler { steps } => steps,
        }
    }

    pub fn run<M: VelocityModel + ?Sized>(self, model: &M, obs: &Observation, rng: &mut StreamRng) -> Result<Array2<f64>> {
        match self {
            Inference::OneStep => one_step_infer(model, obs, rng),
            Inference::Euler { steps } => euler_infer(model, obs, steps, rng),
        }
    }
}

/// Exact straight-flow velocity `(M_1 − M_τ) / (1 − τ)` towards the expert
/// continuation at the observation's step; `M_1` past the episode end is the
/// zero action.
#[derive(Debug)]
pub struct ExpertOracle {
    targets: Array2<f64>,
    horizon: usize,
    pad: Vec<f64>,
    evals: AtomicU64,
}

impl ExpertOracle {
    /// `demo` actions are normalized with `norm` so the oracle lives in the
    /// same space as a trained field.
    pub fn new(demo: &Demonstration, norm: &Normalization, horizon: usize) -> Self {
        let d = demo.action_dim();
        Self {
            targets: norm.actions.apply_rows(demo.actions.view()),
            horizon,
            pad: norm.actions.apply(&vec![0.0; d]),
            evals: AtomicU64::new(0),
        }
    }

    fn target(&self, step: usize) -> Array2<f64> {
        let d = self.targets.ncols();
        Array2::from_shape_fn((self.horizon, d), |(i, j)| {
            self.targets
                .get([step + i, j])
                .copied()
                .unwrap_or(self.pad[j])
        })
    }
}

impl VelocityModel for ExpertOracle {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn action_dim(&self) -> usize {
        self.targets.ncols()
    }

    fn velocity(&self, state: &FlowState) -> Result<Array2<f64>> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let m1 = self.target(state.observation.step);
        check_dim("oracle state rows", m1.nrows(), state.state.nrows())?;
        if state.time >= 1.0 {
            return Ok(Array2::zeros(m1.dim()));
        }
        let w = 1.0 - state.time;
        Ok((m1 - &state.state) / w)
    }

    fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    ClosedLoop,
    OpenLoop,
}

impl std::str::FromStr for RolloutMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_loop" => Ok(RolloutMode::ClosedLoop),
            "open_loop" => Ok(RolloutMode::OpenLoop),
            _ => Err(Error::Config(format!("unknown rollout mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub mode: RolloutMode,
    /// Steps executed per decision in closed loop.
    pub exec_steps: usize,
    pub max_steps: usize,
    pub inference: Inference,
    /// Open-loop start step in the expert episode.
    pub start_step: usize,
}

impl RolloutConfig {
    pub fn closed_loop(exec_steps: usize, max_steps: usize) -> Self {
        Self {
            mode: RolloutMode::ClosedLoop,
            exec_steps,
            max_steps,
            inference: Inference::OneStep,
            start_step: 0,
        }
    }

    pub fn open_loop(start_step: usize) -> Self {
        Self {
            mode: RolloutMode::OpenLoop,
            exec_steps: 0,
            max_steps: usize::MAX,
            inference: Inference::OneStep,
            start_step,
        }
    }
}

/// A synthetic task instance: the expert episode supplies the start state,
/// task context and the ground truth the rollout is compared with.
#[derive(Debug, Clone, Copy)]
pub struct TaskEnv<'a> {
    pub demo: &'a Demonstration,
    pub normalization: &'a Normalization,
    pub horizon: Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub mode: RolloutMode,
    pub start_step: usize,
    /// Policy positions after each executed step.
    pub positions: Vec<Vec<f64>>,
    /// Expert positions at the same steps.
    pub expert_positions: Vec<Vec<f64>>,
    /// Executed (denormalized) actions.
    pub actions: Vec<Vec<f64>>,
    pub expert_actions: Vec<Vec<f64>>,
    pub inference_calls: usize,
    pub nfe_per_decision: usize,
    pub truncated: bool,
}

impl RolloutTrace {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn rows(a: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn rollout<M: VelocityModel + ?Sized>(
    model: &M,
    env: TaskEnv<'_>,
    cfg: &RolloutConfig,
    rng: &mut StreamRng,
) -> Result<RolloutTrace> {
    let l = env.horizon.len();
    check_dim("model horizon", l, model.horizon())?;
    let demo = env.demo;
    let d = demo.action_dim();
    let n_obs = env.horizon.obs_steps;
    let observe = |history: ArrayView2<'_, f64>, t: usize| {
        let raw = demo.observation_from(history, t, n_obs);
        Observation {
            values: env.normalization.observations.apply(&raw.values),
            step: raw.step,
        }
    };

    match cfg.mode {
        RolloutMode::OpenLoop => {
            let t0 = cfg.start_step;
            if t0 + l > demo.len() {
                return Err(Error::Range {
                    context: "open-loop start step",
                    value: t0 as f64,
                    min: 0.0,
                    max: demo.len().saturating_sub(l) as f64,
                });
            }
            let obs = observe(demo.states.view(), t0);
            let pred = cfg.inference.run(model, &obs, rng)?;
            let actions = env.normalization.actions.invert_rows(pred.view());
            let expert = demo.actions.slice(s![t0..t0 + l, ..]);
            let cumsum = |a: ArrayView2<'_, f64>| {
                let mut p = vec![0.0; d];
                a.rows()
                    .into_iter()
                    .map(|r| {
                        for j in 0..d {
                            p[j] += r[j];
                        }
                        p.clone()
                    })
                    .collect::<Vec<_>>()
            };
            Ok(RolloutTrace {
                mode: cfg.mode,
                start_step: t0,
                positions: cumsum(actions.view()),
                expert_positions: cumsum(expert),
                actions: rows(actions.view()),
                expert_actions: rows(expert),
                inference_calls: 1,
                nfe_per_decision: cfg.inference.nfe(),
                truncated: false,
            })
        }
        RolloutMode::ClosedLoop => {
            if cfg.exec_steps == 0 || cfg.exec_steps > l {
                return Err(Error::Range {
                    context: "closed-loop execution steps",
                    value: cfg.exec_steps as f64,
                    min: 1.0,
                    max: l as f64,
                });
            }
            let episode = demo.len();
            let mut history = Array2::zeros((episode + 1, d));
            history.row_mut(0).assign(&demo.states.row(0));
            let mut executed = Vec::new();
            let mut t = 0;
            let mut calls = 0;
            while t < episode && t < cfg.max_steps {
                let obs = observe(history.view(), t);
                let pred = cfg.inference.run(model, &obs, rng)?;
                calls += 1;
                let actions = env.normalization.actions.invert_rows(pred.view());
                for a in actions.rows().into_iter().take(cfg.exec_steps) {
                    if t >= episode || t >= cfg.max_steps {
                        break;
                    }
                    let next = &history.row(t) + &a;
                    history.row_mut(t + 1).assign(&next);
                    executed.push(a.to_vec());
                    t += 1;
                }
            }
            Ok(RolloutTrace {
                mode: cfg.mode,
                start_step: 0,
                positions: rows(history.slice(s![1..=t, ..])),
                expert_positions: rows(demo.states.slice(s![1..=t, ..])),
                actions: executed,
                expert_actions: rows(demo.actions.slice(s![0..t, ..])),
                inference_calls: calls,
                nfe_per_decision: cfg.inference.nfe(),
                truncated: t < episode,
            })
        }
    }
}
