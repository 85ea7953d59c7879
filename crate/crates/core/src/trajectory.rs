//! Trajectory data: action chunks, macro-trajectories, observations,
//! synthetic expert demonstrations and the normalized training dataset.
//!
//! Actions are per-step position deltas, so a demonstration's states are the
//! running sum of its actions starting from the initial position.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, StreamRng};

pub const DEMO_FORMAT_VERSION: &str = "focalflow-demos/1";

/// Default number of stacked past positions in an observation.
pub const DEFAULT_OBS_STEPS: usize = 2;

/// Lissajous base period in environment steps.
const LISSAJOUS_PERIOD: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "lissajous")]
    Lissajous,
    #[serde(rename = "reach")]
    Reach,
    #[serde(rename = "pick-sketch")]
    PickSketch,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Lissajous, TaskKind::Reach, TaskKind::PickSketch];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Lissajous => "lissajous",
            TaskKind::Reach => "reach",
            TaskKind::PickSketch => "pick-sketch",
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            TaskKind::Lissajous | TaskKind::Reach => 2,
            TaskKind::PickSketch => 3,
        }
    }

    /// Length of the task context carried in every observation.
    pub fn context_dim(self) -> usize {
        match self {
            TaskKind::Lissajous => 0,
            TaskKind::Reach => 2,
            TaskKind::PickSketch => 6,
        }
    }

    /// Observation width for `n_obs` stacked positions: positions, task
    /// context, then the episode phase `t / T`.
    pub fn obs_dim(self, n_obs: usize) -> usize {
        n_obs * self.action_dim() + self.context_dim() + 1
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task '{s}' (expected lissajous, reach or pick-sketch)")))
    }
}

fn check_finite(context: &'static str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Config(format!("{context}: non-finite entry")))
    }
}

/// `H` consecutive actions starting at environment step `start_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub actions: Array2<f64>,
    pub start_step: usize,
}

impl ActionChunk {
    pub fn new(actions: Array2<f64>, start_step: usize) -> Result<Self> {
        if actions.nrows() == 0 || actions.ncols() == 0 {
            return Err(Error::Config("action chunk needs H >= 1 and d >= 1".into()));
        }
        check_finite("action chunk", actions.iter().copied())?;
        Ok(Self { actions, start_step })
    }

    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.nrows() == 0
    }
}

/// `N` concatenated chunks of `H` steps, an `L × d` array with `L = N·H`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroTrajectory {
    actions: Array2<f64>,
    chunk_size: usize,
    num_chunks: usize,
}

impl MacroTrajectory {
    pub fn new(actions: Array2<f64>, chunk_size: usize, num_chunks: usize) -> Result<Self> {
        if chunk_size == 0 || num_chunks == 0 {
            return Err(Error::Config("macro-trajectory needs H >= 1 and N >= 1".into()));
        }
        check_dim("macro-trajectory rows (N*H)", chunk_size * num_chunks, actions.nrows())?;
        check_finite("macro-trajectory", actions.iter().copied())?;
        Ok(Self {
            actions,
            chunk_size,
            num_chunks,
        })
    }

    pub fn actions(&self) -> ArrayView2<'_, f64> {
        self.actions.view()
    }

    pub fn into_actions(self) -> Array2<f64> {
        self.actions
    }

    pub fn horizon(&self) -> usize {
        self.actions.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn num_chunks(&self) -> usize {
        self.num_chunks
    }

    /// Split back into `N` chunks whose start steps begin at `start_step`.
    pub fn split(&self, start_step: usize) -> Vec<ActionChunk> {
        (0..self.num_chunks)
            .map(|k| ActionChunk {
                actions: self
                    .actions
                    .slice(s![k * self.chunk_size..(k + 1) * self.chunk_size, ..])
                    .to_owned(),
                start_step: start_step + k * self.chunk_size,
            })
            .collect()
    }
}

/// Stack `N` consecutive chunks into one macro-trajectory.
pub fn concat_chunks(chunks: &[ActionChunk]) -> Result<MacroTrajectory> {
    let first = chunks
        .first()
        .ok_or_else(|| Error::Config("concat_chunks needs at least one chunk".into()))?;
    let (h, d) = first.actions.dim();
    for (k, c) in chunks.iter().enumerate() {
        check_dim("chunk length H", h, c.actions.nrows())?;
        check_dim("chunk action dim d", d, c.actions.ncols())?;
        let want = first.start_step + k * h;
        if c.start_step != want {
            return Err(Error::Ordering(format!(
                "chunk {k} starts at step {} but step {want} was expected",
                c.start_step
            )));
        }
    }
    let views: Vec<_> = chunks.iter().map(|c| c.actions.view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| Error::Config(format!("concat_chunks: {e}")))?;
    MacroTrajectory::new(stacked, h, chunks.len())
}

/// Flattened conditioning vector. `step` is bookkeeping only and is never
/// fed to the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
    pub step: usize,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One expert episode: `T + 1` positions and the `T` deltas between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task: TaskKind,
    pub seed: u64,
    pub index: usize,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    /// Task context (goal / waypoints) exposed to the policy.
    pub context: Vec<f64>,
}

impl Demonstration {
    /// Build a demonstration from actions by running the state recurrence.
    pub fn from_actions(
        task: TaskKind,
        seed: u64,
        index: usize,
        start: &[f64],
        actions: Array2<f64>,
        context: Vec<f64>,
    ) -> Result<Self> {
        check_dim("demonstration action dim", start.len(), actions.ncols())?;
        check_dim("demonstration context", task.context_dim(), context.len())?;
        let t = actions.nrows();
        let mut states = Array2::zeros((t + 1, start.len()));
        for (j, &x) in start.iter().enumerate() {
            states[[0, j]] = x;
        }
        for k in 0..t {
            for j in 0..start.len() {
                states[[k + 1, j]] = states[[k, j]] + actions[[k, j]];
            }
        }
        Ok(Self {
            task,
            seed,
            index,
            states,
            actions,
            context,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.nrows() == 0
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    /// Goal used by the success criterion, when the task has one.
    pub fn goal(&self) -> Option<&[f64]> {
        match self.task {
            TaskKind::Lissajous => None,
            TaskKind::Reach => Some(&self.context[..2]),
            TaskKind::PickSketch => Some(&self.context[3..6]),
        }
    }

    /// Observation at step `t` built from an arbitrary position history.
    /// `history[k]` is the position at step `k`; missing past steps clamp to 0.
    pub fn observation_from(&self, history: ArrayView2<'_, f64>, t: usize, n_obs: usize) -> Observation {
        let d = self.action_dim();
        let mut values = Vec::with_capacity(self.task.obs_dim(n_obs));
        for back in 0..n_obs {
            let k = t.saturating_sub(back);
            values.extend((0..d).map(|j| history[[k, j]]));
        }
        values.extend_from_slice(&self.context);
        values.push(t as f64 / self.len().max(1) as f64);
        Observation { values, step: t }
    }

    pub fn observation(&self, t: usize, n_obs: usize) -> Observation {
        self.observation_from(self.states.view(), t, n_obs)
    }
}

/// Observation at `t` and the expert macro-trajectory `actions[t .. t+NH]`.
pub fn extract_macro(
    demo: &Demonstration,
    t: usize,
    chunk_size: usize,
    num_chunks: usize,
    n_obs: usize,
) -> Result<(Observation, MacroTrajectory)> {
    let l = chunk_size * num_chunks;
    if t + l > demo.len() {
        return Err(Error::Range {
            context: "extract_macro start step (t + N*H must fit in the demonstration)",
            value: t as f64,
            min: 0.0,
            max: demo.len() as f64 - l as f64,
        });
    }
    let actions = demo.actions.slice(s![t..t + l, ..]).to_owned();
    Ok((
        demo.observation(t, n_obs),
        MacroTrajectory::new(actions, chunk_size, num_chunks)?,
    ))
}

fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

fn uniform_point(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Nominal waypoints of the pick-and-place layout; each episode jitters them.
const PICK_LAYOUT: [[f64; 3]; 3] = [[-0.6, -0.6, 0.5], [0.4, -0.3, -0.5], [-0.1, 0.6, 0.2]];
const PICK_JITTER: f64 = 0.25;

fn jittered_point(rng: &mut StreamRng, centre: &[f64], half_width: f64) -> Vec<f64> {
    centre.iter().map(|c| c + rng.random_range(-half_width..half_width)).collect()
}

fn lerp_points(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + (y - x) * w).collect()
}

/// Closed-form positions `p(0..=T)` and context for one expert episode.
fn expert_positions(task: TaskKind, rng: &mut StreamRng, length: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let t_len = length as f64;
    match task {
        TaskKind::Lissajous => {
            let amp = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
            let phase = [
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ];
            let freq = [1.0, 2.0];
            let w = std::f64::consts::TAU / LISSAJOUS_PERIOD as f64;
            let pos = (0..=length)
                .map(|k| (0..2).map(|j| amp[j] * (w * freq[j] * k as f64 + phase[j]).sin()).collect())
                .collect();
            (pos, Vec::new())
        }
        TaskKind::Reach => {
            let start = uniform_point(rng, 2);
            let goal = uniform_point(rng, 2);
            let pos = (0..=length)
                .map(|k| lerp_points(&start, &goal, min_jerk(k as f64 / t_len)))
                .collect();
            (pos, goal)
        }
        TaskKind::PickSketch => {
            let start = jittered_point(rng, &PICK_LAYOUT[0], PICK_JITTER);
            let pick = jittered_point(rng, &PICK_LAYOUT[1], PICK_JITTER);
            let place = jittered_point(rng, &PICK_LAYOUT[2], PICK_JITTER);
            let reach_steps = ((0.4 * t_len).round() as usize).max(1);
            let pause_steps = (0.2 * t_len).round() as usize;
            let carry_start = reach_steps + pause_steps;
            let carry_steps = length.saturating_sub(carry_start).max(1);
            let pos = (0..=length)
                .map(|k| {
                    if k <= reach_steps {
                        lerp_points(&start, &pick, min_jerk(k as f64 / reach_steps as f64))
                    } else if k <= carry_start {
                        pick.clone()
                    } else {
                        lerp_points(&pick, &place, min_jerk((k - carry_start) as f64 / carry_steps as f64))
                    }
                })
                .collect();
            let mut ctx = pick;
            ctx.extend_from_slice(&place);
            (pos, ctx)
        }
    }
}

/// Deterministic synthetic expert demonstrations for `task`.
pub fn generate_expert(task: TaskKind, seed: u64, count: usize, length: usize) -> Result<Vec<Demonstration>> {
    if length == 0 {
        return Err(Error::Config("demonstration length must be positive".into()));
    }
    (0..count)
        .map(|index| {
            let mut r = rng::stream(seed, task.name(), index as u64);
            let (pos, context) = expert_positions(task, &mut r, length);
            let d = task.action_dim();
            let actions = Array2::from_shape_fn((length, d), |(k, j)| pos[k + 1][j] - pos[k][j]);
            Demonstration::from_actions(task, seed, index, &pos[0], actions, context)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DemoRecord {
    version: String,
    task: TaskKind,
    seed: u64,
    index: usize,
    steps: usize,
    dim: usize,
    context: Vec<f64>,
    /// Row-major `(steps + 1) × dim`.
    states: Vec<f64>,
    /// Row-major `steps × dim`.
    actions: Vec<f64>,
}

/// Write demonstrations as one JSON record per line.
pub fn write_demos(path: &Path, demos: &[Demonstration]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in demos {
        let rec = DemoRecord {
            version: DEMO_FORMAT_VERSION.to_string(),
            task: d.task,
            seed: d.seed,
            index: d.index,
            steps: d.len(),
            dim: d.action_dim(),
            context: d.context.clone(),
            states: d.states.iter().copied().collect(),
            actions: d.actions.iter().copied().collect(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::parse(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_demos(path: &Path) -> Result<Vec<Demonstration>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut demos = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DemoRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
        if rec.version != DEMO_FORMAT_VERSION {
            return Err(Error::parse(path, format!("line {}: unsupported version '{}'", lineno + 1, rec.version)));
        }
        let bad = |m: &str| Error::parse(path, format!("line {}: {m}", lineno + 1));
        let states = Array2::from_shape_vec((rec.steps + 1, rec.dim), rec.states).map_err(|_| bad("states shape"))?;
        let actions = Array2::from_shape_vec((rec.steps, rec.dim), rec.actions).map_err(|_| bad("actions shape"))?;
        demos.push(Demonstration {
            task: rec.task,
            seed: rec.seed,
            index: rec.index,
            states,
            actions,
            context: rec.context,
        });
    }
    Ok(demos)
}

/// Per-dimension affine map `x ↦ (x − shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    pub fn identity(n: usize) -> Self {
        Self {
            shift: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Mean / standard deviation over `rows`; near-constant columns keep scale 1.
    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let collected: Vec<&[f64]> = rows.collect();
        for r in &collected {
            n += 1;
            for j in 0..dim {
                sum[j] += r[j];
            }
        }
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        for r in &collected {
            for j in 0..dim {
                sq[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let scale = sq
            .iter()
            .map(|s| {
                let sd = (s / nf).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { shift: mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Apply column-wise to an `n × dim` array.
    pub fn apply_rows(&self, a: ArrayView2<'_, f64>) -> Array2<f64> {
        Array2::from_shape_fn(a.dim(), |(i, j)| (a[[i, j]] - self.shift[j]) / self.scale[j])
    }

    pub fn invert_rows(&self, a: ArrayView2<'_, f64>) -> Array2<f64> {
        Array2::from_shape_fn(a.dim(), |(i, j)| a[[i, j]] * self.scale[j] + self.shift[j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub actions: Affine,
    pub observations: Affine,
}

/// Horizon layout shared by the dataset, network and rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Horizon {
    pub chunk_size: usize,
    pub num_chunks: usize,
    pub obs_steps: usize,
}

impl Horizon {
    pub fn new(chunk_size: usize, num_chunks: usize, obs_steps: usize) -> Result<Self> {
        if chunk_size == 0 || num_chunks == 0 || obs_steps == 0 {
            return Err(Error::Config("H, N and n_obs must all be positive".into()));
        }
        Ok(Self {
            chunk_size,
            num_chunks,
            obs_steps,
        })
    }

    pub fn len(&self) -> usize {
        self.chunk_size * self.num_chunks
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Default for Horizon {
    fn default() -> Self {
        Self {
            chunk_size: 4,
            num_chunks: 3,
            obs_steps: DEFAULT_OBS_STEPS,
        }
    }
}

/// A normalized training example.
#[derive(Debug, Clone)]
pub struct Window {
    pub observation: Vec<f64>,
    /// Normalized `L × d` expert macro-trajectory.
    pub target: Array2<f64>,
}

/// Demonstrations of one task plus the fitted normalization. Immutable once assembled.
#[derive(Debug, Clone)]
pub struct Dataset {
    task: TaskKind,
    horizon: Horizon,
    demos: Vec<Demonstration>,
    normalization: Normalization,
    windows: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn assemble(demos: Vec<Demonstration>, horizon: Horizon) -> Result<Self> {
        let first = demos
            .first()
            .ok_or_else(|| Error::Config("dataset needs at least one demonstration".into()))?;
        let task = first.task;
        let l = horizon.len();
        let mut windows = Vec::new();
        for (i, d) in demos.iter().enumerate() {
            if d.task != task {
                return Err(Error::Config(format!("mixed tasks in dataset: {} and {}", task, d.task)));
            }
            if d.len() < l {
                return Err(Error::Range {
                    context: "demonstration length (must be >= N*H)",
                    value: d.len() as f64,
                    min: l as f64,
                    max: f64::INFINITY,
                });
            }
            windows.extend((0..=d.len() - l).map(|t| (i, t)));
        }
        let d = task.action_dim();
        let actions = Affine::fit(
            d,
            demos
                .iter()
                .flat_map(|demo| demo.actions.rows().into_iter().map(|r| r.to_slice().unwrap())),
        );
        let obs: Vec<Vec<f64>> = windows
            .iter()
            .map(|&(i, t)| demos[i].observation(t, horizon.obs_steps).values)
            .collect();
        let observations = Affine::fit(task.obs_dim(horizon.obs_steps), obs.iter().map(|v| v.as_slice()));
        Ok(Self {
            task,
            horizon,
            demos,
            normalization: Normalization { actions, observations },
            windows,
        })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn action_dim(&self) -> usize {
        self.task.action_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.task.obs_dim(self.horizon.obs_steps)
    }

    /// Number of valid `(demo, t)` extraction windows (one epoch).
    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn window(&self, k: usize) -> Window {
        let (i, t) = self.windows[k];
        let h = self.horizon;
        let (obs, m) = extract_macro(&self.demos[i], t, h.chunk_size, h.num_chunks, h.obs_steps)
            .expect("window indices are valid by construction");
        Window {
            observation: self.normalization.observations.apply(&obs.values),
            target: self.normalization.actions.apply_rows(m.actions()),
        }
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, rng: &mut StreamRng, batch: usize) -> Vec<Window> {
        (0..batch)
            .map(|_| self.window(rng.random_range(0..self.windows.len())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn concat_examples() {
        let a = ActionChunk::new(array![[1.0], [2.0]], 0).unwrap();
        let b = ActionChunk::new(array![[3.0], [4.0]], 2).unwrap();
        let m = concat_chunks(&[a.clone(), b]).unwrap();
        assert_eq!(m.actions().column(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let single = concat_chunks(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.actions(), a.actions.view());

        let chunks: Vec<_> = (0..3)
            .map(|k| ActionChunk::new(Array2::from_elem((4, 7), k as f64), 10 + 4 * k).unwrap())
            .collect();
        let m = concat_chunks(&chunks).unwrap();
        assert_eq!(m.actions().dim(), (12, 7));
    }

    #[test]
    fn concat_errors() {
        let a = ActionChunk::new(array![[1.0], [2.0]], 0).unwrap();
        let wrong_h = ActionChunk::new(array![[3.0]], 2).unwrap();
        assert!(matches!(concat_chunks(&[a.clone(), wrong_h]), Err(Error::Dimension { .. })));
        let wrong_d = ActionChunk::new(array![[3.0, 1.0], [4.0, 1.0]], 2).unwrap();
        assert!(matches!(concat_chunks(&[a.clone(), wrong_d]), Err(Error::Dimension { .. })));
        let gap = ActionChunk::new(array![[3.0], [4.0]], 3).unwrap();
        assert!(matches!(concat_chunks(&[a, gap]), Err(Error::Ordering(_))));
    }

    #[test]
    fn extract_windows_and_clamp() {
        let demo = &generate_expert(TaskKind::Reach, 3, 1, 36).unwrap()[0];
        assert!(extract_macro(demo, 24, 4, 3, 2).is_ok());
        let err = extract_macro(demo, 25, 4, 3, 2).unwrap_err();
        assert!(matches!(err, Error::Range { max, .. } if max == 24.0));

        let (obs, m) = extract_macro(demo, 0, 4, 3, 2).unwrap();
        assert_eq!(&obs.values[0..2], &obs.values[2..4]);
        assert_eq!(&obs.values[0..2], demo.states.row(0).to_slice().unwrap());
        assert_eq!(m.horizon(), 12);

        // Reconstructing states from the extracted actions reproduces the demo.
        let t = 7;
        let (_, m) = extract_macro(demo, t, 4, 3, 2).unwrap();
        let mut p = demo.states.row(t).to_owned();
        for k in 0..12 {
            p += &m.actions().row(k);
            assert_eq!(p, demo.states.row(t + k + 1));
        }
    }

    #[test]
    fn generators_are_deterministic_and_exact() {
        for task in TaskKind::ALL {
            let a = generate_expert(task, 11, 3, 200).unwrap();
            let b = generate_expert(task, 11, 3, 200).unwrap();
            assert_eq!(a, b);
            for d in &a {
                assert_eq!(d.action_dim(), task.action_dim());
                for k in 0..d.len() {
                    for j in 0..d.action_dim() {
                        assert_eq!(d.states[[k + 1, j]], d.states[[k, j]] + d.actions[[k, j]]);
                    }
                }
            }
        }
    }

    #[test]
    fn reach_ends_at_goal() {
        for d in generate_expert(TaskKind::Reach, 5, 4, 200).unwrap() {
            let last = d.states.row(d.len());
            let goal = d.goal().unwrap();
            // Closed-form minimum-jerk endpoint: s(1) = 10 - 15 + 6 = 1.
            for j in 0..2 {
                assert!((last[j] - goal[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lissajous_closes_over_a_period() {
        for d in generate_expert(TaskKind::Lissajous, 2, 3, 200).unwrap() {
            for j in 0..2 {
                let s: f64 = d.actions.column(j).iter().take(LISSAJOUS_PERIOD).sum();
                assert!(s.abs() / (LISSAJOUS_PERIOD as f64) < 1e-6, "{s}");
            }
        }
    }

    #[test]
    fn pick_sketch_pauses_then_places() {
        let d = &generate_expert(TaskKind::PickSketch, 1, 1, 200).unwrap()[0];
        assert!(d.actions.slice(s![81..120, ..]).iter().all(|&v| v == 0.0));
        let last = d.states.row(200);
        for j in 0..3 {
            assert!((last[j] - d.goal().unwrap()[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn unknown_task_is_config_error() {
        assert!(matches!("push-t".parse::<TaskKind>(), Err(Error::Config(_))));
        assert_eq!("pick-sketch".parse::<TaskKind>().unwrap(), TaskKind::PickSketch);
    }

    #[test]
    fn dataset_normalization_statistics() {
        let demos = generate_expert(TaskKind::PickSketch, 0, 10, 200).unwrap();
        let ds = Dataset::assemble(demos, Horizon::default()).unwrap();
        assert_eq!(ds.num_windows(), 10 * 189);
        let norm = ds.normalization();
        for j in 0..3 {
            let col: Vec<f64> = ds
                .demos()
                .iter()
                .flat_map(|d| d.actions.column(j).to_vec())
                .map(|v| (v - norm.actions.shift[j]) / norm.actions.scale[j])
                .collect();
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() <= 0.05 && (0.8..=1.2).contains(&sd), "{mean} {sd}");
        }
    }

    #[test]
    fn demo_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        let demos = generate_expert(TaskKind::Lissajous, 9, 2, 40).unwrap();
        write_demos(&path, &demos).unwrap();
        assert_eq!(read_demos(&path).unwrap(), demos);
        write_demos(&path, &[]).unwrap();
        assert!(read_demos(&path).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn split_then_concat_is_identity(h in 1usize..6, n in 1usize..5, d in 1usize..4, start in 0usize..50, seed in 0u64..1000) {
            let m = Array2::from_shape_fn((h * n, d), |(i, j)| ((seed as usize + i * 31 + j * 7) % 97) as f64 / 10.0);
            let m = MacroTrajectory::new(m, h, n).unwrap();
            prop_assert_eq!(concat_chunks(&m.split(start)).unwrap(), m);
        }

        #[test]
        fn normalization_round_trip(x in prop::collection::vec(-100.0f64..100.0, 3), shift in prop::collection::vec(-5.0f64..5.0, 3), scale in prop::collection::vec(0.01f64..10.0, 3)) {
            let a = Affine { shift, scale };
            let back = a.invert(&a.apply(&x));
            for (p, q) in back.iter().zip(&x) {
                prop_assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
            }
        }
    }
}
