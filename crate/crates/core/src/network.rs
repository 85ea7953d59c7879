//! The velocity field `v_θ(M_τ, τ, o)`: a fully-connected tanh network over
//! `[flatten(M_τ), embed(τ), o]`, its reverse-mode gradient, and the EMA
//! shadow used as the stop-gradient teacher.
//!
//! Parameters live in one flat `Vec<f64>`; layer `k` stores its weight
//! matrix (`out × in`, row-major) followed by its bias. Optimizers, EMA and
//! checkpoints all work on that flat vector.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::StreamRng;
use crate::trajectory::Observation;

/// A noisy macro-trajectory at flow time `time`, with its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub state: Array2<f64>,
    pub time: f64,
    pub observation: Observation,
}

impl FlowState {
    pub fn new(state: Array2<f64>, time: f64, observation: Observation) -> Result<Self> {
        if !(0.0..=1.0).contains(&time) {
            return Err(Error::Range {
                context: "flow time",
                value: time,
                min: 0.0,
                max: 1.0,
            });
        }
        Ok(Self {
            state,
            time,
            observation,
        })
    }
}

/// Anything that maps a flow state to an `L × d` velocity.
pub trait VelocityModel: Sync {
    fn horizon(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn velocity(&self, state: &FlowState) -> Result<Array2<f64>>;
    /// Total single-sample network evaluations so far.
    fn evaluations(&self) -> u64;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Macro-horizon `L`.
    pub horizon: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
}

impl FieldConfig {
    pub fn new(horizon: usize, action_dim: usize, obs_dim: usize) -> Self {
        Self {
            horizon,
            action_dim,
            obs_dim,
            hidden: vec![128, 128],
            time_embed_dim: 16,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.horizon * self.action_dim + self.time_embed_dim + self.obs_dim
    }

    pub fn output_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.output_dim());
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layer_offsets(&self) -> Vec<(usize, usize, usize)> {
        // (offset, fan_in, fan_out)
        let mut off = 0;
        self.layer_sizes()
            .windows(2)
            .map(|w| {
                let o = off;
                off += w[0] * w[1] + w[1];
                (o, w[0], w[1])
            })
            .collect()
    }
}

/// Sinusoidal features of the flow time, frequencies spaced geometrically in `[1, 100]`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freq = |k: usize| {
        if half > 1 {
            (100f64.ln() * k as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        }
    };
    out.extend((0..half).map(|k| (freq(k) * t).sin()));
    out.extend((0..half).map(|k| (freq(k) * t).cos()));
    if dim % 2 == 1 {
        out.push(t);
    }
    out
}

#[derive(Debug)]
pub struct VelocityField {
    config: FieldConfig,
    params: Vec<f64>,
    evals: AtomicU64,
}

impl Clone for VelocityField {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            evals: AtomicU64::new(0),
        }
    }
}

impl PartialEq for VelocityField {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl VelocityField {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: FieldConfig, rng: &mut StreamRng) -> Self {
        let mut params = vec![0.0; config.param_count()];
        for (off, fan_in, fan_out) in config.layer_offsets() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Self::from_params(config, params).expect("sized from config")
    }

    pub fn zeros(config: FieldConfig) -> Self {
        let n = config.param_count();
        Self::from_params(config, vec![0.0; n]).expect("sized from config")
    }

    pub fn from_params(config: FieldConfig, params: Vec<f64>) -> Result<Self> {
        check_dim("parameter vector length", config.param_count(), params.len())?;
        Ok(Self {
            config,
            params,
            evals: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn input_matrix(&self, states: &[FlowState]) -> Result<Array2<f64>> {
        let c = &self.config;
        let mut x = Array2::zeros((states.len(), c.input_dim()));
        for (b, s) in states.iter().enumerate() {
            check_dim("flow state rows (L)", c.horizon, s.state.nrows())?;
            check_dim("flow state columns (d)", c.action_dim, s.state.ncols())?;
            check_dim("observation length", c.obs_dim, s.observation.len())?;
            let mut row = x.row_mut(b);
            let mut k = 0;
            for v in s.state.iter() {
                row[k] = *v;
                k += 1;
            }
            for v in time_embedding(s.time, c.time_embed_dim) {
                row[k] = v;
                k += 1;
            }
            for v in &s.observation.values {
                row[k] = *v;
                k += 1;
            }
        }
        Ok(x)
    }

    /// Runs the layers, keeping every activation (input first, output last).
    fn run(&self, input: Array2<f64>) -> Vec<Array2<f64>> {
        let layers = self.config.layer_offsets();
        let last = layers.len() - 1;
        let mut acts = vec![input];
        for (k, &(off, fan_in, fan_out)) in layers.iter().enumerate() {
            let w = ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_in * fan_out]).unwrap();
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let mut z = acts[k].dot(&w.t());
            for mut row in z.rows_mut() {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
            }
            if k != last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        self.evals.fetch_add(acts[0].nrows() as u64, Ordering::Relaxed);
        acts
    }

    /// Batched forward pass; row `b` is the row-major flattened `L × d` velocity.
    pub fn forward_batch(&self, states: &[FlowState]) -> Result<Array2<f64>> {
        let x = self.input_matrix(states)?;
        Ok(self.run(x).pop().unwrap())
    }

    pub fn forward(&self, state: &FlowState) -> Result<Array2<f64>> {
        let out = self.forward_batch(std::slice::from_ref(state))?;
        Ok(unflatten(out.row(0).to_vec(), self.config.horizon, self.config.action_dim))
    }

    /// Parameter gradient given the recorded activations and `∂loss/∂output`.
    fn backprop(&self, acts: &[Array2<f64>], upstream: &Array2<f64>, grad: &mut [f64]) {
        let layers = self.config.layer_offsets();
        let mut delta = upstream.clone();
        for (k, &(off, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let a_in = &acts[k];
            // dW = deltaᵀ · a_in, db = Σ_rows delta
            let dw = delta.t().dot(a_in);
            for (g, v) in grad[off..off + fan_in * fan_out].iter_mut().zip(dw.iter()) {
                *g += v;
            }
            let db = delta.sum_axis(Axis(0));
            for (g, v) in grad[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]
                .iter_mut()
                .zip(db.iter())
            {
                *g += v;
            }
            if k > 0 {
                let w = ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_in * fan_out]).unwrap();
                let mut d_in = delta.dot(&w);
                // a_in = tanh(z) for hidden layers
                d_in.zip_mut_with(a_in, |d, h| *d *= 1.0 - h * h);
                delta = d_in;
            }
        }
    }
}

impl VelocityModel for VelocityField {
    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    fn velocity(&self, state: &FlowState) -> Result<Array2<f64>> {
        self.forward(state)
    }

    fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

pub(crate) fn unflatten(v: Vec<f64>, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), v).expect("flat velocity has L*d entries")
}

/// Handle to a recorded forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Record {
    acts: Vec<Array2<f64>>,
    upstream: Option<Array2<f64>>,
}

/// Records forward passes of one live network so that gradients of a scalar
/// loss with respect to its parameters can be pulled back. Passes through any
/// other network (the EMA teacher) are not recorded and therefore act as
/// constants.
pub struct Tape<'a> {
    net: &'a VelocityField,
    records: Vec<Record>,
}

impl<'a> Tape<'a> {
    pub fn new(net: &'a VelocityField) -> Self {
        Self {
            net,
            records: Vec::new(),
        }
    }

    pub fn net(&self) -> &VelocityField {
        self.net
    }

    /// Recorded batched forward pass. Returns one `L × d` velocity per state.
    pub fn forward(&mut self, states: &[FlowState]) -> Result<(NodeId, Vec<Array2<f64>>)> {
        let x = self.net.input_matrix(states)?;
        let acts = self.net.run(x);
        let c = &self.net.config;
        let out = acts
            .last()
            .unwrap()
            .rows()
            .into_iter()
            .map(|r| unflatten(r.to_vec(), c.horizon, c.action_dim))
            .collect();
        self.records.push(Record { acts, upstream: None });
        Ok((NodeId(self.records.len() - 1), out))
    }

    /// Accumulate `∂loss/∂velocity` for every sample of node `id`.
    pub fn seed(&mut self, id: NodeId, grads: &[Array2<f64>]) -> Result<()> {
        let c = &self.net.config;
        let rec = self
            .records
            .get_mut(id.0)
            .ok_or_else(|| Error::State(format!("unknown tape node {}", id.0)))?;
        let b = rec.acts[0].nrows();
        check_dim("seeded gradient batch", b, grads.len())?;
        let mut flat = Array2::zeros((b, c.output_dim()));
        for (i, g) in grads.iter().enumerate() {
            check_dim("seeded gradient rows (L)", c.horizon, g.nrows())?;
            check_dim("seeded gradient columns (d)", c.action_dim, g.ncols())?;
            for (dst, src) in flat.row_mut(i).iter_mut().zip(g.iter()) {
                *dst = *src;
            }
        }
        match &mut rec.upstream {
            Some(u) => *u += &flat,
            None => rec.upstream = Some(flat),
        }
        Ok(())
    }

    /// Drop all seeded gradients but keep the recorded passes.
    pub fn clear_seeds(&mut self) {
        for r in &mut self.records {
            r.upstream = None;
        }
    }

    /// Gradient of the seeded scalar with respect to every live parameter.
    pub fn backward(&self) -> Result<Vec<f64>> {
        if self.records.is_empty() {
            return Err(Error::State("backward called with no recorded forward pass".into()));
        }
        let mut grad = vec![0.0; self.net.param_count()];
        for r in &self.records {
            if let Some(u) = &r.upstream {
                self.net.backprop(&r.acts, u, &mut grad);
            }
        }
        Ok(grad)
    }
}

/// EMA copy of the live parameters, `θ⁻ ← β θ⁻ + (1 − β) θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    field: VelocityField,
    max_decay: f64,
}

pub const EMA_MAX_DECAY: f64 = 0.9999;

impl EmaShadow {
    pub fn new(live: &VelocityField, max_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&max_decay) {
            return Err(Error::Range {
                context: "EMA decay",
                value: max_decay,
                min: 0.0,
                max: 1.0,
            });
        }
        Ok(Self {
            field: live.clone(),
            max_decay,
        })
    }

    pub fn from_params(config: FieldConfig, params: Vec<f64>, max_decay: f64) -> Result<Self> {
        let field = VelocityField::from_params(config, params)?;
        Self::new(&field, max_decay)
    }

    pub fn field(&self) -> &VelocityField {
        &self.field
    }

    pub fn max_decay(&self) -> f64 {
        self.max_decay
    }

    /// Warmup-capped decay `min(β_max, (1 + step) / (10 + step))`.
    pub fn decay_at(&self, step: u64) -> f64 {
        self.max_decay.min((1.0 + step as f64) / (10.0 + step as f64))
    }

    pub fn update(&mut self, live: &VelocityField, step: u64) -> Result<()> {
        let beta = self.decay_at(step);
        self.update_with_decay(live, beta)
    }

    pub fn update_with_decay(&mut self, live: &VelocityField, beta: f64) -> Result<()> {
        if live.config != self.field.config {
            return Err(Error::dim(
                "EMA parameter count",
                self.field.param_count(),
                live.param_count(),
            ));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Range {
                context: "EMA decay",
                value: beta,
                min: 0.0,
                max: 1.0,
            });
        }
        for (s, &p) in self.field.params.iter_mut().zip(&live.params) {
            *s = beta * *s + (1.0 - beta) * p;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small_config() -> FieldConfig {
        FieldConfig {
            horizon: 3,
            action_dim: 2,
            obs_dim: 4,
            hidden: vec![7, 5],
            time_embed_dim: 4,
        }
    }

    fn state(seed: u64, cfg: &FieldConfig) -> FlowState {
        let mut r = rng::stream(seed, "test", 0);
        FlowState::new(
            Array2::from_shape_fn((cfg.horizon, cfg.action_dim), |_| r.random_range(-1.0..1.0)),
            r.random_range(0.0..1.0),
            Observation {
                values: (0..cfg.obs_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
                step: 0,
            },
        )
        .unwrap()
    }

    fn half_sq_loss(net: &VelocityField, s: &FlowState) -> f64 {
        0.5 * net.forward(s).unwrap().iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn zero_params_give_zero_output_and_gradient() {
        let cfg = small_config();
        let net = VelocityField::zeros(cfg.clone());
        let s = state(1, &cfg);
        let v = net.forward(&s).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        let mut tape = Tape::new(&net);
        let (id, out) = tape.forward(std::slice::from_ref(&s)).unwrap();
        tape.seed(id, &out).unwrap();
        assert!(tape.backward().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let cfg = small_config();
        let net = VelocityField::init(cfg.clone(), &mut rng::stream(0, rng::STREAM_INIT, 0));
        let s = state(2, &cfg);
        assert_eq!(net.forward(&s).unwrap(), net.forward(&s).unwrap());
        assert_eq!(net.evaluations(), 2);
    }

    #[test]
    fn backward_without_graph_is_state_error() {
        let net = VelocityField::zeros(small_config());
        let tape = Tape::new(&net);
        assert!(matches!(tape.backward(), Err(Error::State(_))));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let cfg = small_config();
        let net = VelocityField::zeros(cfg.clone());
        let mut s = state(1, &cfg);
        s.state = Array2::zeros((4, 2));
        assert!(matches!(net.forward(&s), Err(Error::Dimension { .. })));
        assert!(FlowState::new(Array2::zeros((3, 2)), 1.5, s.observation.clone()).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = small_config();
        let net = VelocityField::init(cfg.clone(), &mut rng::stream(5, rng::STREAM_INIT, 0));
        let states: Vec<FlowState> = (0..3).map(|k| state(10 + k, &cfg)).collect();
        let mut tape = Tape::new(&net);
        let (id, out) = tape.forward(&states).unwrap();
        tape.seed(id, &out).unwrap();
        let grad = tape.backward().unwrap();

        let loss = |p: &[f64]| {
            let n = VelocityField::from_params(cfg.clone(), p.to_vec()).unwrap();
            states.iter().map(|s| half_sq_loss(&n, s)).sum::<f64>()
        };
        let delta = 1e-5;
        let mut p = net.params().to_vec();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + delta;
            let up = loss(&p);
            p[i] = orig - delta;
            let down = loss(&p);
            p[i] = orig;
            let fd = (up - down) / (2.0 * delta);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(rel < 1e-5, "param {i}: fd={fd} analytic={}", grad[i]);
        }
    }

    #[test]
    fn perturbing_one_weight_is_first_order() {
        let cfg = small_config();
        let net = VelocityField::init(cfg.clone(), &mut rng::stream(6, rng::STREAM_INIT, 0));
        let s = state(3, &cfg);
        let mut tape = Tape::new(&net);
        let (id, _) = tape.forward(std::slice::from_ref(&s)).unwrap();
        // d out[0,0] / d params
        let mut g = Array2::zeros((3, 2));
        g[[0, 0]] = 1.0;
        tape.seed(id, &[g]).unwrap();
        let grad = tape.backward().unwrap();
        let base = net.forward(&s).unwrap()[[0, 0]];
        for delta in [1e-3, 1e-4] {
            let mut p = net.params().to_vec();
            p[3] += delta;
            let moved = VelocityField::from_params(cfg.clone(), p).unwrap().forward(&s).unwrap()[[0, 0]];
            assert!((moved - base - delta * grad[3]).abs() < 10.0 * delta * delta);
        }
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let cfg = small_config();
        let net = VelocityField::init(cfg.clone(), &mut rng::stream(0, rng::STREAM_INIT, 0));
        for (off, fi, fo) in cfg.layer_offsets() {
            let lim = (6.0 / (fi + fo) as f64).sqrt();
            assert!(net.params()[off..off + fi * fo].iter().all(|w| w.abs() <= lim));
            assert!(net.params()[off + fi * fo..off + fi * fo + fo].iter().all(|&b| b == 0.0));
        }
        assert_eq!(net.param_count(), (14 * 7 + 7) + (7 * 5 + 5) + (5 * 6 + 6));
    }

    #[test]
    fn ema_contracts_towards_live() {
        let cfg = small_config();
        let live = VelocityField::init(cfg.clone(), &mut rng::stream(0, rng::STREAM_INIT, 0));
        let mut shadow = EmaShadow::new(&VelocityField::zeros(cfg), EMA_MAX_DECAY).unwrap();
        assert!((shadow.decay_at(0) - 0.1).abs() < 1e-15);
        assert_eq!(shadow.decay_at(1_000_000), EMA_MAX_DECAY);
        let dist = |s: &EmaShadow| -> f64 {
            s.field().params().iter().zip(live.params()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let mut prev = dist(&shadow);
        for _ in 0..5 {
            shadow.update(&live, 0).unwrap();
            let d = dist(&shadow);
            assert!(d < prev);
            prev = d;
        }
        let before = shadow.clone();
        shadow.update_with_decay(&live, 1.0).unwrap();
        assert_eq!(shadow, before);
    }

    #[test]
    fn ema_geometric_decay() {
        let cfg = small_config();
        let live = VelocityField::init(cfg.clone(), &mut rng::stream(1, rng::STREAM_INIT, 0));
        let mut shadow = EmaShadow::new(&VelocityField::zeros(cfg), EMA_MAX_DECAY).unwrap();
        let d0: f64 = live.params().iter().map(|p| p * p).sum::<f64>().sqrt();
        for _ in 0..100_000 {
            shadow.update_with_decay(&live, 0.9999).unwrap();
        }
        let d1: f64 = shadow
            .field()
            .params()
            .iter()
            .zip(live.params())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        // Oracle: exact contraction factor 0.9999^1e5 ≈ e^{-10}.
        let oracle = 0.9999f64.powi(100_000);
        assert!((d1 / d0 - oracle).abs() < 1e-9);
        assert!((oracle / (-10f64).exp() - 1.0).abs() < 1e-3);
        assert!(shadow.field().params().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn time_embedding_shape() {
        assert_eq!(time_embedding(0.3, 16).len(), 16);
        assert_eq!(time_embedding(0.3, 5).len(), 5);
        let e = time_embedding(0.0, 4);
        assert_eq!(e, vec![0.0, 0.0, 1.0, 1.0]);
    }
}
