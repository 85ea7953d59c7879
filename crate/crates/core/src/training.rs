//! The optimization loop.
//!
//! Each update draws a batch of windows, noise `M_0 ~ N(0, I)`, student times
//! `τ ~ U[0, 1]` and anchors `r`, evaluates the configured objective, applies
//! an AdamW step under a warmup-then-cosine schedule and refreshes the EMA
//! teacher. Every random draw of update `t` comes from streams indexed by `t`,
//! so a run resumed from a checkpoint replays the uninterrupted run exactly.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{aggregate, evaluate_policy, DEFAULT_SUCCESS_TOLERANCE};
use crate::flow::RolloutConfig;
use crate::network::{EmaShadow, FieldConfig, VelocityField, EMA_MAX_DECAY};
use crate::objectives::{draw_samples, evaluate, LossReport, ObjectiveConfig};
use crate::rng::{self, STREAM_ANCHOR, STREAM_DATA, STREAM_EVAL, STREAM_INIT, STREAM_NOISE, STREAM_TAU};
use crate::sampler::AnchorConfig;
use crate::trajectory::{generate_expert, Dataset, Demonstration, Horizon, Normalization, TaskKind};

pub const CHECKPOINT_FORMAT: &str = "focalflow-ckpt/1";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: TaskKind,
    pub demos: usize,
    pub length: usize,
    /// Read demonstrations from this file instead of generating them.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Reach,
            demos: 10,
            length: 200,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            time_embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Total optimizer updates.
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    pub ema_max_decay: f64,
    /// Closed-loop evaluation cadence in updates; 0 disables it.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub success_tolerance: f64,
    /// Cadence of the gradient inner-product probe; 0 disables it.
    pub probe_every: u64,
    /// Checkpoint cadence in updates; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub horizon: Horizon,
    pub network: NetworkConfig,
    pub objective: ObjectiveConfig,
    pub anchor: AnchorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 3000,
            batch_size: 128,
            learning_rate: 1e-4,
            betas: [0.95, 0.999],
            weight_decay: 1e-6,
            adam_eps: 1e-8,
            warmup_steps: 500,
            ema_max_decay: EMA_MAX_DECAY,
            eval_every: 200,
            eval_episodes: 10,
            success_tolerance: DEFAULT_SUCCESS_TOLERANCE,
            probe_every: 10,
            checkpoint_every: 0,
            data: DataConfig::default(),
            horizon: Horizon::default(),
            network: NetworkConfig::default(),
            objective: ObjectiveConfig::default(),
            anchor: AnchorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// 2000 updates of batch 64 with sparse evaluation. The learning rate is
    /// raised to 1e-3 so the short run covers a comparable total step size.
    pub fn desk(task: TaskKind, seed: u64) -> Self {
        Self {
            seed,
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            eval_every: 500,
            eval_episodes: 5,
            data: DataConfig {
                task,
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    /// Objective with its prefix length tied to the chunk size.
    pub fn resolved_objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            prefix_len: self.horizon.chunk_size,
            ..self.objective.clone()
        }
    }

    /// Anchor law actually used, after the variant's override.
    pub fn resolved_anchor(&self) -> AnchorConfig {
        self.objective.variant.effective_anchor(self.anchor)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return fail("steps and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive (got {})", self.learning_rate));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return fail(format!("betas must lie in [0, 1) (got {:?})", self.betas));
        }
        if !(self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            return fail("weight_decay must be >= 0 and adam_eps > 0".into());
        }
        if self.warmup_steps >= self.steps {
            return fail(format!(
                "warmup_steps ({}) must be below the total number of steps ({})",
                self.warmup_steps, self.steps
            ));
        }
        if !(0.0..1.0).contains(&self.ema_max_decay) {
            return fail(format!("ema_max_decay must lie in [0, 1) (got {})", self.ema_max_decay));
        }
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return fail("network.hidden must list positive layer widths".into());
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return fail("eval_episodes must be positive when evaluation is enabled".into());
        }
        Horizon::new(self.horizon.chunk_size, self.horizon.num_chunks, self.horizon.obs_steps)?;
        self.resolved_objective().validate(self.horizon.len())?;
        self.resolved_anchor().validate()
    }

    /// Training demonstrations: read from `data.path` or generated from the seed.
    pub fn training_demos(&self) -> Result<Vec<Demonstration>> {
        match &self.data.path {
            Some(p) => crate::trajectory::read_demos(p),
            None => generate_expert(
                self.data.task,
                rng::derive_seed(self.seed, "demos", 0),
                self.data.demos,
                self.data.length,
            ),
        }
    }

    /// Held-out demonstrations for closed-loop evaluation.
    pub fn eval_demos(&self, task: TaskKind, length: usize) -> Result<Vec<Demonstration>> {
        generate_expert(task, rng::derive_seed(self.seed, "eval-demos", 0), self.eval_episodes, length)
    }

    pub fn field_config(&self, dataset: &Dataset) -> FieldConfig {
        FieldConfig {
            horizon: self.horizon.len(),
            action_dim: dataset.action_dim(),
            obs_dim: dataset.obs_dim(),
            hidden: self.network.hidden.clone(),
            time_embed_dim: self.network.time_embed_dim,
        }
    }
}

/// Linear warmup from 0 to `η`, then cosine decay reaching 0 at `cfg.steps`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let eta = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return eta * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    eta * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        crate::error::check_dim("optimizer parameter count", self.m.len(), params.len())?;
        crate::error::check_dim("optimizer gradient length", self.m.len(), grad.len())?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        for i in 0..params.len() {
            params[i] -= lr * self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Live parameters, EMA teacher, optimizer state and the update counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    objective: ObjectiveConfig,
    anchor: AnchorConfig,
    net: VelocityField,
    ema: EmaShadow,
    opt: AdamW,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if dataset.horizon() != cfg.horizon {
            return Err(Error::Config("dataset horizon differs from the training config".into()));
        }
        let net = VelocityField::init(cfg.field_config(dataset), &mut rng::stream(cfg.seed, STREAM_INIT, 0));
        let ema = EmaShadow::new(&net, cfg.ema_max_decay)?;
        let opt = AdamW::new(net.param_count(), cfg.betas, cfg.adam_eps, cfg.weight_decay);
        Ok(Self {
            objective: cfg.resolved_objective(),
            anchor: cfg.resolved_anchor(),
            cfg,
            net,
            ema,
            opt,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn net(&self) -> &VelocityField {
        &self.net
    }

    pub fn ema(&self) -> &EmaShadow {
        &self.ema
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    /// One update on a batch drawn from `dataset`.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<LossReport> {
        let batch = dataset.sample(&mut rng::stream(self.cfg.seed, STREAM_DATA, self.step), self.cfg.batch_size);
        self.step_on(batch)
    }

    /// One update on the given windows.
    pub fn step_on(&mut self, batch: Vec<crate::trajectory::Window>) -> Result<LossReport> {
        let t = self.step;
        let seed = self.cfg.seed;
        let samples = draw_samples(
            batch,
            self.objective.variant,
            &self.anchor,
            self.objective.delta_tau,
            &mut rng::stream(seed, STREAM_NOISE, t),
            &mut rng::stream(seed, STREAM_TAU, t),
            &mut rng::stream(seed, STREAM_ANCHOR, t),
        );
        let probe = self.cfg.probe_every > 0 && t.is_multiple_of(self.cfg.probe_every);
        let eval = evaluate(&self.objective, &self.net, self.ema.field(), &samples, probe)?;
        let max_abs_grad = eval.grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if !eval.report.l_total.is_finite() || !max_abs_grad.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                l_time: eval.report.l_time,
                l_freq: eval.report.l_freq,
                max_abs_grad,
            });
        }
        let lr = lr_schedule(t, &self.cfg);
        self.opt.step(self.net.params_mut(), &eval.grad, lr)?;
        self.ema.update(&self.net, t)?;
        self.step += 1;
        Ok(LossReport {
            step: t,
            lr,
            ..eval.report
        })
    }

    pub fn checkpoint(&self, normalization: &Normalization, eval_scores: &[f64]) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.cfg.clone(),
            field: self.net.config().clone(),
            params: self.net.params().to_vec(),
            ema_params: self.ema.field().params().to_vec(),
            optimizer: self.opt.clone(),
            step: self.step,
            normalization: normalization.clone(),
            eval_scores: eval_scores.to_vec(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let net = VelocityField::from_params(ckpt.field.clone(), ckpt.params.clone())?;
        let ema = EmaShadow::from_params(ckpt.field.clone(), ckpt.ema_params.clone(), ckpt.config.ema_max_decay)?;
        if ckpt.optimizer.steps_taken() != ckpt.step {
            return Err(Error::State(format!(
                "checkpoint optimizer has {} updates but step counter is {}",
                ckpt.optimizer.steps_taken(),
                ckpt.step
            )));
        }
        Ok(Self {
            objective: ckpt.config.resolved_objective(),
            anchor: ckpt.config.resolved_anchor(),
            cfg: ckpt.config.clone(),
            net,
            ema,
            opt: ckpt.optimizer.clone(),
            step: ckpt.step,
        })
    }
}

/// Everything needed to evaluate a policy or resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub field: FieldConfig,
    pub params: Vec<f64>,
    pub ema_params: Vec<f64>,
    pub optimizer: AdamW,
    pub step: u64,
    pub normalization: Normalization,
    /// Success rates of the evaluations run so far.
    pub eval_scores: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::parse(path, e))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::parse(path, format!("unsupported checkpoint format '{}'", ckpt.format)));
        }
        Ok(ckpt)
    }

    pub fn live_field(&self) -> Result<VelocityField> {
        VelocityField::from_params(self.field.clone(), self.params.clone())
    }

    pub fn ema_field(&self) -> Result<VelocityField> {
        VelocityField::from_params(self.field.clone(), self.ema_params.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Updates completed before this evaluation.
    pub step: u64,
    pub success_rate: f64,
    pub endpoint_error: f64,
    pub atv: f64,
    pub atv_gap: f64,
    pub ts_score: f64,
    pub nfe_per_decision: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(LossReport),
    Eval(EvalRecord),
}

impl LogRecord {
    fn position(&self) -> u64 {
        match self {
            LogRecord::Step(r) => r.step + 1,
            LogRecord::Eval(e) => e.step,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::parse(path, e))
        })
        .collect()
}

/// Mean of the five best scores (fewer if fewer exist).
pub fn top_k_mean(scores: &[f64], k: usize) -> Option<f64> {
    if scores.is_empty() || k == 0 {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..k.min(sorted.len())];
    Some(top.iter().sum::<f64>() / top.len() as f64)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for the metrics log and checkpoints; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Stop early once this many updates have completed.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub normalization: Normalization,
    pub log: Vec<LogRecord>,
    pub eval_scores: Vec<f64>,
    /// Average of the top five evaluation success rates.
    pub top5_success: Option<f64>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        self.trainer.checkpoint(&self.normalization, &self.eval_scores)
    }
}

struct MetricsSink {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl MetricsSink {
    fn open(path: PathBuf, keep: &[LogRecord]) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut sink = Self {
            writer: BufWriter::new(file),
            path,
        };
        for r in keep {
            sink.push(r)?;
        }
        Ok(sink)
    }

    fn push(&mut self, r: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::parse(&self.path, e))?;
        writeln!(self.writer, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Train from scratch on `dataset`.
pub fn run_training(cfg: &TrainConfig, dataset: &Dataset, opts: &RunOptions) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg.clone(), dataset)?;
    drive(trainer, dataset, Vec::new(), Vec::new(), opts)
}

/// Continue a run from `ckpt`. A metrics log already present in the output
/// directory is truncated to the checkpoint's step and extended.
pub fn resume_training(ckpt: &Checkpoint, dataset: &Dataset, opts: &RunOptions) -> Result<TrainOutcome> {
    if &ckpt.normalization != dataset.normalization() {
        return Err(Error::State("checkpoint normalization does not match the dataset".into()));
    }
    let trainer = Trainer::from_checkpoint(ckpt)?;
    let mut log = Vec::new();
    if let Some(dir) = &opts.out_dir {
        let path = dir.join(METRICS_FILE);
        if path.exists() {
            log = read_metrics(&path)?;
            log.retain(|r| r.position() <= ckpt.step);
        }
    }
    drive(trainer, dataset, log, ckpt.eval_scores.clone(), opts)
}

fn drive(
    mut trainer: Trainer,
    dataset: &Dataset,
    mut log: Vec<LogRecord>,
    mut scores: Vec<f64>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    let cfg = trainer.config().clone();
    let norm = dataset.normalization().clone();
    let episode_len = dataset.demos()[0].len();
    let eval_demos = if cfg.eval_every > 0 {
        cfg.eval_demos(dataset.task(), episode_len)?
    } else {
        Vec::new()
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut sink = match &opts.out_dir {
        Some(dir) => Some(MetricsSink::open(dir.join(METRICS_FILE), &log)?),
        None => None,
    };
    let save = |trainer: &Trainer, scores: &[f64], sink: &mut Option<MetricsSink>| -> Result<()> {
        if let (Some(dir), Some(s)) = (&opts.out_dir, sink.as_mut()) {
            s.flush()?;
            trainer.checkpoint(&norm, scores).save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    };
    let limit = opts.stop_after.unwrap_or(cfg.steps).min(cfg.steps);

    while trainer.step() < limit {
        let report = trainer.train_step(dataset)?;
        let rec = LogRecord::Step(report);
        if let Some(s) = sink.as_mut() {
            s.push(&rec)?;
        }
        log.push(rec);
        let done = trainer.step();
        if cfg.eval_every > 0 && done.is_multiple_of(cfg.eval_every) {
            let rollout_cfg = RolloutConfig::closed_loop(cfg.horizon.chunk_size, usize::MAX);
            let reports = evaluate_policy(
                trainer.ema().field(),
                &eval_demos,
                &norm,
                cfg.horizon,
                &rollout_cfg,
                cfg.success_tolerance,
                &mut rng::stream(cfg.seed, STREAM_EVAL, done),
            )?;
            let agg = aggregate(&reports)?;
            scores.push(agg.success_rate);
            let rec = LogRecord::Eval(EvalRecord {
                step: done,
                success_rate: agg.success_rate,
                endpoint_error: agg.endpoint_error,
                atv: agg.atv,
                atv_gap: agg.atv_gap,
                ts_score: agg.ts_score,
                nfe_per_decision: agg.nfe_per_decision,
            });
            if let Some(s) = sink.as_mut() {
                s.push(&rec)?;
            }
            log.push(rec);
        }
        if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) {
            save(&trainer, &scores, &mut sink)?;
        }
    }
    save(&trainer, &scores, &mut sink)?;
    Ok(TrainOutcome {
        top5_success: top_k_mean(&scores, 5),
        trainer,
        normalization: norm,
        log,
        eval_scores: scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Variant;
    use crate::trajectory::generate_expert;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(500, &cfg), 1e-4);
        assert!((lr_schedule(250, &cfg) - 5e-5).abs() < 1e-18);
        assert!(lr_schedule(3000, &cfg).abs() < 1e-12);
        let mid = 500 + (3000 - 500) / 2;
        assert!((lr_schedule(mid, &cfg) - 5e-5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn schedule_is_bounded_and_decays(a in 0u64..3000, b in 0u64..3000) {
            let cfg = TrainConfig::default();
            let la = lr_schedule(a, &cfg);
            prop_assert!((0.0..=cfg.learning_rate).contains(&la));
            if a >= cfg.warmup_steps && b > a {
                prop_assert!(lr_schedule(b, &cfg) <= la);
            }
        }
    }

    /// Scalar AdamW recurrence written out independently.
    fn reference_adamw(p0: f64, c: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps, wd) = (0.9, 0.999, 1e-8, 0.01);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = p - c;
            p *= 1.0 - lr * wd;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn adamw_matches_hand_unrolled_recurrence() {
        // Loss ½(p − c)², gradient p − c. First step moves p by ≈ lr (sign of the gradient).
        let (c, lr) = (0.25, 0.1);
        let mut opt = AdamW::new(1, [0.9, 0.999], 1e-8, 0.01);
        let mut p = [1.0];
        let want = reference_adamw(1.0, c, lr, 4);
        for w in want {
            let g = [p[0] - c];
            opt.step(&mut p, &g, lr).unwrap();
            assert!((p[0] - w).abs() < 1e-12);
        }
        // Closed form of the first step: p1 = p0(1 − lr·wd) − lr·g/(|g| + eps).
        let mut opt = AdamW::new(1, [0.9, 0.999], 1e-8, 0.01);
        let mut p = [1.0];
        opt.step(&mut p, &[0.75], lr).unwrap();
        assert!((p[0] - (1.0 * (1.0 - 0.001) - 0.1 * 0.75 / (0.75 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // Zero gradient: moments stay zero and only the decay acts.
        let mut opt = AdamW::new(2, [0.9, 0.999], 1e-8, 0.5);
        let mut p = [2.0, -4.0];
        opt.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, [2.0 * 0.95, -4.0 * 0.95]);
        assert_eq!(opt.m, vec![0.0, 0.0]);
        assert_eq!(opt.v, vec![0.0, 0.0]);
    }

    #[test]
    fn top_five_average() {
        assert_eq!(top_k_mean(&[], 5), None);
        assert_eq!(top_k_mean(&[0.2, 0.4], 5), Some(0.30000000000000004));
        assert_eq!(top_k_mean(&[0.0, 1.0, 0.5, 0.5, 1.0, 0.0, 1.0], 5), Some(0.8));
    }

    fn tiny_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch_size: 4,
            warmup_steps: 2,
            eval_every: 3,
            eval_episodes: 2,
            probe_every: 2,
            data: DataConfig {
                task: TaskKind::Reach,
                demos: 2,
                length: 30,
                path: None,
            },
            network: NetworkConfig {
                hidden: vec![8],
                time_embed_dim: 4,
            },
            objective: ObjectiveConfig::with_variant(variant),
            ..TrainConfig::default()
        }
    }

    fn dataset(cfg: &TrainConfig) -> Dataset {
        Dataset::assemble(cfg.training_demos().unwrap(), cfg.horizon).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { warmup_steps: 3000, ..TrainConfig::default() },
            TrainConfig { betas: [1.0, 0.9], ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { ema_max_decay: 1.0, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn identical_branches_give_zero_loss() {
        // λ = 0, r forced to τ and teacher = student at initialization.
        let mut cfg = tiny_cfg(Variant::Focal);
        cfg.objective.lambda = 0.0;
        let ds = dataset(&cfg);
        let trainer = Trainer::new(cfg.clone(), &ds).unwrap();
        let mut samples = draw_samples(
            ds.sample(&mut rng::stream(0, STREAM_DATA, 0), 4),
            Variant::Focal,
            &cfg.anchor,
            0.01,
            &mut rng::stream(0, STREAM_NOISE, 0),
            &mut rng::stream(0, STREAM_TAU, 0),
            &mut rng::stream(0, STREAM_ANCHOR, 0),
        );
        for s in &mut samples {
            s.r = s.tau;
        }
        let ev = evaluate(&trainer.objective, trainer.net(), trainer.ema().field(), &samples, false).unwrap();
        assert_eq!(ev.report.l_total, 0.0);
    }

    #[test]
    fn every_variant_trains_with_finite_losses() {
        for v in Variant::ALL {
            let mut cfg = tiny_cfg(v);
            if v == Variant::WeightedSpectral {
                cfg.objective.spectral_weights = Some((0..12).map(|k| 1.0 / (1.0 + k as f64)).collect());
            }
            let ds = dataset(&cfg);
            let out = run_training(&cfg, &ds, &RunOptions::default()).unwrap();
            assert_eq!(out.trainer.step(), 6);
            let steps = out.log.iter().filter(|r| matches!(r, LogRecord::Step(_))).count();
            let evals = out.log.iter().filter(|r| matches!(r, LogRecord::Eval(_))).count();
            assert_eq!((steps, evals), (6, 2), "{v}");
            for r in &out.log {
                if let LogRecord::Step(s) = r {
                    assert!(s.l_total.is_finite() && s.grad_norm.is_finite(), "{v}");
                }
            }
        }
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let cfg = tiny_cfg(Variant::Focal);
        let ds = dataset(&cfg);
        let a = run_training(&cfg, &ds, &RunOptions::default()).unwrap();
        let b = run_training(&cfg, &ds, &RunOptions::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.trainer.net(), b.trainer.net());

        let half = run_training(
            &cfg,
            &ds,
            &RunOptions {
                stop_after: Some(3),
                ..RunOptions::default()
            },
        )
        .unwrap();
        let ckpt = half.checkpoint();
        let text = serde_json::to_string(&ckpt).unwrap();
        let ckpt: Checkpoint = serde_json::from_str(&text).unwrap();
        let mut rest = resume_training(&ckpt, &ds, &RunOptions::default()).unwrap();
        let mut joined = half.log.clone();
        joined.append(&mut rest.log);
        assert_eq!(joined, a.log);
        assert_eq!(rest.trainer.net(), a.trainer.net());
        assert_eq!(rest.trainer.ema().field(), a.trainer.ema().field());
        assert_eq!(rest.top5_success, a.top5_success);
    }

    #[test]
    fn non_finite_loss_aborts_with_snapshot() {
        let cfg = tiny_cfg(Variant::Focal);
        let ds = dataset(&cfg);
        let mut trainer = Trainer::new(cfg, &ds).unwrap();
        let mut batch = ds.sample(&mut rng::stream(0, STREAM_DATA, 0), 2);
        batch[0].target[[0, 0]] = f64::NAN;
        match trainer.step_on(batch) {
            Err(Error::NonFinite { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn demos_follow_the_seed() {
        let cfg = tiny_cfg(Variant::Focal);
        let a = cfg.training_demos().unwrap();
        let b = generate_expert(TaskKind::Reach, rng::derive_seed(0, "demos", 0), 2, 30).unwrap();
        assert_eq!(a[1].actions, b[1].actions);
        assert_ne!(cfg.eval_demos(TaskKind::Reach, 30).unwrap()[0].actions, a[0].actions);
    }
}
