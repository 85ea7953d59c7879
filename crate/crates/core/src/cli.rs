//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors. `FOCALFLOW_OUT` replaces the default output root
//! (`runs`) for commands run without `--out`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_open_loop, evaluate_policy, write_curves_csv, write_metrics_csv, MetricReport};
use crate::flow::{ExpertOracle, Inference, RolloutConfig, RolloutMode};
use crate::network::VelocityModel;
use crate::objectives::Variant;
use crate::rng;
use crate::spectral::DctPlan;
use crate::training::{
    read_metrics, resume_training, run_training, Checkpoint, LogRecord, RunOptions, TrainConfig, CHECKPOINT_FILE,
};
use crate::trajectory::{generate_expert, read_demos, write_demos, Dataset, Demonstration, Normalization, TaskKind};
use crate::verification::{check_parseval_with, run_suite, CheckReport, CHECK_NAMES};

pub const OUT_ENV: &str = "FOCALFLOW_OUT";
pub const CONFIG_ECHO: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "focalflow", version, about = "Train and evaluate one-step flow policies on synthetic trajectory tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert demonstrations.
    Gen(GenArgs),
    /// Train a policy from a config file.
    Train(TrainArgs),
    /// Roll out a checkpoint and write metric CSVs.
    Eval(EvalArgs),
    /// Run the numerical theory checks.
    Verify(VerifyArgs),
    /// Train every point of a config grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value = "reach")]
    pub task: TaskKind,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 200)]
    pub length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Override a config key, e.g. `--set objective.lambda=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory (default: `<root>/<config stem>[-<variant>]`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many updates have completed.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub demos: PathBuf,
    #[arg(long, default_value = "closed_loop")]
    pub mode: RolloutMode,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    /// Open-loop start windows per episode.
    #[arg(long, default_value_t = 1)]
    pub starts: usize,
    /// Use the exact expert velocity instead of a trained field.
    #[arg(long)]
    pub oracle: bool,
    /// Evaluate the live parameters instead of the EMA teacher.
    #[arg(long)]
    pub live: bool,
    /// Euler steps per decision; one-step inference when absent.
    #[arg(long)]
    pub euler: Option<usize>,
    #[arg(long, default_value_t = crate::evaluation::DEFAULT_SUCCESS_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(CHECK_NAMES))]
    pub only: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Points trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a).map(|_| 0),
        Command::Train(a) => cmd_train(&a).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a).map(|_| 0),
        Command::Verify(a) => cmd_verify(&a),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| 0),
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let demos = generate_expert(a.task, a.seed, a.count, a.length)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_demos(&a.out, &demos)?;
    println!("wrote {} {} demonstrations to {}", demos.len(), a.task, a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration.

fn parse_override_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set a dotted key in a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// Read a config file, apply overrides and validate.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: toml::Table = text.parse().map_err(|e| Error::parse(path, e))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::parse(path, e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_toml(cfg: &TrainConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

// ---------------------------------------------------------------------------
// Training.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub variant: Variant,
    pub final_l_total: f64,
    pub final_l_time: f64,
    pub final_l_freq: f64,
    pub top5_success: Option<f64>,
    pub eval_rows: usize,
    pub last_eval_endpoint_error: Option<f64>,
    pub last_eval_atv_gap: Option<f64>,
}

fn summarize(cfg: &TrainConfig, log: &[LogRecord], top5: Option<f64>) -> RunSummary {
    let last_step = log.iter().rev().find_map(|r| match r {
        LogRecord::Step(s) => Some(s.clone()),
        _ => None,
    });
    let evals: Vec<_> = log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval(e) => Some(e.clone()),
            _ => None,
        })
        .collect();
    let s = last_step.unwrap_or_default();
    RunSummary {
        steps: cfg.steps,
        variant: cfg.objective.variant,
        final_l_total: s.l_total,
        final_l_time: s.l_time,
        final_l_freq: s.l_freq,
        top5_success: top5,
        eval_rows: evals.len(),
        last_eval_endpoint_error: evals.last().map(|e| e.endpoint_error),
        last_eval_atv_gap: evals.last().map(|e| e.atv_gap),
    }
}

/// Train `cfg` into `dir`, resuming from `dir/checkpoint.json` when asked.
pub fn train_into(cfg: &TrainConfig, dir: &Path, resume: bool, stop_after: Option<u64>) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = dir.join(CONFIG_ECHO);
    let text = config_to_toml(cfg)?;
    let dataset = Dataset::assemble(cfg.training_demos()?, cfg.horizon)?;
    let opts = RunOptions {
        out_dir: Some(dir.to_path_buf()),
        stop_after,
    };
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let outcome = if resume && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if &ckpt.config != cfg {
            return Err(Error::Config(format!(
                "checkpoint in {} was trained with a different config",
                dir.display()
            )));
        }
        resume_training(&ckpt, &dataset, &opts)?
    } else {
        fs::write(&echo, &text).map_err(|e| Error::io(&echo, e))?;
        run_training(cfg, &dataset, &opts)?
    };
    let summary = summarize(cfg, &outcome.log, outcome.top5_success);
    if outcome.trainer.is_done() {
        let path = dir.join(SUMMARY_FILE);
        let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::parse(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunSummary> {
    let mut overrides = a.overrides.clone();
    if let Some(v) = a.variant {
        overrides.push(format!("objective.variant=\"{}\"", v.name()));
    }
    let cfg = load_config(&a.config, &overrides)?;
    let dir = a.out.clone().unwrap_or_else(|| {
        let stem = a.config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        let name = match a.variant {
            Some(v) => format!("{stem}-{v}"),
            None => stem,
        };
        output_root().join(name)
    });
    let summary = train_into(&cfg, &dir, a.resume, a.stop_after)?;
    println!(
        "{}: {} steps, final loss {:.6}, top-5 success {}",
        dir.display(),
        summary.steps,
        summary.final_l_total,
        summary.top5_success.map_or("n/a".to_string(), |s| format!("{s:.3}"))
    );
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Evaluation.

fn evaluate_model<M: VelocityModel + ?Sized>(
    model: &M,
    demos: &[Demonstration],
    norm: &Normalization,
    horizon: crate::trajectory::Horizon,
    a: &EvalArgs,
    rng: &mut rng::StreamRng,
) -> Result<Vec<MetricReport>> {
    let inference = match a.euler {
        Some(steps) if steps > 0 => Inference::Euler { steps },
        Some(_) => return Err(Error::Config("--euler needs at least one step".into())),
        None => Inference::OneStep,
    };
    match a.mode {
        RolloutMode::ClosedLoop => {
            let cfg = RolloutConfig {
                inference,
                ..RolloutConfig::closed_loop(horizon.chunk_size, usize::MAX)
            };
            evaluate_policy(model, demos, norm, horizon, &cfg, a.tolerance, rng)
        }
        RolloutMode::OpenLoop if inference == Inference::OneStep => {
            evaluate_open_loop(model, demos, norm, horizon, a.starts.max(1), a.tolerance, rng)
        }
        RolloutMode::OpenLoop => Err(Error::Config("open-loop evaluation uses one-step inference".into())),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricReport> {
    let all = read_demos(&a.demos)?;
    if a.episodes == 0 || all.is_empty() {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let demos: Vec<Demonstration> = all.into_iter().take(a.episodes).collect();
    let mut r = rng::stream(a.seed, rng::STREAM_EVAL, 0);
    let reports = if a.oracle {
        let (norm, horizon) = match &a.ckpt {
            Some(p) => {
                let c = Checkpoint::load(p)?;
                (c.normalization, c.config.horizon)
            }
            None => {
                let h = crate::trajectory::Horizon::default();
                (Dataset::assemble(demos.clone(), h)?.normalization().clone(), h)
            }
        };
        let mut out = Vec::new();
        for d in &demos {
            let oracle = ExpertOracle::new(d, &norm, horizon.len());
            out.extend(evaluate_model(&oracle, std::slice::from_ref(d), &norm, horizon, a, &mut r)?);
        }
        out
    } else {
        let ckpt = Checkpoint::load(a.ckpt.as_ref().expect("clap enforces --ckpt"))?;
        let field = if a.live { ckpt.live_field()? } else { ckpt.ema_field()? };
        let task = demos[0].task;
        if task.action_dim() != ckpt.field.action_dim {
            return Err(Error::Config(format!(
                "demonstrations are {task} but the checkpoint acts in {} dimensions",
                ckpt.field.action_dim
            )));
        }
        evaluate_model(&field, &demos, &ckpt.normalization, ckpt.config.horizon, a, &mut r)?
    };
    let dir = a.out.clone().unwrap_or_else(|| output_root().join("eval"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let agg = write_metrics_csv(&dir.join("episodes.csv"), &reports)?;
    write_curves_csv(&dir.join("curves.csv"), &reports)?;
    println!(
        "{} episodes ({:?}): endpoint error {:.6}, ATV {:.6}, ATV gap {:.6}, success {:.3}, NFE {}",
        reports.len(),
        a.mode,
        agg.endpoint_error,
        agg.atv,
        agg.atv_gap,
        agg.success_rate,
        agg.nfe_per_decision
    );
    Ok(agg)
}

// ---------------------------------------------------------------------------
// Verification.

pub fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let mut reports: Vec<CheckReport> = run_suite(&a.only, a.seed)?;
    match a.inject_fault.as_deref() {
        None => {}
        Some("dct-scale") => {
            for rep in reports.iter_mut().filter(|r| r.name == "parseval") {
                *rep = check_parseval_with(100, &[2, 12, 36, 256], a.seed, &|l| {
                    // Unnormalized DCT-II: every basis row scaled by √(L/2).
                    let plan = DctPlan::new(l);
                    let s = (l as f64 / 2.0).sqrt();
                    Box::new(move |x: &[f64]| plan.forward(x).expect("plan length").iter().map(|c| c * s).collect())
                });
            }
        }
        Some(other) => return Err(Error::Config(format!("unknown fault '{other}'"))),
    }
    for r in &reports {
        println!(
            "{} {:<18} trials={:<6} max_error={:.3e} tol={:.1e} seed={} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.trials,
            r.max_error,
            r.tolerance,
            r.seed,
            r.detail
        );
    }
    if let Some(path) = &a.json {
        let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::parse(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// Sweeps.

/// A sweep description: a base config plus axes of dotted-key values.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    /// Base config, relative to the grid file.
    pub base: PathBuf,
    #[serde(default)]
    pub set: Vec<String>,
    pub axes: toml::Table,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub assignments: Vec<(String, toml::Value)>,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        let parts: Vec<String> = self
            .assignments
            .iter()
            .map(|(k, v)| format!("{}={}", k.rsplit('.').next().unwrap_or(k), value_text(v)))
            .collect();
        format!("{:03}-{}", self.index, sanitize(&parts.join("_")))
    }

    fn overrides(&self) -> Vec<String> {
        self.assignments.iter().map(|(k, v)| format!("{k}={v}")).collect()
    }
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '_' })
        .collect()
}

/// Cross-product of the grid axes in key order.
pub fn grid_points(grid: &Grid) -> Result<Vec<SweepPoint>> {
    let mut points: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for (key, values) in &grid.axes {
        let values = values
            .as_array()
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::Config(format!("sweep axis '{key}' must be a non-empty array")))?;
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    Ok(points
        .into_iter()
        .enumerate()
        .map(|(index, assignments)| SweepPoint { index, assignments })
        .collect())
}

fn lookup<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut v = table.get(parts.next()?)?;
    for p in parts {
        v = v.as_table()?.get(p)?;
    }
    Some(v)
}

fn same_value(a: &toml::Value, b: &toml::Value) -> bool {
    match (a.as_float().or(a.as_integer().map(|i| i as f64)), b.as_float().or(b.as_integer().map(|i| i as f64))) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read grid {}: {e}", path.display())))?;
    let mut grid: Grid = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
    if grid.base.is_relative() {
        grid.base = path.parent().unwrap_or(Path::new(".")).join(&grid.base);
    }
    Ok(grid)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub is_default: bool,
    pub summary: RunSummary,
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<Vec<SweepRow>> {
    let grid = load_grid(&a.grid)?;
    let points = grid_points(&grid)?;
    let stem = a.grid.file_stem().map_or("sweep".into(), |s| s.to_string_lossy().into_owned());
    let root = a.out.clone().unwrap_or_else(|| output_root().join(stem));
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let defaults = toml::Table::try_from(TrainConfig::default()).map_err(|e| Error::Config(e.to_string()))?;

    // Resolve every point before training any.
    let mut plans = Vec::new();
    for p in &points {
        let mut overrides = grid.set.clone();
        overrides.extend(p.overrides());
        let cfg = load_config(&grid.base, &overrides)?;
        let is_default = p
            .assignments
            .iter()
            .all(|(k, v)| lookup(&defaults, k).is_some_and(|d| same_value(d, v)));
        plans.push((p.clone(), cfg, is_default));
    }

    let run_point = |(p, cfg, is_default): &(SweepPoint, TrainConfig, bool)| -> Result<SweepRow> {
        let dir = root.join(p.label());
        let done = dir.join(SUMMARY_FILE);
        let summary = if done.exists() && dir.join(CONFIG_ECHO).exists() {
            let text = fs::read_to_string(&done).map_err(|e| Error::io(&done, e))?;
            let s: RunSummary = serde_json::from_str(&text).map_err(|e| Error::parse(&done, e))?;
            println!("skip {} (complete)", p.label());
            s
        } else {
            let s = train_into(cfg, &dir, true, None)?;
            println!("done {}", p.label());
            s
        };
        Ok(SweepRow {
            point: p.clone(),
            is_default: *is_default,
            summary,
        })
    };

    let jobs = a.jobs.max(1);
    let mut rows: Vec<Option<Result<SweepRow>>> = (0..plans.len()).map(|_| None).collect();
    for (chunk_plans, chunk_rows) in plans.chunks(jobs).zip(rows.chunks_mut(jobs)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_plans.iter().map(|plan| s.spawn(|| run_point(plan))).collect();
            for (slot, h) in chunk_rows.iter_mut().zip(handles) {
                *slot = Some(h.join().unwrap_or_else(|_| Err(Error::State("sweep worker panicked".into()))));
            }
        });
    }
    let rows: Vec<SweepRow> = rows.into_iter().map(|r| r.expect("every point ran")).collect::<Result<_>>()?;
    write_sweep_csv(&root.join("summary.csv"), &grid, &rows)?;
    println!("{} points, summary at {}", rows.len(), root.join("summary.csv").display());
    Ok(rows)
}

fn csv_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

pub fn write_sweep_csv(path: &Path, grid: &Grid, rows: &[SweepRow]) -> Result<()> {
    let keys: Vec<&String> = grid.axes.keys().collect();
    let mut body = String::from("point,");
    for k in &keys {
        body.push_str(k);
        body.push(',');
    }
    body.push_str("is_default,variant,steps,final_l_total,final_l_time,final_l_freq,top5_success,last_eval_endpoint_error,last_eval_atv_gap\n");
    for r in rows {
        body.push_str(&r.point.label());
        for (_, v) in &r.point.assignments {
            body.push(',');
            body.push_str(&value_text(v));
        }
        let s = &r.summary;
        body.push_str(&format!(
            ",{},{},{},{},{},{},{},{},{}\n",
            r.is_default,
            s.variant,
            s.steps,
            s.final_l_total,
            s.final_l_time,
            s.final_l_freq,
            csv_opt(s.top5_success),
            csv_opt(s.last_eval_endpoint_error),
            csv_opt(s.last_eval_atv_gap)
        ));
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Read back the rows of a metrics log, for tooling.
pub fn metrics_rows(dir: &Path) -> Result<Vec<LogRecord>> {
    read_metrics(&dir.join(crate::training::METRICS_FILE))
}
