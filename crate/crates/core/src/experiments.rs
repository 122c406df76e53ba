//! Command orchestration: training, two-route verification, weight dynamics
//! and finetuning comparison, each writing CSV data and optional SVG charts.
//!
//! Every CSV starts with a `#` comment block echoing the effective config,
//! the code version and the norm convention, followed by a header row. Floats
//! are printed with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_bytes, load_checkpoint, read_checkpoint, save_checkpoint};
use crate::contextual_block::BlockParams;
use crate::contextual_layer::PromptMatrix;
use crate::dynamics::prefix_dynamics;
use crate::error::Error;
use crate::numerics::{Rng, Vector};
use crate::plot::{Chart, Series};
use crate::stats::{mean, standard_error};
use crate::suites::{corrupt as corrupt_update, gradient_suite, sgd_suite, suffix_suite, theorem_suite, Corruption};
use crate::tasks::{sample_task, to_prompt, LinearTask};
use crate::training::{finetune_step, train, validation_tasks, Checkpoint, FinetuneInput, TrainConfig, TrainRun};
use crate::weight_transfer::{apply_to_block, transfer_full};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Largest prediction gap between the two routes tolerated on trained checkpoints.
pub const VERIFY_TOLERANCE: f64 = 1e-8;
/// Largest output gap tolerated by the random-parameter transfer suite.
pub const THEOREM_TOLERANCE: f64 = 1e-10;
pub const RANK_TOLERANCE: f64 = 1e-12;
pub const SGD_TOLERANCE: f64 = 1e-12;
pub const TRACE_FD_TOLERANCE: f64 = 1e-6;
pub const SUFFIX_INVARIANCE_TOLERANCE: f64 = 1e-10;
pub const SUFFIX_FACTORIZATION_TOLERANCE: f64 = 1e-9;
/// Trials may be dropped for a singular base up to this fraction.
pub const MAX_DROPPED_FRACTION: f64 = 0.1;

const DYNAMICS_STREAM: u64 = 2;
const FINETUNE_STREAM: u64 = 3;
const THEOREM_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    #[default]
    Train,
    Verify,
    Dynamics,
    FinetuneCompare,
    Selftest,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Train => "train",
            Subcommand::Verify => "verify",
            Subcommand::Dynamics => "dynamics",
            Subcommand::FinetuneCompare => "finetune-compare",
            Subcommand::Selftest => "selftest",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub subcommand: Subcommand,
    /// Output directory, created when missing.
    pub out: PathBuf,
    /// Checkpoint file, or a directory of checkpoints. Defaults to `<out>/checkpoints`.
    pub checkpoint: Option<PathBuf>,
    pub trials: usize,
    /// Triples per skip mode in the random-parameter transfer suite.
    pub theorem_trials: usize,
    /// Finetuning set size `M`.
    pub finetune_examples: usize,
    pub finetune_lr: f64,
    pub finetune_input: FinetuneInput,
    /// Added to every entry of ΔW during verification; nonzero values must fail.
    pub corrupt_delta_w: f64,
    pub plots: bool,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            subcommand: Subcommand::Train,
            out: PathBuf::from("out"),
            checkpoint: None,
            trials: 100,
            theorem_trials: 1000,
            finetune_examples: 50,
            finetune_lr: 0.01,
            finetune_input: FinetuneInput::SingleToken,
            corrupt_delta_w: 0.0,
            plots: true,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.theorem_trials == 0 {
            return Err(Error::Config("theorem_trials must be at least 1".into()));
        }
        if self.finetune_examples == 0 {
            return Err(Error::Config("finetune_examples must be at least 1".into()));
        }
        if !(self.finetune_lr.is_finite() && self.finetune_lr > 0.0) {
            return Err(Error::Config(format!("finetune_lr must be positive, got {}", self.finetune_lr)));
        }
        if !self.corrupt_delta_w.is_finite() {
            return Err(Error::Config("corrupt_delta_w must be finite".into()));
        }
        self.train.validate()
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoints"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Usage(_) => 1,
            CommandError::Verification(_) => 2,
            CommandError::Divergence(_) => 3,
        }
    }
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => CommandError::Divergence(e.to_string()),
            Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Format(_) => CommandError::Usage(e.to_string()),
            other => CommandError::Verification(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Usage(e.to_string())
    }
}

/// What a command produced: human-readable summary lines and the files written.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub summary: Vec<String>,
    pub files: Vec<PathBuf>,
}

pub fn run(config: &ExperimentConfig) -> Result<Report, CommandError> {
    match config.subcommand {
        Subcommand::Train => cmd_train(config),
        Subcommand::Verify => cmd_verify(config),
        Subcommand::Dynamics => cmd_dynamics(config),
        Subcommand::FinetuneCompare => cmd_finetune_compare(config),
        Subcommand::Selftest => cmd_selftest(config),
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct Csv {
    text: String,
}

impl Csv {
    fn new(config: &ExperimentConfig, meta: &[(&str, String)], header: &[&str]) -> Csv {
        let mut text = String::new();
        let echo = serde_json::to_string(config).expect("config serialises");
        let _ = writeln!(text, "# ctxlab {}", config.subcommand.name());
        let _ = writeln!(text, "# code_version: {CODE_VERSION}");
        let _ = writeln!(text, "# norm: frobenius");
        let _ = writeln!(text, "# config: {echo}");
        for (k, v) in meta {
            let _ = writeln!(text, "# {k}: {v}");
        }
        let _ = writeln!(text, "{}", header.join(","));
        Csv { text }
    }

    fn row(&mut self, cells: &[String]) {
        let _ = writeln!(self.text, "{}", cells.join(","));
    }

    fn save(&self, path: PathBuf, report: &mut Report) -> std::io::Result<()> {
        fs::write(&path, &self.text)?;
        report.files.push(path);
        Ok(())
    }
}

fn save_chart(config: &ExperimentConfig, chart: Chart, name: &str, report: &mut Report) -> std::io::Result<()> {
    if config.plots {
        let path = config.out.join(name);
        fs::write(&path, chart.to_svg())?;
        report.files.push(path);
    }
    Ok(())
}

fn prepare(config: &ExperimentConfig) -> Result<(), CommandError> {
    config.validate()?;
    fs::create_dir_all(&config.out).map_err(|e| CommandError::Usage(format!("cannot create {}: {e}", config.out.display())))?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Trains from scratch, writing `checkpoints/step_*.ckpt`, `checkpoints/final.ckpt`
/// and `train_log.csv` into the output directory.
pub fn cmd_train(config: &ExperimentConfig) -> Result<Report, CommandError> {
    prepare(config)?;
    let dir = config.out.join("checkpoints");
    fs::create_dir_all(&dir)?;
    let TrainRun { checkpoints, log } = train(&config.train)?;
    let mut report = Report::default();
    for ckpt in &checkpoints {
        let path = dir.join(format!("step_{:08}.ckpt", ckpt.step));
        save_checkpoint(ckpt, &path)?;
        report.files.push(path);
    }
    let last = checkpoints.last().expect("the initial checkpoint is always written");
    let final_path = dir.join("final.ckpt");
    save_checkpoint(last, &final_path)?;
    report.files.push(final_path);

    let mut csv = Csv::new(config, &[], &["step", "train_loss", "val_loss_prompt", "val_loss_delta_w", "val_max_gap"]);
    for row in &log {
        let v = row.validation;
        csv.row(&[
            row.step.to_string(),
            opt(row.train_loss),
            opt(v.map(|v| v.loss_prompt)),
            opt(v.map(|v| v.loss_delta_w)),
            opt(v.map(|v| v.max_gap)),
        ]);
    }
    csv.save(config.out.join("train_log.csv"), &mut report)?;

    let every = config.train.checkpoint_every;
    let mut binned = Vec::new();
    for chunk in log.iter().filter(|r| r.train_loss.is_some()).collect::<Vec<_>>().chunks(every) {
        let losses: Vec<f64> = chunk.iter().filter_map(|r| r.train_loss).collect();
        binned.push((chunk.last().expect("chunks are nonempty").step as f64, mean(&losses)));
    }
    let val = |f: fn(&crate::training::ValidationRecord) -> f64| -> Vec<(f64, f64)> {
        log.iter().filter_map(|r| r.validation.as_ref().map(|v| (r.step as f64, f(v)))).collect()
    };
    let chart = Chart {
        title: "Training and validation loss".into(),
        x_label: "step".into(),
        y_label: "loss".into(),
        log_y: true,
        series: vec![
            Series { label: "train (binned)".into(), points: binned, errors: None },
            Series { label: "val, prompt".into(), points: val(|v| v.loss_prompt), errors: None },
            Series { label: "val, ΔW".into(), points: val(|v| v.loss_delta_w), errors: None },
        ],
    };
    save_chart(config, chart, "train_log.svg", &mut report)?;

    if let Some(v) = log.last().and_then(|r| r.validation) {
        report.summary.push(format!(
            "step {}: val_loss_prompt {:.6} val_loss_delta_w {:.6} max_gap {:.3e}",
            last.step, v.loss_prompt, v.loss_delta_w, v.max_gap
        ));
    }
    Ok(report)
}

/// Checkpoints named by `path`: the file itself, or every `step_*.ckpt` in a directory
/// (any `*.ckpt` when there are none), sorted by name.
pub fn checkpoint_files(path: &Path) -> Result<Vec<PathBuf>, CommandError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CommandError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let mut all: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    all.sort();
    let steps: Vec<PathBuf> = all
        .iter()
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("step_")))
        .cloned()
        .collect();
    let files = if steps.is_empty() { all } else { steps };
    if files.is_empty() {
        return Err(CommandError::Usage(format!("no checkpoints in {}", path.display())));
    }
    Ok(files)
}

/// The checkpoint a single-model command runs on: the file, or `final.ckpt`
/// (else the last checkpoint) of a directory.
fn single_checkpoint(config: &ExperimentConfig) -> Result<Checkpoint, CommandError> {
    let path = config.checkpoint_path();
    let file = if path.is_dir() && path.join("final.ckpt").is_file() {
        path.join("final.ckpt")
    } else {
        checkpoint_files(&path)?.pop().expect("checkpoint_files is nonempty")
    };
    Ok(load_checkpoint(&file)?)
}

fn query_prediction(block: &BlockParams, query: &Vector) -> crate::Result<f64> {
    block.predict(&PromptMatrix::query_only(query.clone()))
}

/// Prediction after moving the whole context into the weights, with `corrupt`
/// added to every entry of ΔW.
fn transferred_prediction(block: &BlockParams, prompt: &PromptMatrix, corrupt: f64) -> crate::Result<f64> {
    let upd = corrupt_update(&transfer_full(block, prompt)?, Corruption::Shift(corrupt));
    query_prediction(&apply_to_block(block, &upd)?, prompt.query())
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct CheckpointCheck {
    step: usize,
    loss_prompt: f64,
    loss_delta_w: f64,
    max_gap: f64,
    worst_task: usize,
}

fn check_checkpoint(ckpt: &Checkpoint, tasks: &[LinearTask], corrupt: f64) -> crate::Result<CheckpointCheck> {
    let preds: Vec<(f64, f64)> = tasks
        .par_iter()
        .map(|t| {
            let prompt = to_prompt(t);
            Ok((ckpt.block.predict(&prompt)?, transferred_prediction(&ckpt.block, &prompt, corrupt)?))
        })
        .collect::<crate::Result<_>>()?;
    let mut out = CheckpointCheck { step: ckpt.step, loss_prompt: 0.0, loss_delta_w: 0.0, max_gap: 0.0, worst_task: 0 };
    for (i, (t, (p, q))) in tasks.iter().zip(&preds).enumerate() {
        out.loss_prompt += (p - t.target()).powi(2);
        out.loss_delta_w += (q - t.target()).powi(2);
        let gap = (p - q).abs();
        if gap.is_nan() || gap > out.max_gap {
            out.max_gap = gap;
            out.worst_task = i;
        }
    }
    out.loss_prompt /= 2.0 * tasks.len() as f64;
    out.loss_delta_w /= 2.0 * tasks.len() as f64;
    Ok(out)
}

fn theorem_seed(config: &ExperimentConfig) -> u64 {
    Rng::new(config.train.seed).split(THEOREM_STREAM).next_u64()
}

/// Evaluates every checkpoint with the prompt and with ΔW, writing `verify.csv`,
/// then runs the random-parameter transfer suite in both skip modes
/// (`theorem_suite.csv`).
pub fn cmd_verify(config: &ExperimentConfig) -> Result<Report, CommandError> {
    prepare(config)?;
    let files = checkpoint_files(&config.checkpoint_path())?;
    let mut report = Report::default();
    let mut checks = Vec::new();
    for file in &files {
        let ckpt = load_checkpoint(file)?;
        let tasks = validation_tasks(&ckpt.config);
        checks.push(check_checkpoint(&ckpt, &tasks, config.corrupt_delta_w)?);
    }
    let mut csv = Csv::new(
        config,
        &[("tolerance", fmt_f64(VERIFY_TOLERANCE)), ("checkpoints", files.len().to_string())],
        &["step", "val_loss_prompt", "val_loss_delta_w", "max_gap", "worst_task"],
    );
    for c in &checks {
        csv.row(&[c.step.to_string(), fmt_f64(c.loss_prompt), fmt_f64(c.loss_delta_w), fmt_f64(c.max_gap), c.worst_task.to_string()]);
    }
    csv.save(config.out.join("verify.csv"), &mut report)?;
    let curve = |f: fn(&CheckpointCheck) -> f64| checks.iter().map(|c| (c.step as f64, f(c))).collect();
    let chart = Chart {
        title: "Validation loss: prompt vs ΔW".into(),
        x_label: "step".into(),
        y_label: "loss".into(),
        log_y: true,
        series: vec![
            Series { label: "prompt".into(), points: curve(|c| c.loss_prompt), errors: None },
            Series { label: "ΔW".into(), points: curve(|c| c.loss_delta_w), errors: None },
        ],
    };
    save_chart(config, chart, "verify.svg", &mut report)?;

    let corruption = if config.corrupt_delta_w != 0.0 { Corruption::Shift(config.corrupt_delta_w) } else { Corruption::None };
    let mut trials = theorem_suite(config.theorem_trials, false, theorem_seed(config), corruption)?;
    trials.extend(theorem_suite(config.theorem_trials, true, theorem_seed(config), corruption)?);
    let mut csv = Csv::new(
        config,
        &[("tolerance", fmt_f64(THEOREM_TOLERANCE)), ("rank_tolerance", fmt_f64(RANK_TOLERANCE))],
        &["trial", "mlp_skip", "d", "n", "removed", "activation", "layer", "gap", "rank_residual"],
    );
    for t in &trials {
        csv.row(&[
            t.trial.to_string(),
            t.mlp_skip.to_string(),
            t.d.to_string(),
            t.n.to_string(),
            t.removed.to_string(),
            format!("{:?}", t.activation).to_lowercase(),
            if t.ema { "ema" } else { "attention" }.to_string(),
            fmt_f64(t.gap),
            fmt_f64(t.rank_residual),
        ]);
    }
    csv.save(config.out.join("theorem_suite.csv"), &mut report)?;

    let mut failures = Vec::new();
    for c in &checks {
        report.summary.push(format!(
            "step {}: val_loss_prompt {:.6} val_loss_delta_w {:.6} max_gap {:.3e}",
            c.step, c.loss_prompt, c.loss_delta_w, c.max_gap
        ));
        if c.max_gap.is_nan() || c.max_gap > VERIFY_TOLERANCE {
            failures.push(format!("checkpoint step {}: validation task {} gap {:.3e} > {:.0e}", c.step, c.worst_task, c.max_gap, VERIFY_TOLERANCE));
        }
    }
    let worst_gap = trials.iter().max_by(|a, b| a.gap.total_cmp(&b.gap)).expect("at least one trial");
    let worst_rank = trials.iter().map(|t| t.rank_residual).fold(0.0f64, f64::max);
    report.summary.push(format!("theorem suite: {} triples, worst gap {:.3e}, worst rank residual {:.3e}", trials.len(), worst_gap.gap, worst_rank));
    if worst_gap.gap.is_nan() || worst_gap.gap > THEOREM_TOLERANCE {
        failures.push(format!(
            "theorem suite trial {} (mlp_skip {}): gap {:.3e} > {:.0e}",
            worst_gap.trial, worst_gap.mlp_skip, worst_gap.gap, THEOREM_TOLERANCE
        ));
    }
    if worst_rank.is_nan() || worst_rank > RANK_TOLERANCE {
        failures.push(format!("theorem suite: rank residual {worst_rank:.3e} > {RANK_TOLERANCE:.0e}"));
    }
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(CommandError::Verification(failures.join("; ")))
    }
}

fn check_dropped(dropped: usize, trials: usize) -> Result<(), CommandError> {
    if dropped as f64 > MAX_DROPPED_FRACTION * trials as f64 {
        return Err(CommandError::Verification(format!("{dropped} of {trials} trials dropped for a singular base")));
    }
    Ok(())
}

/// `(mean, standard error)` of each column of equal-length rows.
fn column_stats(rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let width = rows.first().map_or(0, Vec::len);
    (0..width)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            (mean(&col), standard_error(&col))
        })
        .collect()
}

/// Weight-change norms, losses before and losses after each step of one trial.
type TrialCurves = (Vec<f64>, Vec<f64>, Vec<f64>);

/// `‖(ΔW)_{i+1} − (ΔW)_i‖_F` averaged over fresh tasks (`dynamics.csv`), and the
/// per-step trace losses before and after each step (`dynamics_losses.csv`).
pub fn cmd_dynamics(config: &ExperimentConfig) -> Result<Report, CommandError> {
    prepare(config)?;
    let ckpt = single_checkpoint(config)?;
    let (d, n) = (ckpt.config.d, ckpt.config.n);
    if n < 2 {
        return Err(CommandError::Usage("weight dynamics need a context length of at least 2".into()));
    }
    let root = Rng::new(config.train.seed).split(DYNAMICS_STREAM);
    let outcomes: Vec<Option<TrialCurves>> = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let task = sample_task(d, n, &mut root.split(t as u64));
            match prefix_dynamics(&ckpt.block, &to_prompt(&task)) {
                Ok(tr) => Ok(Some((tr.grad_norms, tr.losses_pre, tr.losses_post))),
                Err(Error::SingularBase { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<crate::Result<_>>()?;
    let kept: Vec<_> = outcomes.into_iter().flatten().collect();
    let dropped = config.trials - kept.len();
    let meta = [
        ("checkpoint_step", ckpt.step.to_string()),
        ("trials", config.trials.to_string()),
        ("dropped_trials", dropped.to_string()),
    ];
    let mut report = Report::default();
    let norms = column_stats(&kept.iter().map(|k| k.0.clone()).collect::<Vec<_>>());
    let mut csv = Csv::new(config, &meta, &["i", "mean", "standard_error"]);
    for (i, (m, se)) in norms.iter().enumerate() {
        csv.row(&[(i + 1).to_string(), fmt_f64(*m), fmt_f64(*se)]);
    }
    csv.save(config.out.join("dynamics.csv"), &mut report)?;

    let pre = column_stats(&kept.iter().map(|k| k.1.clone()).collect::<Vec<_>>());
    let post = column_stats(&kept.iter().map(|k| k.2.clone()).collect::<Vec<_>>());
    let mut csv = Csv::new(config, &meta, &["i", "loss_pre_mean", "loss_pre_se", "loss_post_mean", "loss_post_se"]);
    for (i, ((pm, ps), (qm, qs))) in pre.iter().zip(&post).enumerate() {
        csv.row(&[i.to_string(), fmt_f64(*pm), fmt_f64(*ps), fmt_f64(*qm), fmt_f64(*qs)]);
    }
    csv.save(config.out.join("dynamics_losses.csv"), &mut report)?;

    let chart = Chart {
        title: "Change of the transferred weights per context token".into(),
        x_label: "i".into(),
        y_label: "‖(ΔW)_{i+1} − (ΔW)_i‖_F".into(),
        log_y: false,
        series: vec![Series {
            label: "mean ± se".into(),
            points: norms.iter().enumerate().map(|(i, (m, _))| ((i + 1) as f64, *m)).collect(),
            errors: Some(norms.iter().map(|(_, se)| *se).collect()),
        }],
    };
    save_chart(config, chart, "dynamics.svg", &mut report)?;
    if let (Some(first), Some(last)) = (norms.first(), norms.last()) {
        report.summary.push(format!("{} trials ({dropped} dropped): mean at i=1 {:.4e}, at i={} {:.4e}", config.trials, first.0, norms.len(), last.0));
    }
    check_dropped(dropped, config.trials)?;
    Ok(report)
}

/// Per-step test losses `½(ŷ − y)²` of one finetuning trial: SGD on the examples
/// and transfer of the first `i` examples into ΔW, for `i = 0..=M`.
/// `None` when some prefix has a singular base.
pub fn finetune_trial(block: &BlockParams, task: &LinearTask, lr: f64, input: FinetuneInput) -> crate::Result<Option<(Vec<f64>, Vec<f64>)>> {
    let examples: Vec<(Vector, f64)> = task.xs.iter().map(|x| (x.clone(), task.label(x))).collect();
    let y = task.target();
    let loss = |pred: f64| 0.5 * (pred - y).powi(2);
    let prompt = to_prompt(task);
    let base = loss(query_prediction(block, prompt.query())?);
    let mut gd = vec![base];
    let mut dw = vec![base];
    let mut tuned = block.clone();
    for i in 1..=examples.len() {
        finetune_step(&mut tuned, &examples, i - 1, lr, input)?;
        gd.push(loss(query_prediction(&tuned, prompt.query())?));
        match transferred_prediction(block, &prompt.prefix(i), 0.0) {
            Ok(p) => dw.push(loss(p)),
            Err(Error::SingularBase { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some((gd, dw)))
}

/// Test loss of finetuning by gradient descent against transferring the same
/// examples into ΔW, averaged over fresh tasks (`finetune_compare.csv`).
pub fn cmd_finetune_compare(config: &ExperimentConfig) -> Result<Report, CommandError> {
    prepare(config)?;
    let ckpt = single_checkpoint(config)?;
    let d = ckpt.config.d;
    let m = config.finetune_examples;
    let root = Rng::new(config.train.seed).split(FINETUNE_STREAM);
    let outcomes: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let task = sample_task(d, m, &mut root.split(t as u64));
            finetune_trial(&ckpt.block, &task, config.finetune_lr, config.finetune_input)
        })
        .collect::<crate::Result<_>>()?;
    let kept: Vec<_> = outcomes.into_iter().flatten().collect();
    let dropped = config.trials - kept.len();
    let input = match config.finetune_input {
        FinetuneInput::SingleToken => "single_token: query (x_j; 0) alone, target y_j",
        FinetuneInput::GrowingContext => "growing_context: query (x_j; 0) after examples 1..j-1 as context, target y_j",
    };
    let meta = [
        ("checkpoint_step", ckpt.step.to_string()),
        ("trials", config.trials.to_string()),
        ("dropped_trials", dropped.to_string()),
        ("finetune_input", input.to_string()),
        ("test_loss", "0.5 * (prediction - target)^2 on the query-only prompt (x_test; 0)".to_string()),
    ];
    let gd = column_stats(&kept.iter().map(|k| k.0.clone()).collect::<Vec<_>>());
    let dw = column_stats(&kept.iter().map(|k| k.1.clone()).collect::<Vec<_>>());
    let mut report = Report::default();
    let mut csv = Csv::new(config, &meta, &["i", "gd_loss_mean", "gd_loss_se", "dw_loss_mean", "dw_loss_se"]);
    for (i, ((gm, gs), (wm, ws))) in gd.iter().zip(&dw).enumerate() {
        csv.row(&[i.to_string(), fmt_f64(*gm), fmt_f64(*gs), fmt_f64(*wm), fmt_f64(*ws)]);
    }
    csv.save(config.out.join("finetune_compare.csv"), &mut report)?;
    let series = |label: &str, s: &[(f64, f64)]| Series {
        label: label.into(),
        points: s.iter().enumerate().map(|(i, (m, _))| (i as f64, *m)).collect(),
        errors: Some(s.iter().map(|(_, se)| *se).collect()),
    };
    let chart = Chart {
        title: "Test loss: finetuning vs weight transfer".into(),
        x_label: "examples i".into(),
        y_label: "test loss".into(),
        log_y: false,
        series: vec![series("finetune GD", &gd), series("ΔW transfer", &dw)],
    };
    save_chart(config, chart, "finetune_compare.svg", &mut report)?;
    if let (Some(g0), Some(gm), Some(w0), Some(wm)) = (gd.first(), gd.last(), dw.first(), dw.last()) {
        report.summary.push(format!(
            "{} trials ({dropped} dropped): gd loss {:.4} -> {:.4}, ΔW loss {:.4} -> {:.4}",
            config.trials, g0.0, gm.0, w0.0, wm.0
        ));
    }
    check_dropped(dropped, config.trials)?;
    Ok(report)
}

/// One row of the self-test table.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
    pub threshold: f64,
    pub passed: bool,
}

fn suite_row(name: &str, trials: usize, worst: f64, threshold: f64) -> SuiteResult {
    SuiteResult { name: name.into(), trials, worst, threshold, passed: worst <= threshold }
}

fn max_of(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(0.0f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x) })
}

/// Runs every invariant suite. The last two rows are negative controls whose
/// `worst` is the smallest detected gap; they pass when the defect is caught.
pub fn selftest_suites(seed: u64) -> crate::Result<Vec<SuiteResult>> {
    let mut rows = Vec::new();
    let off = theorem_suite(1000, false, seed, Corruption::None)?;
    let on = theorem_suite(1000, true, seed, Corruption::None)?;
    rows.push(suite_row("transfer, mlp_skip off", off.len(), max_of(off.iter().map(|t| t.gap)), THEOREM_TOLERANCE));
    rows.push(suite_row("transfer, mlp_skip on", on.len(), max_of(on.iter().map(|t| t.gap)), THEOREM_TOLERANCE));
    rows.push(suite_row("rank-one update", off.len() + on.len(), max_of(off.iter().chain(&on).map(|t| t.rank_residual)), RANK_TOLERANCE));
    let sgd = sgd_suite(200, seed)?;
    rows.push(suite_row("prefix weights as SGD", sgd.len(), max_of(sgd.iter().map(|t| t.identity_gap)), SGD_TOLERANCE));
    rows.push(suite_row("trace-loss gradient", sgd.len(), max_of(sgd.iter().map(|t| t.trace_fd_error)), TRACE_FD_TOLERANCE));
    let suffix = suffix_suite(200, seed)?;
    rows.push(suite_row("suffix invariance", suffix.len(), max_of(suffix.iter().map(|t| t.max_invariance_gap)), SUFFIX_INVARIANCE_TOLERANCE));
    rows.push(suite_row("suffix factorization", suffix.len(), max_of(suffix.iter().map(|t| t.factorization_rel_gap)), SUFFIX_FACTORIZATION_TOLERANCE));
    let grads = gradient_suite(24, seed)?;
    rows.push(suite_row("gradients vs finite differences", grads.len(), max_of(grads.iter().map(|t| t.worst_ratio)), 1.0));

    let tiny = TrainConfig { n: 5, batch_size: 4, steps: 6, checkpoint_every: 3, hidden_dim: 8, val_tasks: 16, ..TrainConfig::default() };
    let a = train(&tiny)?;
    let b = train(&tiny)?;
    let same = a.log == b.log && a.checkpoints == b.checkpoints;
    rows.push(suite_row("training determinism", 2, if same { 0.0 } else { 1.0 }, 0.0));
    let last = a.checkpoints.last().expect("training writes checkpoints");
    let bytes = checkpoint_bytes(last);
    let round = read_checkpoint(bytes.as_slice())?;
    rows.push(suite_row("checkpoint round trip", 1, if &round == last && checkpoint_bytes(&round) == bytes { 0.0 } else { 1.0 }, 0.0));

    for (name, corruption) in [("negative control: ΔW sign flipped", Corruption::FlipSign), ("negative control: ΔW shifted by 1e-3", Corruption::Shift(1e-3))] {
        let bad = theorem_suite(200, false, seed, corruption)?;
        let caught = max_of(bad.iter().map(|t| t.gap));
        rows.push(SuiteResult { name: name.into(), trials: bad.len(), worst: caught, threshold: THEOREM_TOLERANCE, passed: caught > THEOREM_TOLERANCE });
    }
    Ok(rows)
}

pub fn format_table(rows: &[SuiteResult]) -> Vec<String> {
    let mut out = vec![format!("{:<40} {:>6} {:>12} {:>10}  status", "suite", "trials", "worst", "threshold")];
    for r in rows {
        out.push(format!(
            "{:<40} {:>6} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.trials,
            r.worst,
            r.threshold,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    out
}

/// Runs [`selftest_suites`] and fails if any row fails. Writes nothing.
pub fn cmd_selftest(config: &ExperimentConfig) -> Result<Report, CommandError> {
    let rows = selftest_suites(config.train.seed)?;
    let report = Report { summary: format_table(&rows), files: Vec::new() };
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(CommandError::Verification(format!("{}\nfailed suites: {}", report.summary.join("\n"), failed.join(", "))))
    }
}
