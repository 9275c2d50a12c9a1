//! Running experiments and writing their artifacts.
//!
//! A run directory holds:
//!
//! - `metrics.jsonl`: one [`MetricsRecord`] per iteration
//! - `summary.csv`: `metric,count,first,last,min,max,median,mean`
//! - `checkpoint.json`: config, environment and [`TrainState`] (see [`Checkpoint`])
//! - `config.resolved.toml`: the config with every default filled in
//!
//! A diverged run writes `checkpoint.last_good.json` instead of the final
//! checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::{counterexample_search, BoundMutation, RandomInstances, ReplayFile, SearchSummary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{read_metrics, write_record, MetricsRecord, METRIC_NAMES};
use crate::policy::RngStream;
use crate::trainer::{evaluate_pass_at_1, Environment, PassAtOne, TrainState, Trainer};

use super::compare::summarize;
use super::config::ExperimentConfig;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LAST_GOOD_FILE: &str = "checkpoint.last_good.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

pub const CHECKPOINT_SCHEMA: &str = "grpo-core/checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Mixed into the run seed for evaluation draws.
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

/// Process exit status for an error: 2 for configuration problems, 3 for a
/// diverged run, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Diverged { .. } => 3,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub environment: Environment,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, environment: &Environment, state: &TrainState) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA.into(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            environment: environment.clone(),
            state: state.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let schema = value.get("schema").and_then(|v| v.as_str());
        let version = value.get("version").and_then(|v| v.as_u64());
        if schema != Some(CHECKPOINT_SCHEMA) || version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint {schema:?} v{version:?} (expected {CHECKPOINT_SCHEMA} v{CHECKPOINT_VERSION})",
                path.display()
            )));
        }
        serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub iterations: usize,
    pub final_reward: f64,
    pub pass_at_1: Option<f64>,
}

fn eval_stream(seed: u64, global_iteration: usize) -> RngStream {
    RngStream::new(seed ^ EVAL_SEED_SALT, global_iteration as u64)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Trains per `config`, optionally continuing from a checkpoint, and writes
/// the run directory.
pub fn run_experiment(config: &ExperimentConfig, resume: Option<&Path>, exec: Execution) -> Result<RunOutcome> {
    config.validate()?;
    let dir = config.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (env, initial) = config.environment.build()?;
    let m = config.trainer.iterations_per_stage;

    let (mut trainer, mut kept) = match resume {
        None => (
            Trainer::new(config.trainer.clone(), env.clone(), initial, exec)?,
            Vec::new(),
        ),
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.environment != env {
                return Err(Error::Config(format!(
                    "{}: checkpoint environment differs from the configured one",
                    path.display()
                )));
            }
            let done = ck.state.global_iteration(m);
            let metrics = dir.join(METRICS_FILE);
            let kept: Vec<MetricsRecord> = if metrics.exists() {
                read_metrics(&metrics)?
                    .into_iter()
                    .filter(|r| r.global_iteration <= done)
                    .collect()
            } else {
                Vec::new()
            };
            (
                Trainer::resume(config.trainer.clone(), env.clone(), ck.state, exec)?,
                kept,
            )
        }
    };

    std::fs::write(dir.join(RESOLVED_CONFIG_FILE), config.to_resolved_toml()?)
        .map_err(|e| Error::io(dir.join(RESOLVED_CONFIG_FILE), e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut out = create(&metrics_path)?;
    for r in &kept {
        write_record(&mut out, r).map_err(|e| Error::io(&metrics_path, e))?;
    }

    let total = config.trainer.total_iterations();
    let eval = &config.evaluation;
    let mut last_pass = None;
    loop {
        let report = match trainer.step() {
            Ok(Some(r)) => r,
            Ok(None) => break,
            Err(Error::Diverged {
                stage,
                iteration,
                reason,
                last_good,
            }) => {
                out.flush().map_err(|e| Error::io(&metrics_path, e))?;
                Checkpoint::new(config, &env, &last_good).write(&dir.join(LAST_GOOD_FILE))?;
                return Err(Error::Diverged {
                    stage,
                    iteration,
                    reason,
                    last_good,
                });
            }
            Err(e) => return Err(e),
        };
        let mut record = report.record;
        let gi = record.global_iteration;
        if (eval.period > 0 && gi % eval.period == 0) || gi == total {
            let p = evaluate_pass_at_1(
                &trainer.state().theta,
                &env,
                eval.pass_at_1_samples,
                eval_stream(config.trainer.seed, gi),
                exec,
            )?;
            record.pass_at_1 = Some(p.mean);
            last_pass = Some(p.mean);
        }
        write_record(&mut out, &record).map_err(|e| Error::io(&metrics_path, e))?;
        out.flush().map_err(|e| Error::io(&metrics_path, e))?;
        if eval.checkpoint_period > 0 && gi % eval.checkpoint_period == 0 && gi < total {
            Checkpoint::new(config, &env, trainer.state()).write(&dir.join(CHECKPOINT_FILE))?;
        }
        kept.push(record);
    }
    drop(out);
    Checkpoint::new(config, &env, trainer.state()).write(&dir.join(CHECKPOINT_FILE))?;
    write_summary(&dir.join(SUMMARY_FILE), &kept)?;
    Ok(RunOutcome {
        dir,
        iterations: kept.len(),
        final_reward: kept.last().map_or(f64::NAN, |r| r.mean_reward),
        pass_at_1: last_pass,
    })
}

fn write_summary(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(out, "metric,count,first,last,min,max,median,mean").map_err(io)?;
    for name in METRIC_NAMES {
        let values: Vec<f64> = records.iter().filter_map(|r| r.metric(name)).collect();
        if let Some((min, max, median, mean)) = summarize(&values) {
            writeln!(
                out,
                "{name},{},{:?},{:?},{min:?},{max:?},{median:?},{mean:?}",
                values.len(),
                values[0],
                values[values.len() - 1]
            )
            .map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Pass@1 of a checkpointed policy.
pub fn evaluate_checkpoint(path: &Path, samples: usize, seed: u64, exec: Execution) -> Result<PassAtOne> {
    let ck = Checkpoint::read(path)?;
    evaluate_pass_at_1(&ck.state.theta, &ck.environment, samples, eval_stream(seed, 0), exec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckBoundsOptions {
    pub instances: u64,
    pub seed: u64,
    pub tolerance: f64,
    pub prompts: usize,
    pub responses: usize,
    pub var_epsilon: f64,
    pub mutation: BoundMutation,
    /// Directory for replay files of counterexamples.
    pub replay_dir: Option<PathBuf>,
}

impl Default for CheckBoundsOptions {
    fn default() -> Self {
        Self {
            instances: 10_000,
            seed: 0,
            tolerance: crate::bounds::SLACK_TOLERANCE,
            prompts: 4,
            responses: 6,
            var_epsilon: 1e-4,
            mutation: BoundMutation::None,
            replay_dir: None,
        }
    }
}

/// Randomized search for violations of the improvement bound.
pub fn check_bounds(opts: &CheckBoundsOptions, exec: Execution) -> Result<SearchSummary> {
    if opts.prompts == 0 || opts.responses < 2 {
        return Err(Error::Config(
            "check-bounds needs at least 1 prompt and 2 responses".into(),
        ));
    }
    let generator = RandomInstances::new(opts.prompts, opts.responses, opts.var_epsilon, opts.seed);
    let summary = counterexample_search(&generator, opts.instances, opts.tolerance, opts.mutation, exec).map_err(
        |e| match e {
            Error::Validation(m) => Error::Config(m),
            other => other,
        },
    )?;
    if let Some(dir) = &opts.replay_dir {
        if !summary.counterexamples.is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for c in &summary.counterexamples {
            ReplayFile::new(c, opts.tolerance, opts.mutation)
                .write(&dir.join(format!("counterexample-{:06}.json", c.index)))?;
        }
    }
    Ok(summary)
}
