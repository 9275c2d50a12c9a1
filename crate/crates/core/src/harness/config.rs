//! Experiment configuration files (TOML).
//!
//! ```toml
//! label = "bandit"
//!
//! [environment]
//! kind = "bernoulli"
//! responses = 8
//! prompt_count = 16
//! success_low = 0.2
//! success_high = 0.5
//!
//! [trainer]
//! learning_rate = 0.05
//! optimizer = "adam"
//!
//! [evaluation]
//! pass_at_1_samples = 50
//! period = 100
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Policy, PromptSpace, RngStream};
use crate::reward::{
    draw_success_probs, make_bernoulli_env_with, normalize_reward, BernoulliLayout, SequenceTask, DEFAULT_RESPONSE_CAP,
};
use crate::trainer::{Environment, TrainerConfig};

/// Overrides the run directory of every `train` invocation.
pub const OUTPUT_DIR_ENV: &str = "GRPO_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentKind {
    #[default]
    Bernoulli,
    Sequence,
    Table,
}

/// Environment description. Which keys apply depends on `kind`:
///
/// - `bernoulli`: `responses`, and either `success_probs` or `prompt_count`
///   with `success_low`/`success_high`; optional `layout`
/// - `sequence`: `alphabet_size`, `sequence_length`, `targets`, `response_cap`
/// - `table`: `rewards` (rows of nonnegative numbers, scaled to `[0, 1]`)
///
/// `seed` and `prompt_weights` apply to every kind.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    #[serde(default)]
    pub kind: EnvironmentKind,
    #[serde(default)]
    pub seed: u64,
    pub prompt_weights: Option<Vec<f64>>,
    pub responses: Option<usize>,
    pub success_probs: Option<Vec<f64>>,
    pub prompt_count: Option<usize>,
    pub success_low: Option<f64>,
    pub success_high: Option<f64>,
    pub layout: Option<BernoulliLayout>,
    pub alphabet_size: Option<usize>,
    pub sequence_length: Option<usize>,
    pub targets: Option<Vec<usize>>,
    pub response_cap: Option<usize>,
    pub rewards: Option<Vec<Vec<f64>>>,
}

fn require<T: Clone>(value: &Option<T>, key: &str, kind: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::Config(format!("environment.{key} is required for kind = \"{kind}\"")))
}

fn reject(present: bool, key: &str, kind: &str) -> Result<()> {
    if present {
        return Err(Error::Config(format!(
            "environment.{key} does not apply to kind = \"{kind}\""
        )));
    }
    Ok(())
}

impl EnvironmentSpec {
    /// Builds the environment and the initial policy.
    pub fn build(&self) -> Result<(Environment, Policy)> {
        let (reward, initial) = match self.kind {
            EnvironmentKind::Bernoulli => {
                let kind = "bernoulli";
                for (present, key) in [
                    (self.alphabet_size.is_some(), "alphabet_size"),
                    (self.sequence_length.is_some(), "sequence_length"),
                    (self.targets.is_some(), "targets"),
                    (self.response_cap.is_some(), "response_cap"),
                    (self.rewards.is_some(), "rewards"),
                ] {
                    reject(present, key, kind)?;
                }
                let responses = require(&self.responses, "responses", kind)?;
                let probs = match (&self.success_probs, self.prompt_count) {
                    (Some(p), None) => {
                        reject(
                            self.success_low.is_some() || self.success_high.is_some(),
                            "success_low/success_high",
                            kind,
                        )?;
                        p.clone()
                    }
                    (None, Some(n)) => {
                        let lo = require(&self.success_low, "success_low", kind)?;
                        let hi = require(&self.success_high, "success_high", kind)?;
                        draw_success_probs(n, lo, hi, RngStream::new(self.seed, 1)).map_err(config)?
                    }
                    _ => {
                        return Err(Error::Config(
                            "bernoulli environment needs exactly one of success_probs or prompt_count".into(),
                        ))
                    }
                };
                make_bernoulli_env_with(
                    &probs,
                    responses,
                    RngStream::new(self.seed, 2),
                    self.layout.unwrap_or_default(),
                )
                .map_err(config)?
            }
            EnvironmentKind::Sequence => {
                let kind = "sequence";
                for (present, key) in [
                    (self.responses.is_some(), "responses"),
                    (self.success_probs.is_some(), "success_probs"),
                    (self.prompt_count.is_some(), "prompt_count"),
                    (
                        self.success_low.is_some() || self.success_high.is_some(),
                        "success_low/success_high",
                    ),
                    (self.layout.is_some(), "layout"),
                    (self.rewards.is_some(), "rewards"),
                ] {
                    reject(present, key, kind)?;
                }
                let task = SequenceTask {
                    alphabet_size: require(&self.alphabet_size, "alphabet_size", kind)?,
                    sequence_length: require(&self.sequence_length, "sequence_length", kind)?,
                    targets: require(&self.targets, "targets", kind)?,
                    response_cap: self.response_cap.unwrap_or(DEFAULT_RESPONSE_CAP),
                };
                let reward = task.compile().map_err(config)?;
                let policy = Policy::uniform(reward.prompt_count(), reward.response_count());
                (reward, policy)
            }
            EnvironmentKind::Table => {
                let kind = "table";
                for (present, key) in [
                    (self.responses.is_some(), "responses"),
                    (self.success_probs.is_some(), "success_probs"),
                    (self.prompt_count.is_some(), "prompt_count"),
                    (
                        self.success_low.is_some() || self.success_high.is_some(),
                        "success_low/success_high",
                    ),
                    (self.layout.is_some(), "layout"),
                    (self.alphabet_size.is_some(), "alphabet_size"),
                    (self.sequence_length.is_some(), "sequence_length"),
                    (self.targets.is_some(), "targets"),
                    (self.response_cap.is_some(), "response_cap"),
                ] {
                    reject(present, key, kind)?;
                }
                let reward = normalize_reward(&require(&self.rewards, "rewards", kind)?).map_err(config)?;
                if reward.response_count() < 2 || reward.response_count() > DEFAULT_RESPONSE_CAP {
                    return Err(Error::Config(format!(
                        "table environments need 2..={DEFAULT_RESPONSE_CAP} responses per prompt"
                    )));
                }
                let policy = Policy::uniform(reward.prompt_count(), reward.response_count());
                (reward, policy)
            }
        };
        let prompts = match &self.prompt_weights {
            Some(w) => PromptSpace::new(w.clone()).map_err(config)?,
            None => PromptSpace::uniform(reward.prompt_count()),
        };
        Ok((Environment::new(prompts, reward).map_err(config)?, initial))
    }
}

fn config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSpec {
    pub pass_at_1_samples: usize,
    /// Pass@1 every this many iterations; 0 evaluates only after the last one.
    pub period: usize,
    /// Checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_period: usize,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            pass_at_1_samples: 50,
            period: 0,
            checkpoint_period: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_label")]
    pub label: String,
    pub output_dir: Option<PathBuf>,
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
}

fn default_label() -> String {
    "run".into()
}

/// Keys that are easy to confuse, with the keys they probably meant.
const AMBIGUOUS_KEYS: [(&str, &str); 3] = [
    ("epsilon", "`clip_epsilon` or `var_epsilon`"),
    ("eps", "`clip_epsilon`, `var_epsilon` or `adam_eps`"),
    ("lr", "`learning_rate`"),
];

fn with_hint(message: String) -> String {
    for (key, hint) in AMBIGUOUS_KEYS {
        if message.contains(&format!("unknown field `{key}`")) {
            return format!("{message}\nhint: `{key}` is ambiguous; did you mean {hint}?");
        }
    }
    message
}

impl ExperimentConfig {
    /// Parses and validates a config, applying `key=value` overrides (dotted
    /// keys, TOML values; bare words are read as strings).
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let parsed: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(with_hint(format!("{origin}: {e}"))))?;
        let cfg = if overrides.is_empty() {
            parsed
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            ExperimentConfig::deserialize(toml::Value::Table(table))
                .map_err(|e| Error::Config(with_hint(format!("--set: {e}"))))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.is_empty() || self.label.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "label {:?} must be a nonempty file name",
                self.label
            )));
        }
        if self.trainer.seed > i64::MAX as u64 {
            return Err(Error::Config("trainer.seed must fit in a signed 64-bit integer".into()));
        }
        if self.evaluation.pass_at_1_samples == 0 {
            return Err(Error::Config("evaluation.pass_at_1_samples must be positive".into()));
        }
        self.trainer.validate()?;
        self.environment.build()?;
        Ok(())
    }

    /// Run directory: `$GRPO_OUTPUT_DIR` if set, else `output_dir`, else
    /// `runs/<label>`.
    pub fn run_dir(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            return PathBuf::from(dir);
        }
        self.output_dir
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&self.label))
    }

    /// Config with every default spelled out.
    pub fn to_resolved_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("--set key {key:?} is malformed")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: `{part}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
