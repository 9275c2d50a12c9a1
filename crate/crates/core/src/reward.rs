//! Verifiable-reward environments.
//!
//! Rewards live in `[0, 1]` on the full prompt x response grid. Bernoulli
//! scenarios are deterministic binary tables paired with an initial policy
//! whose mass on correct responses equals the requested success probability;
//! the only randomness is in sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Policy, RngStream};

/// Largest enumerated response space accepted by the generators.
pub const DEFAULT_RESPONSE_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardRepr", into = "RewardRepr")]
pub struct RewardModel {
    prompts: usize,
    responses: usize,
    table: Vec<f64>,
    is_binary: bool,
}

#[derive(Serialize, Deserialize)]
struct RewardRepr {
    prompts: usize,
    responses: usize,
    table: Vec<f64>,
}

impl From<RewardModel> for RewardRepr {
    fn from(r: RewardModel) -> Self {
        RewardRepr {
            prompts: r.prompts,
            responses: r.responses,
            table: r.table,
        }
    }
}

impl TryFrom<RewardRepr> for RewardModel {
    type Error = Error;
    fn try_from(r: RewardRepr) -> Result<Self> {
        RewardModel::new(r.prompts, r.responses, r.table)
    }
}

impl RewardModel {
    /// Validates a row-major table with entries in `[0, 1]`.
    pub fn new(prompts: usize, responses: usize, table: Vec<f64>) -> Result<Self> {
        if prompts == 0 || responses == 0 || table.len() != prompts * responses {
            return Err(Error::ShapeMismatch(format!(
                "reward table has {} entries, expected {prompts}x{responses}",
                table.len()
            )));
        }
        if let Some(i) = table.iter().position(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Validation(format!(
                "reward ({}, {}) = {} lies outside [0, 1]; normalize it first",
                i / responses,
                i % responses,
                table[i]
            )));
        }
        let is_binary = table.iter().all(|r| *r == 0.0 || *r == 1.0);
        Ok(Self {
            prompts,
            responses,
            table,
            is_binary,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let (prompts, responses) = rows_shape(rows)?;
        Self::new(prompts, responses, rows.concat())
    }

    pub fn prompt_count(&self) -> usize {
        self.prompts
    }

    pub fn response_count(&self) -> usize {
        self.responses
    }

    pub fn is_binary(&self) -> bool {
        self.is_binary
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn row(&self, prompt: usize) -> &[f64] {
        &self.table[prompt * self.responses..(prompt + 1) * self.responses]
    }

    pub fn get(&self, prompt: usize, response: usize) -> f64 {
        self.table[prompt * self.responses + response]
    }

    pub fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.shape() != (self.prompts, self.responses) {
            return Err(Error::ShapeMismatch(format!(
                "policy shape {:?} does not match reward shape {:?}",
                policy.shape(),
                (self.prompts, self.responses)
            )));
        }
        Ok(())
    }
}

fn rows_shape(rows: &[Vec<f64>]) -> Result<(usize, usize)> {
    let responses = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || responses == 0 || rows.iter().any(|r| r.len() != responses) {
        return Err(Error::ShapeMismatch(
            "reward rows must be nonempty and of equal length".into(),
        ));
    }
    Ok((rows.len(), responses))
}

/// Divides a nonnegative raw reward matrix by its largest entry.
pub fn normalize_reward(raw: &[Vec<f64>]) -> Result<RewardModel> {
    let (prompts, responses) = rows_shape(raw)?;
    let flat = raw.concat();
    if let Some(v) = flat.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!(
            "raw reward {v} is not a finite nonnegative number"
        )));
    }
    let max = flat.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::Validation("raw reward matrix is all zero".into()));
    }
    let table = flat.iter().map(|v| if *v == max { 1.0 } else { v / max }).collect();
    RewardModel::new(prompts, responses, table)
}

/// Expected reward `J(pi(.|x)) = sum_y pi(y|x) r(x, y)`.
pub fn success_rate(policy: &Policy, reward: &RewardModel, prompt: usize) -> Result<f64> {
    reward.check_policy(policy)?;
    let probs = policy.row_distribution(prompt)?;
    Ok(probs.iter().zip(reward.row(prompt)).map(|(p, r)| p * r).sum())
}

/// Expected reward for every prompt.
pub fn success_rates(policy: &Policy, reward: &RewardModel) -> Result<Vec<f64>> {
    (0..reward.prompt_count())
        .map(|x| success_rate(policy, reward, x))
        .collect()
}

/// How the initial policy of a Bernoulli environment realizes `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BernoulliLayout {
    /// `ceil(p n)` correct responses sharing mass `p`; any `p` is reachable.
    #[default]
    ExactMass,
    /// Uniform policy; `p` must be a multiple of `1 / n`.
    Uniform,
}

/// Binary reward table plus an initial policy with `success_rate(x) = p_x`.
pub fn make_bernoulli_env(
    success_probs: &[f64],
    responses_per_prompt: usize,
    stream: RngStream,
) -> Result<(RewardModel, Policy)> {
    make_bernoulli_env_with(success_probs, responses_per_prompt, stream, BernoulliLayout::ExactMass)
}

pub fn make_bernoulli_env_with(
    success_probs: &[f64],
    responses_per_prompt: usize,
    stream: RngStream,
    layout: BernoulliLayout,
) -> Result<(RewardModel, Policy)> {
    let n = responses_per_prompt;
    if success_probs.is_empty() {
        return Err(Error::Validation("need at least one prompt".into()));
    }
    if !(2..=DEFAULT_RESPONSE_CAP).contains(&n) {
        return Err(Error::Validation(format!(
            "responses_per_prompt must be in 2..={DEFAULT_RESPONSE_CAP}, got {n}"
        )));
    }
    let mut rng = stream.rng();
    let mut table = Vec::with_capacity(success_probs.len() * n);
    let mut probs = Vec::with_capacity(success_probs.len() * n);
    for (x, &p) in success_probs.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Validation(format!(
                "success probability {p} at prompt {x} is outside [0, 1]"
            )));
        }
        let correct = match layout {
            BernoulliLayout::ExactMass => {
                if p == 0.0 {
                    0
                } else if p == 1.0 {
                    n
                } else {
                    ((p * n as f64).ceil() as usize).clamp(1, n - 1)
                }
            }
            BernoulliLayout::Uniform => {
                let scaled = p * n as f64;
                let k = scaled.round();
                if (scaled - k).abs() > 1e-9 {
                    return Err(Error::Validation(format!(
                        "p = {p} at prompt {x} is not reachable by a uniform policy over {n} responses; nearest achievable: {} or {}",
                        scaled.floor() / n as f64,
                        scaled.ceil() / n as f64
                    )));
                }
                k as usize
            }
        };
        let mut row = vec![0.0; n];
        row[..correct].iter_mut().for_each(|r| *r = 1.0);
        row.shuffle(&mut rng);
        let (mass_right, mass_wrong) = match layout {
            BernoulliLayout::Uniform => (1.0 / n as f64, 1.0 / n as f64),
            BernoulliLayout::ExactMass if correct == 0 || correct == n => (1.0 / n as f64, 1.0 / n as f64),
            BernoulliLayout::ExactMass => (p / correct as f64, (1.0 - p) / (n - correct) as f64),
        };
        probs.extend(row.iter().map(|r| if *r == 1.0 { mass_right } else { mass_wrong }));
        table.extend(row);
    }
    let reward = RewardModel::new(success_probs.len(), n, table)?;
    let policy = Policy::from_probs(success_probs.len(), n, &probs)?;
    Ok((reward, policy))
}

/// `count` success probabilities drawn uniformly from `[lo, hi]`.
pub fn draw_success_probs(count: usize, lo: f64, hi: f64, stream: RngStream) -> Result<Vec<f64>> {
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Validation(format!(
            "success range [{lo}, {hi}] must lie inside [0, 1]"
        )));
    }
    let mut rng = stream.rng();
    Ok((0..count).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect())
}

/// Enumerated token-sequence task: each prompt asks for a sequence whose
/// digit sum equals its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTask {
    pub alphabet_size: usize,
    pub sequence_length: usize,
    pub targets: Vec<usize>,
    #[serde(default = "default_cap")]
    pub response_cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_RESPONSE_CAP
}

impl SequenceTask {
    pub fn response_count(&self) -> Result<usize> {
        let too_big = || {
            Error::Validation(format!(
                "{}^{} sequences exceed the response cap {}",
                self.alphabet_size, self.sequence_length, self.response_cap
            ))
        };
        let count = u32::try_from(self.sequence_length)
            .ok()
            .and_then(|len| self.alphabet_size.checked_pow(len))
            .ok_or_else(too_big)?;
        if count > self.response_cap {
            return Err(too_big());
        }
        if count < 2 {
            return Err(Error::Validation(
                "sequence task must enumerate at least 2 responses".into(),
            ));
        }
        Ok(count)
    }

    /// Tokens of response `index`, most significant first.
    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut tokens = vec![0; self.sequence_length];
        for t in tokens.iter_mut().rev() {
            *t = index % self.alphabet_size;
            index /= self.alphabet_size;
        }
        tokens
    }

    pub fn compile(&self) -> Result<RewardModel> {
        if self.targets.is_empty() {
            return Err(Error::Validation("sequence task needs at least one target".into()));
        }
        let n = self.response_count()?;
        let sums: Vec<usize> = (0..n).map(|i| self.decode(i).iter().sum()).collect();
        let table = self
            .targets
            .iter()
            .flat_map(|&t| sums.iter().map(move |&s| if s == t { 1.0 } else { 0.0 }))
            .collect();
        RewardModel::new(self.targets.len(), n, table)
    }
}
