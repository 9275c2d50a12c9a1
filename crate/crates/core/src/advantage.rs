//! GRPO advantages: rewards whitened by the mean and smoothed standard
//! deviation of the sampling policy.
//!
//! Exact mode integrates over the response grid under a policy `alpha`;
//! empirical mode standardizes a sampled group. In both, the smoothing constant
//! sits under the square root: `sigma_eps = sqrt(var + var_epsilon)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::reward::RewardModel;

/// Tolerance used to call a non-binary reward group constant.
pub const ZERO_VARIANCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub mean: f64,
    pub std: f64,
    /// `sqrt(std^2 + var_epsilon)`
    pub smoothed_std: f64,
    pub var_epsilon: f64,
}

impl RewardStats {
    fn from_moments(mean: f64, variance: f64, var_epsilon: f64) -> Self {
        let variance = variance.max(0.0);
        Self {
            mean,
            std: variance.sqrt(),
            smoothed_std: (variance + var_epsilon).sqrt(),
            var_epsilon,
        }
    }

    /// Whitened reward; zero whenever the numerator is zero.
    pub fn whiten(&self, reward: f64) -> f64 {
        let centered = reward - self.mean;
        if centered == 0.0 {
            0.0
        } else {
            centered / self.smoothed_std
        }
    }
}

/// Divisor used for the group standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdDivisor {
    /// Divide by `G`; matches the exact-statistics limit.
    #[default]
    Population,
    /// Divide by `G - 1`.
    Sample,
}

fn check_epsilon(var_epsilon: f64) -> Result<()> {
    if !(var_epsilon >= 0.0) || !var_epsilon.is_finite() {
        return Err(Error::Validation(format!(
            "var_epsilon must be >= 0, got {var_epsilon}"
        )));
    }
    Ok(())
}

/// `true` when all values are equal: exactly for {0,1} values, within
/// [`ZERO_VARIANCE_TOL`] otherwise.
fn all_equal<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> bool {
    let binary = values.clone().all(|r| *r == 0.0 || *r == 1.0);
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(*r), hi.max(*r))
    });
    if lo > hi {
        return true;
    }
    if binary {
        lo == hi
    } else {
        hi - lo <= ZERO_VARIANCE_TOL
    }
}

/// Mean and population standard deviation of `r(x, .)` under `alpha(.|x)`.
///
/// If the reward is constant on the support of `alpha(.|x)` the statistics are
/// exactly `(c, 0)`; no rounding residue leaks into `std`.
pub fn exact_stats(alpha: &Policy, reward: &RewardModel, prompt: usize, var_epsilon: f64) -> Result<RewardStats> {
    check_epsilon(var_epsilon)?;
    reward.check_policy(alpha)?;
    let probs = alpha.row_distribution(prompt)?;
    Ok(weighted_stats(probs, reward.row(prompt), var_epsilon))
}

/// Mean and population standard deviation of `rewards` under `probs`, with
/// exact `(c, 0)` when the rewards are constant on the support.
pub fn weighted_stats(probs: &[f64], rewards: &[f64], var_epsilon: f64) -> RewardStats {
    let support = probs.iter().zip(rewards).filter(|(p, _)| **p > 0.0).map(|(_, r)| r);
    if all_equal(support.clone()) {
        let c = support.clone().next().copied().unwrap_or(0.0);
        return RewardStats::from_moments(c, 0.0, var_epsilon);
    }
    let mean: f64 = probs.iter().zip(rewards).map(|(p, r)| p * r).sum();
    let variance: f64 = probs
        .iter()
        .zip(rewards)
        .map(|(p, r)| p * (r - mean) * (r - mean))
        .sum();
    RewardStats::from_moments(mean, variance, var_epsilon)
}

/// Exact advantages `A_alpha(x, y)` on the whole grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactAdvantage {
    responses: usize,
    values: Vec<f64>,
    stats: Vec<RewardStats>,
}

impl ExactAdvantage {
    pub fn row(&self, prompt: usize) -> &[f64] {
        &self.values[prompt * self.responses..(prompt + 1) * self.responses]
    }

    pub fn get(&self, prompt: usize, response: usize) -> f64 {
        self.values[prompt * self.responses + response]
    }

    pub fn stats(&self, prompt: usize) -> &RewardStats {
        &self.stats[prompt]
    }

    pub fn prompt_count(&self) -> usize {
        self.stats.len()
    }

    pub fn response_count(&self) -> usize {
        self.responses
    }
}

/// Advantages of one sampled group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantage {
    pub prompt: usize,
    pub values: Vec<f64>,
    pub stats: RewardStats,
}

impl GroupAdvantage {
    pub fn mean_abs(&self) -> f64 {
        self.values.iter().map(|a| a.abs()).sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvantageMode {
    Exact,
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdvantageField {
    Exact(ExactAdvantage),
    Empirical(GroupAdvantage),
}

impl AdvantageField {
    pub fn mode(&self) -> AdvantageMode {
        match self {
            AdvantageField::Exact(_) => AdvantageMode::Exact,
            AdvantageField::Empirical(_) => AdvantageMode::Empirical,
        }
    }
}

/// `A_alpha(x, y) = (r(x, y) - mu_alpha(x)) / sigma_alpha_eps(x)` for all
/// `(x, y)`.
pub fn exact_advantage(alpha: &Policy, reward: &RewardModel, var_epsilon: f64) -> Result<ExactAdvantage> {
    let responses = reward.response_count();
    let mut values = Vec::with_capacity(reward.table().len());
    let mut stats = Vec::with_capacity(reward.prompt_count());
    for x in 0..reward.prompt_count() {
        let s = exact_stats(alpha, reward, x, var_epsilon)?;
        if s.smoothed_std == 0.0 {
            return Err(Error::DivisionHazard { prompt: x });
        }
        values.extend(reward.row(x).iter().map(|r| s.whiten(*r)));
        stats.push(s);
    }
    Ok(ExactAdvantage {
        responses,
        values,
        stats,
    })
}

/// `G` responses for one prompt with their rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSampleBatch {
    pub prompt: usize,
    pub responses: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Version counter of the policy snapshot that produced the samples.
    pub sampler_version: u64,
}

impl GroupSampleBatch {
    /// Looks the rewards up in `reward`.
    pub fn new(prompt: usize, responses: Vec<usize>, reward: &RewardModel, sampler_version: u64) -> Result<Self> {
        if prompt >= reward.prompt_count() {
            return Err(Error::IndexOutOfRange {
                what: "prompt",
                index: prompt,
                len: reward.prompt_count(),
            });
        }
        if responses.len() < 2 {
            return Err(Error::Config(format!(
                "group needs at least 2 responses, got {}",
                responses.len()
            )));
        }
        if let Some(&y) = responses.iter().find(|&&y| y >= reward.response_count()) {
            return Err(Error::IndexOutOfRange {
                what: "response",
                index: y,
                len: reward.response_count(),
            });
        }
        let rewards = responses.iter().map(|&y| reward.get(prompt, y)).collect();
        Ok(Self {
            prompt,
            responses,
            rewards,
            sampler_version,
        })
    }

    pub fn group_size(&self) -> usize {
        self.rewards.len()
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

/// Group statistics of a reward list.
pub fn group_stats(rewards: &[f64], var_epsilon: f64, divisor: StdDivisor) -> RewardStats {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    if all_equal(rewards.iter()) {
        return RewardStats::from_moments(rewards.first().copied().unwrap_or(mean), 0.0, var_epsilon);
    }
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = match divisor {
        StdDivisor::Population => g,
        StdDivisor::Sample => g - 1.0,
    };
    RewardStats::from_moments(mean, ss / denom, var_epsilon)
}

/// `A_hat(x, y_i) = (r_i - mean) / sqrt(std^2 + var_epsilon)` over the group.
pub fn group_advantage(batch: &GroupSampleBatch, var_epsilon: f64, divisor: StdDivisor) -> Result<GroupAdvantage> {
    check_epsilon(var_epsilon)?;
    if batch.group_size() < 2 {
        return Err(Error::Config("group needs at least 2 responses".into()));
    }
    let stats = group_stats(&batch.rewards, var_epsilon, divisor);
    Ok(GroupAdvantage {
        prompt: batch.prompt,
        values: batch.rewards.iter().map(|r| stats.whiten(*r)).collect(),
        stats,
    })
}

/// All group rewards equal (fully correct or fully wrong group).
pub fn is_zero_variance(batch: &GroupSampleBatch) -> bool {
    all_equal(batch.rewards.iter())
}
