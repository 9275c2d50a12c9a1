//! Policy-improvement lower bounds.
//!
//! For rewards in `[0, 1]`, any policies `pi`, `pi_k` and sampler `alpha`,
//! and every prompt `x`:
//!
//! ```text
//! J(pi|x) - J(pi_k|x) >= L_alpha(pi|x)
//!                        - 2 (1 - s)/s * TV(pi, alpha)
//!                        - 2 TV(pi_k, alpha),          s = sigma_{alpha,eps}(x)
//! ```
//!
//! Integrating over prompts with Cauchy-Schwarz gives the aggregate form with
//! `M = sqrt(E_x ((1 - s)/s)^2)`. This module evaluates every term exactly,
//! reports the slack `lhs - rhs`, and searches random instances for
//! violations.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{exact_stats, weighted_stats, RewardStats};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::policy::{kl_divergence, tv_distance, Policy, PromptSpace, RngStream};
use crate::reward::RewardModel;

/// Floating-point allowance on the slack of a valid instance.
pub const SLACK_TOLERANCE: f64 = 1e-9;

/// Deliberate corruptions of the bound, used to check that the search harness
/// detects violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum BoundMutation {
    #[default]
    None,
    /// Coefficient 1 instead of 2 on both TV terms. Still a valid bound for
    /// rewards of range 1, so no violations are expected.
    DropTwo,
    /// Coefficient 1/2 on both TV terms.
    HalveCoefficients,
    /// Removes the variance-factor TV term.
    DropFactorTerm,
}

impl BoundMutation {
    /// Coefficients on the `factor * TV(pi, alpha)` and `TV(pi_k, alpha)` terms.
    fn coefficients(self) -> (f64, f64) {
        match self {
            BoundMutation::None => (2.0, 2.0),
            BoundMutation::DropTwo => (1.0, 1.0),
            BoundMutation::HalveCoefficients => (0.5, 0.5),
            BoundMutation::DropFactorTerm => (0.0, 2.0),
        }
    }
}

/// All terms of the per-prompt bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptBound {
    pub j_pi: f64,
    pub j_pi_k: f64,
    pub surrogate: f64,
    /// `(1 - sigma_eps) / sigma_eps`
    pub factor: f64,
    pub tv_pi_alpha: f64,
    pub tv_pik_alpha: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

/// Prompt-integrated bound and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratedBound {
    pub lhs: f64,
    pub expected_surrogate: f64,
    /// `M_{alpha,r,eps}`
    pub m_constant: f64,
    /// `sqrt(E_x TV^2(pi, alpha))`
    pub rms_tv_pi_alpha: f64,
    pub mean_tv_pik_alpha: f64,
    pub rhs: f64,
    pub slack: f64,
    /// `E_x KL(pi || alpha)`; infinite when `pi` leaves the support of `alpha`.
    pub kl_budget: f64,
    /// `max_x TV(pi_k, alpha)`
    pub vicinity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub per_prompt: Vec<PromptBound>,
    pub integrated: IntegratedBound,
}

impl BoundReport {
    pub fn min_slack(&self) -> f64 {
        self.per_prompt.iter().map(|b| b.slack).fold(f64::INFINITY, f64::min)
    }

    /// Index and slack of the most violated prompt.
    pub fn worst_prompt(&self) -> (usize, f64) {
        self.per_prompt
            .iter()
            .enumerate()
            .map(|(x, b)| (x, b.slack))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }
}

fn check_epsilon(var_epsilon: f64) -> Result<()> {
    if !(0.0..1.0).contains(&var_epsilon) {
        return Err(Error::Validation(format!(
            "var_epsilon must lie in [0, 1), got {var_epsilon}"
        )));
    }
    Ok(())
}

fn check_triple(pi: &Policy, pi_k: &Policy, alpha: &Policy, responses: usize, prompts: usize) -> Result<()> {
    pi.same_shape(pi_k)?;
    pi.same_shape(alpha)?;
    if pi.shape() != (prompts, responses) {
        return Err(Error::ShapeMismatch(format!(
            "policies have shape {:?}, reward has {:?}",
            pi.shape(),
            (prompts, responses)
        )));
    }
    Ok(())
}

fn variance_factor(stats: &RewardStats, prompt: usize) -> Result<f64> {
    if stats.smoothed_std == 0.0 {
        return Err(Error::DivisionHazard { prompt });
    }
    let f = (1.0 - stats.smoothed_std) / stats.smoothed_std;
    if f < 0.0 {
        return Err(Error::Validation(format!(
            "sigma_eps = {} > 1 at prompt {prompt}; normalize the reward or lower var_epsilon",
            stats.smoothed_std
        )));
    }
    Ok(f)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Importance-sampled surrogate from a reward row and whitening statistics.
fn importance_surrogate(pi: &[f64], alpha: &[f64], rewards: &[f64], stats: &RewardStats, prompt: usize) -> Result<f64> {
    let mut total = 0.0;
    for y in 0..pi.len() {
        if alpha[y] == 0.0 {
            if pi[y] > 0.0 {
                return Err(Error::Domain(format!(
                    "pi({y}|{prompt}) > 0 outside the support of alpha"
                )));
            }
            continue;
        }
        total += alpha[y] * (pi[y] / alpha[y]) * stats.whiten(rewards[y]);
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn prompt_bound(
    pi: &[f64],
    pi_k: &[f64],
    alpha: &[f64],
    rewards: &[f64],
    var_epsilon: f64,
    reward_sup: f64,
    mutation: BoundMutation,
    prompt: usize,
) -> Result<PromptBound> {
    let stats = weighted_stats(alpha, rewards, var_epsilon);
    let factor = variance_factor(&stats, prompt)?;
    let surrogate = importance_surrogate(pi, alpha, rewards, &stats, prompt)?;
    let tv_pi_alpha = tv_distance(pi, alpha)?;
    let tv_pik_alpha = tv_distance(pi_k, alpha)?;
    let (c1, c2) = mutation.coefficients();
    let j_pi = dot(pi, rewards);
    let j_pi_k = dot(pi_k, rewards);
    let lhs = j_pi - j_pi_k;
    let rhs = surrogate - c1 * factor * reward_sup * tv_pi_alpha - c2 * reward_sup * tv_pik_alpha;
    Ok(PromptBound {
        j_pi,
        j_pi_k,
        surrogate,
        factor,
        tv_pi_alpha,
        tv_pik_alpha,
        lhs,
        rhs,
        slack: lhs - rhs,
    })
}

fn integrate(
    per_prompt: &[PromptBound],
    pi: &Policy,
    alpha: &Policy,
    weights: &PromptSpace,
    reward_sup: f64,
    mutation: BoundMutation,
) -> IntegratedBound {
    let e = |f: &dyn Fn(&PromptBound) -> f64| -> f64 {
        per_prompt.iter().zip(weights.weights()).map(|(b, w)| w * f(b)).sum()
    };
    let lhs = e(&|b| b.j_pi) - e(&|b| b.j_pi_k);
    let expected_surrogate = e(&|b| b.surrogate);
    let m_constant = e(&|b| b.factor * b.factor).sqrt();
    let rms_tv_pi_alpha = e(&|b| b.tv_pi_alpha * b.tv_pi_alpha).sqrt();
    let mean_tv_pik_alpha = e(&|b| b.tv_pik_alpha);
    let (c1, c2) = mutation.coefficients();
    let rhs = expected_surrogate - c1 * reward_sup * m_constant * rms_tv_pi_alpha - c2 * reward_sup * mean_tv_pik_alpha;
    let kl_budget = (0..pi.prompt_count())
        .map(|x| kl_divergence(pi.probs(x), alpha.probs(x)).unwrap_or(f64::INFINITY))
        .zip(weights.weights())
        .map(|(kl, w)| if *w == 0.0 { 0.0 } else { w * kl })
        .sum();
    let vicinity = per_prompt.iter().map(|b| b.tv_pik_alpha).fold(0.0, f64::max);
    IntegratedBound {
        lhs,
        expected_surrogate,
        m_constant,
        rms_tv_pi_alpha,
        mean_tv_pik_alpha,
        rhs,
        slack: lhs - rhs,
        kl_budget,
        vicinity,
    }
}

/// Full bound report with explicit prompt weights and options.
pub fn bound_report_with(
    pi: &Policy,
    pi_k: &Policy,
    alpha: &Policy,
    reward: &RewardModel,
    var_epsilon: f64,
    weights: &PromptSpace,
    mutation: BoundMutation,
) -> Result<BoundReport> {
    check_epsilon(var_epsilon)?;
    check_triple(pi, pi_k, alpha, reward.response_count(), reward.prompt_count())?;
    if weights.prompt_count() != reward.prompt_count() {
        return Err(Error::ShapeMismatch("prompt weights do not match the reward".into()));
    }
    let per_prompt = (0..reward.prompt_count())
        .map(|x| {
            prompt_bound(
                pi.probs(x),
                pi_k.probs(x),
                alpha.probs(x),
                reward.row(x),
                var_epsilon,
                1.0,
                mutation,
                x,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let integrated = integrate(&per_prompt, pi, alpha, weights, 1.0, mutation);
    Ok(BoundReport { per_prompt, integrated })
}

/// Off-policy bound for the triple `(pi, pi_k, alpha)`; the integrated part
/// uses uniform prompt weights.
pub fn theorem1_report(
    pi: &Policy,
    pi_k: &Policy,
    alpha: &Policy,
    reward: &RewardModel,
    var_epsilon: f64,
) -> Result<BoundReport> {
    bound_report_with(
        pi,
        pi_k,
        alpha,
        reward,
        var_epsilon,
        &PromptSpace::uniform(reward.prompt_count()),
        BoundMutation::None,
    )
}

/// Prompt-integrated bound under `weights`.
pub fn integrated_report(
    pi: &Policy,
    pi_k: &Policy,
    alpha: &Policy,
    reward: &RewardModel,
    var_epsilon: f64,
    weights: &PromptSpace,
) -> Result<BoundReport> {
    bound_report_with(pi, pi_k, alpha, reward, var_epsilon, weights, BoundMutation::None)
}

/// Bound on a raw nonnegative reward table, carrying `||r||_inf` explicitly in
/// front of both TV terms. Requires `sigma_eps <= 1` at every prompt.
pub fn theorem1_report_unnormalized(
    pi: &Policy,
    pi_k: &Policy,
    alpha: &Policy,
    raw_rewards: &[f64],
    var_epsilon: f64,
) -> Result<BoundReport> {
    check_epsilon(var_epsilon)?;
    let (prompts, responses) = pi.shape();
    if raw_rewards.len() != prompts * responses {
        return Err(Error::ShapeMismatch(
            "raw reward table does not match the policies".into(),
        ));
    }
    check_triple(pi, pi_k, alpha, responses, prompts)?;
    if raw_rewards.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(Error::Validation("raw rewards must be finite and nonnegative".into()));
    }
    let sup = raw_rewards.iter().copied().fold(0.0, f64::max);
    let per_prompt = (0..prompts)
        .map(|x| {
            prompt_bound(
                pi.probs(x),
                pi_k.probs(x),
                alpha.probs(x),
                &raw_rewards[x * responses..(x + 1) * responses],
                var_epsilon,
                sup,
                BoundMutation::None,
                x,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let integrated = integrate(
        &per_prompt,
        pi,
        alpha,
        &PromptSpace::uniform(prompts),
        sup,
        BoundMutation::None,
    );
    Ok(BoundReport { per_prompt, integrated })
}

/// On-policy bound (`alpha = pi_k`), evaluated on its own code path:
/// `J(pi) - J(pi_k) >= L_{pi_k}(pi) - 2 (1 - s)/s TV(pi, pi_k)`.
pub fn corollary_report(pi: &Policy, pi_k: &Policy, reward: &RewardModel, var_epsilon: f64) -> Result<BoundReport> {
    check_epsilon(var_epsilon)?;
    check_triple(pi, pi_k, pi_k, reward.response_count(), reward.prompt_count())?;
    let mut per_prompt = Vec::with_capacity(reward.prompt_count());
    for x in 0..reward.prompt_count() {
        let stats = exact_stats(pi_k, reward, x, var_epsilon)?;
        let factor = variance_factor(&stats, x)?;
        let (p, q, r) = (pi.probs(x), pi_k.probs(x), reward.row(x));
        let surrogate = importance_surrogate(p, q, r, &stats, x)?;
        let tv = tv_distance(p, q)?;
        let j_pi = dot(p, r);
        let j_pi_k = dot(q, r);
        let rhs = surrogate - 2.0 * factor * tv;
        per_prompt.push(PromptBound {
            j_pi,
            j_pi_k,
            surrogate,
            factor,
            tv_pi_alpha: tv,
            tv_pik_alpha: 0.0,
            lhs: j_pi - j_pi_k,
            rhs,
            slack: (j_pi - j_pi_k) - rhs,
        });
    }
    let weights = PromptSpace::uniform(reward.prompt_count());
    let integrated = integrate(&per_prompt, pi, pi_k, &weights, 1.0, BoundMutation::None);
    Ok(BoundReport { per_prompt, integrated })
}

/// `M_{alpha,r,eps} = sqrt(E_x ((1 - sigma_eps)/sigma_eps)^2)`.
pub fn m_constant(alpha: &Policy, reward: &RewardModel, var_epsilon: f64, weights: &PromptSpace) -> Result<f64> {
    check_epsilon(var_epsilon)?;
    let mut acc = 0.0;
    for x in 0..reward.prompt_count() {
        let f = variance_factor(&exact_stats(alpha, reward, x, var_epsilon)?, x)?;
        acc += weights.weights()[x] * f * f;
    }
    Ok(acc.sqrt())
}

/// Variance factor of a Bernoulli(p) reward:
/// `(1 - sqrt(p(1-p) + eps)) / sqrt(p(1-p) + eps)`.
pub fn bernoulli_factor(p: f64, var_epsilon: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("p = {p} is outside [0, 1]")));
    }
    if !(var_epsilon >= 0.0) {
        return Err(Error::Validation(format!(
            "var_epsilon must be >= 0, got {var_epsilon}"
        )));
    }
    let s = (p * (1.0 - p) + var_epsilon).sqrt();
    if s == 0.0 {
        return Err(Error::Domain(format!(
            "factor is infinite at p = {p} with var_epsilon = 0"
        )));
    }
    Ok((1.0 - s) / s)
}

/// Factor curve for one epsilon; `None` where the factor is infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCurve {
    pub var_epsilon: f64,
    pub points: Vec<(f64, Option<f64>)>,
}

/// Epsilons of the default variance-factor sweep.
pub const FACTOR_SWEEP_EPSILONS: [f64; 4] = [0.0, 1e-6, 1e-4, 1e-2];

/// Sweeps `p` over `[0, 1]` in `steps` equal increments for each epsilon.
pub fn variance_factor_curves(epsilons: &[f64], steps: usize) -> Result<Vec<FactorCurve>> {
    epsilons
        .iter()
        .map(|&eps| {
            let points = (0..=steps)
                .map(|i| {
                    let p = i as f64 / steps as f64;
                    match bernoulli_factor(p, eps) {
                        Ok(f) => Ok((p, Some(f))),
                        Err(Error::Domain(_)) => Ok((p, None)),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FactorCurve {
                var_epsilon: eps,
                points,
            })
        })
        .collect()
}

/// A self-contained bound instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInstance {
    pub pi: Policy,
    pub pi_k: Policy,
    pub alpha: Policy,
    pub reward: RewardModel,
    pub var_epsilon: f64,
}

impl BoundInstance {
    pub fn report(&self, mutation: BoundMutation) -> Result<BoundReport> {
        bound_report_with(
            &self.pi,
            &self.pi_k,
            &self.alpha,
            &self.reward,
            self.var_epsilon,
            &PromptSpace::uniform(self.reward.prompt_count()),
            mutation,
        )
    }

    /// Copy restricted to one prompt.
    fn single_prompt(&self, x: usize) -> Result<BoundInstance> {
        let row = |p: &Policy| Policy::new(1, p.response_count(), p.logits_row(x).to_vec());
        Ok(BoundInstance {
            pi: row(&self.pi)?,
            pi_k: row(&self.pi_k)?,
            alpha: row(&self.alpha)?,
            reward: RewardModel::new(1, self.reward.response_count(), self.reward.row(x).to_vec())?,
            var_epsilon: self.var_epsilon,
        })
    }
}

/// Produces instance `index` deterministically.
pub trait InstanceGenerator: Sync {
    fn generate(&self, index: u64) -> BoundInstance;
}

/// Random normalized-reward triples, mixing generic draws with the structured
/// cases the bound is tight or degenerate on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomInstances {
    pub prompts: usize,
    pub responses: usize,
    pub var_epsilon: f64,
    pub logit_scale: f64,
    pub binary: bool,
    pub seed: u64,
}

impl RandomInstances {
    pub fn new(prompts: usize, responses: usize, var_epsilon: f64, seed: u64) -> Self {
        Self {
            prompts,
            responses,
            var_epsilon,
            logit_scale: 3.0,
            binary: true,
            seed,
        }
    }
}

impl InstanceGenerator for RandomInstances {
    fn generate(&self, index: u64) -> BoundInstance {
        let mut rng = RngStream::new(self.seed, index).rng();
        let n = self.prompts * self.responses;
        let scale = if rng.random_bool(0.2) {
            4.0 * self.logit_scale
        } else {
            self.logit_scale
        };
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
        };
        let base = draw(&mut rng);
        let nudge = |rng: &mut rand_chacha::ChaCha8Rng, v: &[f64]| -> Vec<f64> {
            v.iter().map(|l| l + rng.random_range(-0.3..0.3)).collect()
        };
        let (pi, pi_k, alpha) = match rng.random_range(0..4) {
            0 => (draw(&mut rng), draw(&mut rng), base),
            1 => (draw(&mut rng), base.clone(), base),
            2 => {
                let pi = nudge(&mut rng, &base);
                (pi, base, draw(&mut rng))
            }
            _ => {
                let pi_k = nudge(&mut rng, &base);
                let pi = nudge(&mut rng, &base);
                (pi, pi_k, base)
            }
        };
        let mut table: Vec<f64> = (0..n)
            .map(|_| {
                if self.binary {
                    rng.random_range(0..2) as f64
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        for x in 0..self.prompts {
            if rng.random_bool(0.1) {
                let c = if self.binary {
                    rng.random_range(0..2) as f64
                } else {
                    rng.random::<f64>()
                };
                table[x * self.responses..(x + 1) * self.responses].fill(c);
            }
        }
        let mk = |logits: Vec<f64>| Policy::new(self.prompts, self.responses, logits).expect("finite logits");
        BoundInstance {
            pi: mk(pi),
            pi_k: mk(pi_k),
            alpha: mk(alpha),
            reward: RewardModel::new(self.prompts, self.responses, table).expect("rewards in [0, 1]"),
            var_epsilon: self.var_epsilon,
        }
    }
}

/// A violating instance, its report, and a greedily shrunk reproduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub index: u64,
    pub instance: BoundInstance,
    pub report: BoundReport,
    pub shrunk: BoundInstance,
    pub shrunk_slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSummary {
    pub instances: u64,
    pub min_slack: f64,
    pub counterexamples: Vec<Counterexample>,
}

/// Evaluates `count` generated instances and collects those whose worst
/// per-prompt slack is below `-tolerance`.
pub fn counterexample_search(
    generator: &dyn InstanceGenerator,
    count: u64,
    tolerance: f64,
    mutation: BoundMutation,
    exec: Execution,
) -> Result<SearchSummary> {
    if !(tolerance >= 0.0) {
        return Err(Error::Validation(format!("tolerance must be >= 0, got {tolerance}")));
    }
    let indices: Vec<u64> = (0..count).collect();
    let evaluated = exec.map_slice(&indices, |&i| -> Result<Option<Counterexample>> {
        let instance = generator.generate(i);
        let report = instance.report(mutation)?;
        if report.min_slack() >= -tolerance {
            return Ok(None);
        }
        let (shrunk, shrunk_slack) = shrink(&instance, &report, tolerance, mutation)?;
        Ok(Some(Counterexample {
            index: i,
            instance,
            report,
            shrunk,
            shrunk_slack,
        }))
    });
    // minimum slack needs every report, so recompute it from a second cheap pass
    let slacks = exec.map_slice(&indices, |&i| {
        generator.generate(i).report(mutation).map(|r| r.min_slack())
    });
    let mut min_slack = f64::INFINITY;
    for s in slacks {
        min_slack = min_slack.min(s?);
    }
    let mut counterexamples = Vec::new();
    for e in evaluated {
        if let Some(c) = e? {
            counterexamples.push(c);
        }
    }
    Ok(SearchSummary {
        instances: count,
        min_slack,
        counterexamples,
    })
}

fn violates(instance: &BoundInstance, tolerance: f64, mutation: BoundMutation) -> Option<f64> {
    let s = instance.report(mutation).ok()?.min_slack();
    (s < -tolerance).then_some(s)
}

/// Greedy coordinate shrinking: keep the worst prompt only, then pull logits
/// towards 0 and snap rewards to {0, 1} while the violation persists.
fn shrink(
    instance: &BoundInstance,
    report: &BoundReport,
    tolerance: f64,
    mutation: BoundMutation,
) -> Result<(BoundInstance, f64)> {
    let (worst, _) = report.worst_prompt();
    let mut current = instance.single_prompt(worst)?;
    let mut slack = match violates(&current, tolerance, mutation) {
        Some(s) => s,
        None => return Ok((instance.clone(), report.min_slack())),
    };
    for _ in 0..64 {
        let mut changed = false;
        for which in 0..3 {
            let len = current.pi.logits().len();
            for c in 0..len {
                let policy = match which {
                    0 => &current.pi,
                    1 => &current.pi_k,
                    _ => &current.alpha,
                };
                let v = policy.logits()[c];
                for cand in [0.0, v.round(), v / 2.0] {
                    if cand == v {
                        continue;
                    }
                    let mut logits = policy.logits().to_vec();
                    logits[c] = cand;
                    let mut trial = current.clone();
                    let replaced = Policy::new(1, policy.response_count(), logits)?;
                    match which {
                        0 => trial.pi = replaced,
                        1 => trial.pi_k = replaced,
                        _ => trial.alpha = replaced,
                    }
                    if let Some(s) = violates(&trial, tolerance, mutation) {
                        current = trial;
                        slack = s;
                        changed = true;
                        break;
                    }
                }
            }
        }
        for y in 0..current.reward.response_count() {
            let v = current.reward.table()[y];
            for cand in [0.0, 1.0] {
                if cand == v {
                    continue;
                }
                let mut table = current.reward.table().to_vec();
                table[y] = cand;
                let mut trial = current.clone();
                trial.reward = RewardModel::new(1, table.len(), table)?;
                if let Some(s) = violates(&trial, tolerance, mutation) {
                    current = trial;
                    slack = s;
                    changed = true;
                    break;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok((current, slack))
}

pub const REPLAY_SCHEMA: &str = "grpo-core/bound-counterexample";
pub const REPLAY_VERSION: u32 = 1;

/// Replay file for one counterexample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayFile {
    pub schema: String,
    pub version: u32,
    pub tolerance: f64,
    pub mutation: BoundMutation,
    pub index: u64,
    pub slack: f64,
    pub instance: BoundInstance,
    pub shrunk_slack: f64,
    pub shrunk: BoundInstance,
}

impl ReplayFile {
    pub fn new(c: &Counterexample, tolerance: f64, mutation: BoundMutation) -> Self {
        Self {
            schema: REPLAY_SCHEMA.into(),
            version: REPLAY_VERSION,
            tolerance,
            mutation,
            index: c.index,
            slack: c.report.min_slack(),
            instance: c.instance.clone(),
            shrunk_slack: c.shrunk_slack,
            shrunk: c.shrunk.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ReplayFile =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if file.schema != REPLAY_SCHEMA || file.version != REPLAY_VERSION {
            return Err(Error::Format(format!(
                "unsupported replay file {} v{} (expected {REPLAY_SCHEMA} v{REPLAY_VERSION})",
                file.schema, file.version
            )));
        }
        Ok(file)
    }

    /// Re-evaluates the recorded instance.
    pub fn replay(&self) -> Result<BoundReport> {
        self.instance.report(self.mutation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::make_bernoulli_env;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_policy(rng: &mut impl Rng, prompts: usize, responses: usize) -> Policy {
        Policy::new(
            prompts,
            responses,
            (0..prompts * responses).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_policies_give_zero_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, _) = make_bernoulli_env(&[0.3, 0.8], 6, RngStream::new(0, 0)).unwrap();
        let p = random_policy(&mut rng, 2, 6);
        let rep = theorem1_report(&p, &p, &p, &r, 1e-4).unwrap();
        for b in &rep.per_prompt {
            assert_eq!(b.lhs, 0.0);
            assert!(b.rhs.abs() < 1e-15 && b.slack.abs() < 1e-15);
        }
        let int = integrated_report(&p, &p, &p, &r, 1e-4, &PromptSpace::uniform(2))
            .unwrap()
            .integrated;
        assert_eq!(int.lhs, 0.0);
        assert!(int.rhs.abs() < 1e-15);
    }

    #[test]
    fn on_policy_hand_example() {
        let (r, pk) = make_bernoulli_env(&[0.5], 2, RngStream::new(0, 0)).unwrap();
        let right = r.row(0).iter().position(|v| *v == 1.0).unwrap();
        let mut logits = vec![f64::NEG_INFINITY; 2];
        logits[right] = 0.0;
        let pi = Policy::new(1, 2, logits).unwrap();
        let b = corollary_report(&pi, &pk, &r, 0.0).unwrap().per_prompt[0];
        assert!((b.lhs - 0.5).abs() < 1e-12);
        assert!((b.surrogate - 1.0).abs() < 1e-12);
        assert!((b.tv_pi_alpha - 0.5).abs() < 1e-12);
        assert!((b.factor - 1.0).abs() < 1e-12);
        assert!(b.rhs.abs() < 1e-12);
        assert!((b.slack - 0.5).abs() < 1e-12);
        assert!(corollary_report(&pi, &pk, &r, 1.5).is_err());
    }

    #[test]
    fn on_policy_form_matches_general_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = RandomInstances::new(3, 5, 1e-4, 17);
        for i in 0..300 {
            let inst = g.generate(i);
            let pi = random_policy(&mut rng, 3, 5);
            let a = theorem1_report(&pi, &inst.pi_k, &inst.pi_k, &inst.reward, 1e-4).unwrap();
            let b = corollary_report(&pi, &inst.pi_k, &inst.reward, 1e-4).unwrap();
            for (x, y) in a.per_prompt.iter().zip(&b.per_prompt) {
                assert_eq!(x.tv_pik_alpha, 0.0);
                assert!((x.rhs - y.rhs).abs() <= 1e-12);
                assert!(y.slack >= -SLACK_TOLERANCE);
            }
        }
    }

    #[test]
    fn two_prompt_m_constant() {
        let (r, p) = make_bernoulli_env(&[0.5, 0.5], 4, RngStream::new(0, 0)).unwrap();
        assert!((m_constant(&p, &r, 0.0, &PromptSpace::uniform(2)).unwrap() - 1.0).abs() < 1e-12);
        let rep = integrated_report(&p, &p, &p, &r, 0.0, &PromptSpace::uniform(2)).unwrap();
        assert!((rep.integrated.m_constant - 1.0).abs() < 1e-12);
    }

    #[test]
    fn integrated_is_weaker_than_averaged_per_prompt() {
        let g = RandomInstances::new(4, 6, 1e-4, 99);
        let weights = PromptSpace::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        for i in 0..500 {
            let inst = g.generate(i);
            let rep = integrated_report(&inst.pi, &inst.pi_k, &inst.alpha, &inst.reward, 1e-4, &weights).unwrap();
            let averaged: f64 = rep
                .per_prompt
                .iter()
                .zip(weights.weights())
                .map(|(b, w)| w * b.rhs)
                .sum();
            assert!(rep.integrated.rhs <= averaged + 1e-12);
            assert!(rep.integrated.slack >= -SLACK_TOLERANCE);
            let direct = m_constant(&inst.alpha, &inst.reward, 1e-4, &weights).unwrap();
            let from_factors = rep
                .per_prompt
                .iter()
                .zip(weights.weights())
                .map(|(b, w)| w * b.factor * b.factor)
                .sum::<f64>()
                .sqrt();
            assert!((direct - from_factors).abs() <= 1e-12);
            assert!((rep.integrated.m_constant - direct).abs() <= 1e-12);
            // Pinsker chain for the KL diagnostic
            assert!(rep.integrated.rms_tv_pi_alpha <= (0.5 * rep.integrated.kl_budget).sqrt() + 1e-12);
        }
    }

    #[test]
    fn bernoulli_factor_examples() {
        assert_eq!(bernoulli_factor(0.5, 0.0).unwrap(), 1.0);
        assert!((bernoulli_factor(0.0, 1e-4).unwrap() - 99.0).abs() < 1e-12);
        assert!((bernoulli_factor(1.0, 1e-4).unwrap() - 99.0).abs() < 1e-12);
        assert!((bernoulli_factor(0.9, 0.0).unwrap() - 7.0 / 3.0).abs() < 1e-12);
        assert!(bernoulli_factor(0.0, 0.0).is_err());
        assert!(bernoulli_factor(1.1, 0.1).is_err());
    }

    #[test]
    fn bernoulli_factor_shape() {
        // dyadic grid: 1 - p is exact, so symmetry is exact
        for k in 0..=1024 {
            let p = k as f64 / 1024.0;
            for eps in [1e-6, 1e-4, 1e-2] {
                assert_eq!(
                    bernoulli_factor(p, eps).unwrap(),
                    bernoulli_factor(1.0 - p, eps).unwrap()
                );
                assert!(bernoulli_factor(p, eps).unwrap() >= bernoulli_factor(0.5, eps).unwrap());
                assert!(bernoulli_factor(p, eps * 2.0).unwrap() < bernoulli_factor(p, eps).unwrap());
            }
        }
    }

    #[test]
    fn unnormalized_form_coincides_when_sup_is_one() {
        let g = RandomInstances::new(2, 4, 1e-4, 5);
        for i in 0..100 {
            let inst = g.generate(i);
            if inst.reward.table().iter().all(|r| *r < 1.0) {
                continue;
            }
            let a = theorem1_report(&inst.pi, &inst.pi_k, &inst.alpha, &inst.reward, 1e-4).unwrap();
            let b = theorem1_report_unnormalized(&inst.pi, &inst.pi_k, &inst.alpha, inst.reward.table(), 1e-4).unwrap();
            assert_eq!(a, b);
        }
        // raw rewards of sup 1.5 still satisfy sigma_eps <= 1; the explicit-sup form holds
        let inst = g.generate(0);
        let raw: Vec<f64> = inst.reward.table().iter().map(|r| 1.5 * r).collect();
        if raw.iter().any(|r| *r > 0.0) {
            let rep = theorem1_report_unnormalized(&inst.pi, &inst.pi_k, &inst.alpha, &raw, 1e-4).unwrap();
            assert!(rep.min_slack() >= -SLACK_TOLERANCE);
        }
    }

    #[test]
    fn search_finds_nothing_on_the_true_bound() {
        let g = RandomInstances::new(4, 6, 1e-4, 3);
        let s = counterexample_search(&g, 2000, SLACK_TOLERANCE, BoundMutation::None, Execution::Parallel).unwrap();
        assert!(s.counterexamples.is_empty());
        assert!(s.min_slack >= -SLACK_TOLERANCE);
        let empty = counterexample_search(&g, 0, 0.0, BoundMutation::None, Execution::Sequential).unwrap();
        assert!(empty.counterexamples.is_empty());
        assert!(counterexample_search(&g, 1, -1.0, BoundMutation::None, Execution::Sequential).is_err());
    }

    #[test]
    fn search_catches_corrupted_bounds() {
        let g = RandomInstances::new(4, 6, 1e-4, 3);
        for m in [BoundMutation::HalveCoefficients, BoundMutation::DropFactorTerm] {
            let s = counterexample_search(&g, 500, SLACK_TOLERANCE, m, Execution::Parallel).unwrap();
            assert!(!s.counterexamples.is_empty(), "{m:?} not caught");
            for c in &s.counterexamples {
                assert_eq!(c.shrunk.pi.prompt_count(), 1);
                assert!(c.shrunk_slack < -SLACK_TOLERANCE);
                assert!(violates(&c.shrunk, SLACK_TOLERANCE, m).is_some());
            }
        }
        // coefficient 1 is still a valid bound for rewards of range 1
        let s = counterexample_search(&g, 2000, SLACK_TOLERANCE, BoundMutation::DropTwo, Execution::Parallel).unwrap();
        assert!(s.counterexamples.is_empty());
    }

    #[test]
    fn replay_file_round_trip() {
        let g = RandomInstances::new(2, 3, 1e-4, 8);
        let s = counterexample_search(
            &g,
            200,
            SLACK_TOLERANCE,
            BoundMutation::DropFactorTerm,
            Execution::Sequential,
        )
        .unwrap();
        let c = &s.counterexamples[0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cx.json");
        let file = ReplayFile::new(c, SLACK_TOLERANCE, BoundMutation::DropFactorTerm);
        file.write(&path).unwrap();
        let back = ReplayFile::read(&path).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.replay().unwrap(), c.report);

        let mut bad = file.clone();
        bad.version = 99;
        bad.write(&path).unwrap();
        assert!(ReplayFile::read(&path).is_err());
    }

    #[test]
    fn factor_curves_cover_the_grid() {
        let curves = variance_factor_curves(&FACTOR_SWEEP_EPSILONS, 200).unwrap();
        assert_eq!(curves.len(), 4);
        assert_eq!(curves[0].points.len(), 201);
        assert_eq!(curves[0].points[0].1, None);
        assert_eq!(curves[0].points[100], (0.5, Some(1.0)));
        assert!((curves[2].points[0].1.unwrap() - 99.0).abs() < 1e-12);
    }
}
