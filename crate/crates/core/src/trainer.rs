//! Iterative GRPO with verifiable rewards.
//!
//! The loop runs `S` stages of `M` iterations. At iteration `k` the served
//! policy `theta_old` is refreshed when `k mod v == 0`, `G` responses are
//! drawn from it for each prompt of the batch, group advantages are computed
//! once, and `i` ascent steps are taken on the clipped KL-regularized
//! objective with importance ratios `theta / theta_old`. The reference policy
//! is replaced by `theta` after the last iteration of every stage.
//!
//! All randomness is derived from `(seed, global iteration, slot, purpose)`,
//! so a run resumed from a checkpoint replays the remaining trace bit for bit.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::advantage::{group_advantage, GroupAdvantage, GroupSampleBatch, StdDivisor};
use crate::bounds::theorem1_report;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{MetricsRecord, METRICS_SCHEMA_VERSION};
use crate::policy::{kl_divergence, sample_group, sample_responses, tv_distance, Policy, PromptSpace, RngStream};
use crate::reward::{success_rates, RewardModel};
use crate::surrogate::{empirical_objective, ClipParams, RatioApproximation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Prompts drawn i.i.d. from the prompt distribution, with replacement.
    #[default]
    Iid,
    /// Consecutive prompts, cycling through the whole prompt set.
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Staleness/reuse regime implied by `(v, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `v = 1, i = 1`
    OnPolicy,
    /// `v = 1, i > 1`: one batch reused for `i` ascent steps.
    SampleReuse,
    /// `v > 1, i = 1`: fresh samples from a policy up to `v` iterations old.
    StaleSampler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub stages: usize,
    pub iterations_per_stage: usize,
    /// `v`
    pub server_update_period: usize,
    /// `i`
    pub sgd_iters_per_batch: usize,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub batch_mode: BatchMode,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_epsilon: f64,
    pub var_epsilon: f64,
    pub beta: f64,
    pub mask_zero_variance: bool,
    pub ratio_approximation: RatioApproximation,
    pub std_divisor: StdDivisor,
    pub seed: u64,
    /// Divides the logits of the served policy when sampling.
    pub temperature: f64,
    /// Evaluate the improvement bound every this many iterations; 0 disables.
    pub bound_probe_period: usize,
    pub record_wall_time: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            iterations_per_stage: 100,
            server_update_period: 1,
            sgd_iters_per_batch: 1,
            group_size: 16,
            batch_prompts: 16,
            batch_mode: BatchMode::Iid,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_epsilon: 0.2,
            var_epsilon: 1e-4,
            beta: 0.1,
            mask_zero_variance: false,
            ratio_approximation: RatioApproximation::UnitRatio,
            std_divisor: StdDivisor::Population,
            seed: 0,
            temperature: 1.0,
            bound_probe_period: 0,
            record_wall_time: false,
        }
    }
}

impl TrainerConfig {
    /// Hyperparameters of the GSM8K runs: `G = 16`, `beta = 0.1`,
    /// `lr = 5e-6`, sampling temperature 0.1, Adam.
    pub fn gsm8k_preset() -> Self {
        Self {
            group_size: 16,
            beta: 0.1,
            learning_rate: 5e-6,
            temperature: 0.1,
            optimizer: OptimizerKind::Adam,
            ..Self::default()
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.stages * self.iterations_per_stage
    }

    pub fn clip_params(&self) -> ClipParams {
        ClipParams {
            clip_epsilon: self.clip_epsilon,
            ratio_approximation: self.ratio_approximation,
        }
    }

    pub fn regime(&self) -> Result<Regime> {
        match (self.server_update_period, self.sgd_iters_per_batch) {
            (1, 1) => Ok(Regime::OnPolicy),
            (1, i) if i > 1 => Ok(Regime::SampleReuse),
            (v, 1) if v > 1 => Ok(Regime::StaleSampler),
            (v, i) => Err(Error::Config(format!(
                "server_update_period = {v} with sgd_iters_per_batch = {i} is not a supported regime; \
                 use v = 1 (on-policy or sample reuse) or i = 1 (stale sampler)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stages", self.stages),
            ("iterations_per_stage", self.iterations_per_stage),
            ("server_update_period", self.server_update_period),
            ("sgd_iters_per_batch", self.sgd_iters_per_batch),
            ("batch_prompts", self.batch_prompts),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group_size must be at least 2, got {}",
                self.group_size
            )));
        }
        if self.batch_prompts >= 1 << 20 {
            return Err(Error::Config("batch_prompts must be below 2^20".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        if !(self.var_epsilon > 0.0 && self.var_epsilon < 1.0) {
            return Err(Error::Config(format!(
                "var_epsilon must lie in (0, 1), got {}",
                self.var_epsilon
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config(
                "adam_beta1, adam_beta2 must lie in [0, 1) and adam_eps must be positive".into(),
            ));
        }
        self.clip_params()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.regime()?;
        Ok(())
    }
}

/// Prompt distribution plus reward table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub prompts: PromptSpace,
    pub reward: RewardModel,
}

impl Environment {
    pub fn new(prompts: PromptSpace, reward: RewardModel) -> Result<Self> {
        if prompts.prompt_count() != reward.prompt_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} prompt weights for {} reward rows",
                prompts.prompt_count(),
                reward.prompt_count()
            )));
        }
        Ok(Self { prompts, reward })
    }

    pub fn uniform(reward: RewardModel) -> Self {
        Self {
            prompts: PromptSpace::uniform(reward.prompt_count()),
            reward,
        }
    }

    /// `E_x J(pi | x)`
    pub fn mean_reward(&self, policy: &Policy) -> Result<f64> {
        Ok(self.prompts.expectation(&success_rates(policy, &self.reward)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub theta: Policy,
    pub theta_old: Policy,
    pub pi_ref: Policy,
    pub adam: Option<AdamState>,
    /// Stage of the next iteration, 1-based.
    pub stage: usize,
    /// Last completed iteration within `stage`; 0 at a stage start.
    pub iteration: usize,
    /// Number of sampled batches.
    pub samples_drawn: u64,
    /// Number of ascent steps.
    pub inner_steps: u64,
    /// Bumped on every refresh of `theta_old`.
    pub sampler_version: u64,
}

impl TrainState {
    pub fn initial(policy: Policy, optimizer: OptimizerKind) -> Self {
        let adam = (optimizer == OptimizerKind::Adam).then(|| AdamState {
            m: vec![0.0; policy.logits().len()],
            v: vec![0.0; policy.logits().len()],
            t: 0,
        });
        Self {
            theta_old: policy.clone(),
            pi_ref: policy.clone(),
            theta: policy,
            adam,
            stage: 1,
            iteration: 0,
            samples_drawn: 0,
            inner_steps: 0,
            sampler_version: 0,
        }
    }

    pub fn global_iteration(&self, iterations_per_stage: usize) -> usize {
        (self.stage - 1) * iterations_per_stage + self.iteration
    }
}

/// Divergence between the served policy and the current one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Staleness {
    pub tv: f64,
    pub kl: f64,
    pub per_prompt_tv: Vec<f64>,
}

/// `E_x TV(theta_old, theta)` and `E_x KL(theta || theta_old)`.
pub fn staleness_probe(state: &TrainState, prompts: &PromptSpace) -> Result<Staleness> {
    state.theta.same_shape(&state.theta_old)?;
    let mut per_prompt_tv = Vec::with_capacity(prompts.prompt_count());
    let mut kls = Vec::with_capacity(prompts.prompt_count());
    for x in 0..prompts.prompt_count() {
        let (cur, old) = (state.theta.row_distribution(x)?, state.theta_old.row_distribution(x)?);
        per_prompt_tv.push(tv_distance(old, cur)?);
        kls.push(kl_divergence(cur, old).unwrap_or(f64::INFINITY));
    }
    Ok(Staleness {
        tv: prompts.expectation(&per_prompt_tv),
        kl: prompts.expectation(&kls),
        per_prompt_tv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtOne {
    pub per_prompt: Vec<f64>,
    pub mean: f64,
    pub exact_per_prompt: Vec<f64>,
    pub exact_mean: f64,
    /// `false` when the reward is not binary; the estimate is then a mean
    /// reward rather than a success frequency.
    pub binary: bool,
}

/// Success frequency over `samples` draws per prompt.
pub fn evaluate_pass_at_1(
    policy: &Policy,
    env: &Environment,
    samples: usize,
    stream: RngStream,
    exec: Execution,
) -> Result<PassAtOne> {
    if samples == 0 {
        return Err(Error::Config("pass@1 needs at least one sample per prompt".into()));
    }
    env.reward.check_policy(policy)?;
    let per_prompt = exec
        .map_range(env.reward.prompt_count(), |x| -> Result<f64> {
            let s = RngStream::new(stream.seed, stream.stream_id.wrapping_add((x as u64) << 32));
            let ys = sample_responses(policy, x, samples, s)?;
            Ok(ys.iter().map(|y| env.reward.get(x, *y)).sum::<f64>() / samples as f64)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let exact_per_prompt = success_rates(policy, &env.reward)?;
    Ok(PassAtOne {
        mean: env.prompts.expectation(&per_prompt),
        exact_mean: env.prompts.expectation(&exact_per_prompt),
        per_prompt,
        exact_per_prompt,
        binary: env.reward.is_binary(),
    })
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Batch = 0,
    Group = 1,
}

fn stream(seed: u64, global_iteration: usize, slot: usize, purpose: Purpose) -> RngStream {
    RngStream::new(
        seed,
        ((global_iteration as u64) << 24) | ((slot as u64) << 4) | purpose as u64,
    )
}

/// Result of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub record: MetricsRecord,
    pub batches: Vec<GroupSampleBatch>,
}

pub struct Trainer {
    config: TrainerConfig,
    env: Environment,
    state: TrainState,
    exec: Execution,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainerConfig, env: Environment, initial: Policy, exec: Execution) -> Result<Self> {
        let state = TrainState::initial(initial, config.optimizer);
        Self::resume(config, env, state, exec)
    }

    /// Continues from a saved state.
    pub fn resume(config: TrainerConfig, env: Environment, state: TrainState, exec: Execution) -> Result<Self> {
        config.validate()?;
        env.reward.check_policy(&state.theta)?;
        state.theta.same_shape(&state.theta_old)?;
        state.theta.same_shape(&state.pi_ref)?;
        if state.stage == 0 || state.iteration >= config.iterations_per_stage {
            return Err(Error::Config(format!(
                "checkpoint position stage {} iteration {} does not fit {} iterations per stage",
                state.stage, state.iteration, config.iterations_per_stage
            )));
        }
        match (&state.adam, config.optimizer) {
            (Some(a), OptimizerKind::Adam) if a.m.len() == state.theta.logits().len() && a.v.len() == a.m.len() => {}
            (None, OptimizerKind::Sgd) => {}
            _ => {
                return Err(Error::Config(
                    "checkpoint optimizer state does not match the configured optimizer".into(),
                ))
            }
        }
        Ok(Self {
            config,
            env,
            state,
            exec,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.stage > self.config.stages
    }

    fn select_prompts(&self, global_iteration: usize) -> Vec<usize> {
        let b = self.config.batch_prompts;
        match self.config.batch_mode {
            BatchMode::Iid => {
                let mut rng = stream(self.config.seed, global_iteration, 0, Purpose::Batch).rng();
                (0..b).map(|_| self.env.prompts.sample(&mut rng)).collect()
            }
            BatchMode::Sweep => {
                let n = self.env.prompts.prompt_count();
                let start = (global_iteration - 1) * b;
                (0..b).map(|j| (start + j) % n).collect()
            }
        }
    }

    fn ascent_delta(&mut self, gradient: &[f64]) -> Vec<f64> {
        let lr = self.config.learning_rate;
        match self.state.adam.as_mut() {
            None => gradient.iter().map(|g| lr * g).collect(),
            Some(adam) => {
                let (b1, b2, eps) = (self.config.adam_beta1, self.config.adam_beta2, self.config.adam_eps);
                adam.t += 1;
                let c1 = 1.0 - b1.powi(adam.t as i32);
                let c2 = 1.0 - b2.powi(adam.t as i32);
                gradient
                    .iter()
                    .zip(adam.m.iter_mut().zip(adam.v.iter_mut()))
                    .map(|(g, (m, v))| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        lr * (*m / c1) / ((*v / c2).sqrt() + eps)
                    })
                    .collect()
            }
        }
    }

    fn diverged(&self, last_good: TrainState, k: usize, reason: String) -> Error {
        Error::Diverged {
            stage: last_good.stage,
            iteration: k,
            reason,
            last_good: Box::new(last_good),
        }
    }

    /// Runs one iteration; `None` once all stages are done.
    pub fn step(&mut self) -> Result<Option<StepReport>> {
        if self.is_finished() {
            return Ok(None);
        }
        let last_good = self.state.clone();
        let cfg = self.config.clone();
        let (s, k) = (self.state.stage, self.state.iteration + 1);
        let gi = (s - 1) * cfg.iterations_per_stage + k;

        let prompts = self.select_prompts(gi);
        if k % cfg.server_update_period == 0 {
            self.state.theta_old = self.state.theta.clone();
            self.state.sampler_version += 1;
        }
        let staleness = staleness_probe(&self.state, &self.env.prompts)?;
        let pi_k = self.state.theta.clone();
        let alpha = self.state.theta_old.clone();
        let sampler = alpha.with_temperature(cfg.temperature)?;
        let version = self.state.sampler_version;
        let reward = &self.env.reward;
        let batches: Vec<GroupSampleBatch> = self
            .exec
            .map_range(prompts.len(), |b| -> Result<GroupSampleBatch> {
                let ys = sample_group(
                    &sampler,
                    prompts[b],
                    cfg.group_size,
                    stream(cfg.seed, gi, b, Purpose::Group),
                )?;
                GroupSampleBatch::new(prompts[b], ys, reward, version)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        self.state.samples_drawn += 1;
        let advantages = batches
            .iter()
            .map(|b| group_advantage(b, cfg.var_epsilon, cfg.std_divisor))
            .collect::<Result<Vec<GroupAdvantage>>>()?;
        let item_count = (batches.len() * cfg.group_size) as f64;
        let mean_abs_advantage = advantages.iter().flat_map(|a| &a.values).map(|a| a.abs()).sum::<f64>() / item_count;
        let sampled_reward = batches.iter().flat_map(|b| &b.rewards).sum::<f64>() / item_count;

        let params = cfg.clip_params();
        let mut objective = 0.0;
        let mut masked_fraction = 0.0;
        for step in 0..cfg.sgd_iters_per_batch {
            let obj = empirical_objective(
                &self.state.theta,
                &pi_k,
                &alpha,
                &self.state.pi_ref,
                &batches,
                &advantages,
                &params,
                cfg.beta,
                cfg.mask_zero_variance,
                self.exec,
            )?;
            if step == 0 {
                objective = obj.value;
                masked_fraction = obj.masked_fraction();
            }
            if obj.gradient.iter().any(|g| !g.is_finite()) {
                return Err(self.diverged(last_good, k, "non-finite gradient".into()));
            }
            let delta = self.ascent_delta(&obj.gradient);
            let mut next = self.state.theta.clone();
            if let Err(e) = next.apply_update(&delta) {
                return Err(self.diverged(last_good, k, e.to_string()));
            }
            self.state.theta = next;
            self.state.inner_steps += 1;
        }

        let mean_reward = self.env.mean_reward(&self.state.theta)?;
        if !mean_reward.is_finite() {
            return Err(self.diverged(last_good, k, format!("mean reward is {mean_reward}")));
        }
        let bound_slack = if cfg.bound_probe_period > 0 && gi.is_multiple_of(cfg.bound_probe_period) {
            theorem1_report(&self.state.theta, &pi_k, &alpha, &self.env.reward, cfg.var_epsilon)
                .ok()
                .map(|r| r.min_slack())
        } else {
            None
        };
        let record = MetricsRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            stage: s,
            iteration: k,
            global_iteration: gi,
            mean_reward,
            sampled_reward,
            objective,
            mean_abs_advantage,
            staleness_tv: staleness.tv,
            staleness_kl: staleness.kl,
            masked_fraction,
            bound_slack,
            pass_at_1: None,
            wall_time: cfg.record_wall_time.then(|| self.started.elapsed().as_secs_f64()),
        };

        self.state.iteration = k;
        if k == cfg.iterations_per_stage {
            self.state.pi_ref = self.state.theta.clone();
            self.state.stage += 1;
            self.state.iteration = 0;
        }
        Ok(Some(StepReport { record, batches }))
    }

    /// Runs to completion, handing each record to `sink`.
    pub fn run_with(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while let Some(report) = self.step()? {
            sink(&report.record)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        self.run_with(|r| {
            records.push(r.clone());
            Ok(())
        })?;
        Ok(records)
    }
}

/// Final policy, final state and the metrics trace of a complete run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
}

pub fn train(config: TrainerConfig, env: Environment, initial: Policy, exec: Execution) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, env, initial, exec)?;
    let records = trainer.run()?;
    let state = trainer.into_state();
    Ok(TrainOutcome {
        policy: state.theta.clone(),
        state,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::make_bernoulli_env;
    use crate::surrogate::empirical_objective;

    fn bandit() -> (Environment, Policy) {
        let (r, p) = make_bernoulli_env(&[0.2, 0.4, 0.5, 0.3], 6, RngStream::new(3, 0)).unwrap();
        (Environment::uniform(r), p)
    }

    fn small_config() -> TrainerConfig {
        TrainerConfig {
            stages: 2,
            iterations_per_stage: 10,
            batch_prompts: 4,
            beta: 0.01,
            seed: 11,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn single_prompt_sanity_run() {
        let env = Environment::uniform(RewardModel::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let config = TrainerConfig {
            stages: 1,
            iterations_per_stage: 200,
            batch_prompts: 1,
            learning_rate: 0.1,
            beta: 0.0,
            ..TrainerConfig::default()
        };
        let out = train(config, env.clone(), Policy::uniform(1, 2), Execution::Sequential).unwrap();
        assert!(env.mean_reward(&out.policy).unwrap() >= 0.95);
        assert_eq!(out.records.len(), 200);
    }

    #[test]
    fn saturated_env_with_mask_keeps_theta() {
        let (r, p) = make_bernoulli_env(&[0.0, 1.0, 1.0], 5, RngStream::new(0, 0)).unwrap();
        let config = TrainerConfig {
            mask_zero_variance: true,
            optimizer: OptimizerKind::Adam,
            ..small_config()
        };
        let out = train(config, Environment::uniform(r), p.clone(), Execution::Parallel).unwrap();
        assert_eq!(out.policy.logits(), p.logits());
        assert!(out.records.iter().all(|r| r.masked_fraction == 1.0));
    }

    #[test]
    fn deterministic_and_strategy_independent() {
        let (env, p) = bandit();
        let a = train(small_config(), env.clone(), p.clone(), Execution::Parallel).unwrap();
        let b = train(small_config(), env.clone(), p.clone(), Execution::Sequential).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn resume_replays_the_trace() {
        let (env, p) = bandit();
        let config = TrainerConfig {
            optimizer: OptimizerKind::Adam,
            ..small_config()
        };
        let full = train(config.clone(), env.clone(), p.clone(), Execution::Parallel).unwrap();
        let mut t = Trainer::new(config.clone(), env.clone(), p, Execution::Parallel).unwrap();
        for _ in 0..13 {
            t.step().unwrap();
        }
        let json = serde_json::to_string(t.state()).unwrap();
        let state: TrainState = serde_json::from_str(&json).unwrap();
        let mut resumed = Trainer::resume(config, env, state, Execution::Parallel).unwrap();
        let rest = resumed.run().unwrap();
        assert_eq!(rest, full.records[13..]);
        assert_eq!(resumed.state(), &full.state);
    }

    #[test]
    fn refresh_and_swap_schedule() {
        let (env, p) = bandit();
        let config = TrainerConfig {
            server_update_period: 3,
            ..small_config()
        };
        let mut t = Trainer::new(config, env, p.clone(), Execution::Sequential).unwrap();
        let mut versions = Vec::new();
        let mut reference = p;
        while let Some(rep) = t.step().unwrap() {
            versions.push(rep.batches[0].sampler_version);
            if rep.record.iteration == 10 {
                assert_eq!(t.state().pi_ref, t.state().theta);
                reference = t.state().theta.clone();
            } else {
                assert_eq!(t.state().pi_ref, reference);
            }
            if rep.record.stage == 2 {
                break;
            }
        }
        // refreshes at k = 3, 6, 9 per stage
        assert_eq!(versions, [0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn sample_counters_follow_the_regime() {
        let (env, p) = bandit();
        for (v, i) in [(1, 1), (1, 4), (5, 1)] {
            let config = TrainerConfig {
                server_update_period: v,
                sgd_iters_per_batch: i,
                ..small_config()
            };
            let out = train(config, env.clone(), p.clone(), Execution::Sequential).unwrap();
            assert_eq!(out.state.samples_drawn, 20);
            assert_eq!(out.state.inner_steps, 20 * i as u64);
        }
        let bad = TrainerConfig {
            server_update_period: 2,
            sgd_iters_per_batch: 2,
            ..small_config()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn on_policy_objective_matches_direct_evaluation() {
        let (env, p) = bandit();
        let mut t = Trainer::new(small_config(), env.clone(), p, Execution::Sequential).unwrap();
        for _ in 0..5 {
            let before = t.state().clone();
            let rep = t.step().unwrap().unwrap();
            let cfg = t.config();
            let adv: Vec<_> = rep
                .batches
                .iter()
                .map(|b| group_advantage(b, cfg.var_epsilon, cfg.std_divisor).unwrap())
                .collect();
            let direct = empirical_objective(
                &before.theta,
                &before.theta,
                &before.theta,
                &before.pi_ref,
                &rep.batches,
                &adv,
                &cfg.clip_params(),
                cfg.beta,
                false,
                Execution::Sequential,
            )
            .unwrap();
            assert!((rep.record.objective - direct.value).abs() <= 1e-12);
            assert_eq!(rep.record.staleness_tv, 0.0);
        }
    }

    #[test]
    fn zero_learning_rate_has_no_staleness() {
        let (env, p) = bandit();
        let config = TrainerConfig {
            learning_rate: 0.0,
            server_update_period: 5,
            ..small_config()
        };
        let out = train(config, env, p.clone(), Execution::Sequential).unwrap();
        assert!(out.records.iter().all(|r| r.staleness_tv == 0.0));
        assert_eq!(out.policy.logits(), p.logits());
    }

    #[test]
    fn divergence_returns_last_good_state() {
        let (env, p) = bandit();
        let config = TrainerConfig {
            learning_rate: f64::MAX,
            optimizer: OptimizerKind::Adam,
            beta: 0.0,
            ..small_config()
        };
        match train(config, env, p, Execution::Sequential) {
            Err(Error::Diverged { last_good, .. }) => assert!(last_good.theta.logits().iter().all(|l| l.is_finite())),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn pass_at_1_examples() {
        let r = RewardModel::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let env = Environment::uniform(r);
        let det = Policy::new(1, 2, vec![0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(
            evaluate_pass_at_1(&det, &env, 7, RngStream::new(0, 0), Execution::Sequential)
                .unwrap()
                .mean,
            1.0
        );
        let half = Policy::uniform(1, 2);
        let est = evaluate_pass_at_1(&half, &env, 10_000, RngStream::new(4, 0), Execution::Parallel).unwrap();
        assert!((est.mean - 0.5).abs() <= 0.02);
        assert_eq!(est.exact_mean, 0.5);
        let a = evaluate_pass_at_1(&half, &env, 1, RngStream::new(9, 2), Execution::Sequential).unwrap();
        let b = evaluate_pass_at_1(&half, &env, 1, RngStream::new(9, 2), Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(evaluate_pass_at_1(&half, &env, 0, RngStream::new(0, 0), Execution::Sequential).is_err());
    }

    #[test]
    fn sweep_batches_cycle_prompts() {
        let (env, p) = bandit();
        let config = TrainerConfig {
            batch_mode: BatchMode::Sweep,
            batch_prompts: 3,
            ..small_config()
        };
        let mut t = Trainer::new(config, env, p, Execution::Sequential).unwrap();
        let a: Vec<usize> = t.step().unwrap().unwrap().batches.iter().map(|b| b.prompt).collect();
        let b: Vec<usize> = t.step().unwrap().unwrap().batches.iter().map(|b| b.prompt).collect();
        assert_eq!(a, [0, 1, 2]);
        assert_eq!(b, [3, 0, 1]);
    }
}
