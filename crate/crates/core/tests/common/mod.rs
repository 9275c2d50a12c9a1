//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

use grpo_core::reward::{draw_success_probs, make_bernoulli_env};
use grpo_core::trainer::Environment;
use grpo_core::{Policy, RewardModel, RngStream};
use rand::Rng;

pub fn random_logits(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_policy(rng: &mut impl Rng, prompts: usize, responses: usize) -> Policy {
    Policy::new(prompts, responses, random_logits(rng, prompts * responses, 2.0)).unwrap()
}

/// `base` with every logit moved by up to `scale`.
pub fn perturb(rng: &mut impl Rng, base: &Policy, scale: f64) -> Policy {
    let (p, r) = base.shape();
    Policy::new(
        p,
        r,
        base.logits()
            .iter()
            .map(|l| l + rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

/// Random binary rewards; row 0 is forced constant when `saturate_first`.
pub fn random_binary_reward(rng: &mut impl Rng, prompts: usize, responses: usize, saturate_first: bool) -> RewardModel {
    let mut table: Vec<f64> = (0..prompts * responses)
        .map(|_| rng.random_range(0..2) as f64)
        .collect();
    if saturate_first {
        let c = rng.random_range(0..2) as f64;
        table[..responses].fill(c);
    }
    RewardModel::new(prompts, responses, table).unwrap()
}

/// Whitened rewards of one row under `probs`, computed from scratch.
pub fn whitened_row(probs: &[f64], rewards: &[f64], var_epsilon: f64) -> Vec<f64> {
    let mean: f64 = probs.iter().zip(rewards).map(|(p, r)| p * r).sum();
    let var: f64 = probs
        .iter()
        .zip(rewards)
        .map(|(p, r)| p * (r - mean) * (r - mean))
        .sum();
    rewards
        .iter()
        .map(|r| (r - mean) / (var + var_epsilon).sqrt())
        .collect()
}

/// On-policy clipped GRPO objective for one prompt:
/// `E_{y~pi_k} min(pi/pi_k A, clip(pi/pi_k, 1 - eps, 1 + eps) A)`.
pub fn on_policy_clipped(pi: &[f64], pi_k: &[f64], rewards: &[f64], eps: f64, var_epsilon: f64) -> f64 {
    let adv = whitened_row(pi_k, rewards, var_epsilon);
    let mut total = 0.0;
    for y in 0..pi.len() {
        if pi_k[y] == 0.0 {
            continue;
        }
        let ratio = pi[y] / pi_k[y];
        let clipped = if ratio < 1.0 - eps {
            1.0 - eps
        } else if ratio > 1.0 + eps {
            1.0 + eps
        } else {
            ratio
        };
        let unclipped_term = ratio * adv[y];
        let clipped_term = clipped * adv[y];
        total += pi_k[y]
            * if unclipped_term < clipped_term {
                unclipped_term
            } else {
                clipped_term
            };
    }
    total
}

/// Central differences of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max_i |b_i|`, with a floor on the denominator.
pub fn relative_error(approx: &[f64], exact: &[f64]) -> f64 {
    let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    approx.iter().zip(exact).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

/// Distance in ratio space from the nearest clip breakpoint.
pub fn kink_distance(pi: &Policy, pi_k: &Policy, alpha: &Policy, eps: f64, exact_ratio: bool) -> f64 {
    let mut d = f64::INFINITY;
    for x in 0..pi.prompt_count() {
        for y in 0..pi.response_count() {
            let a = alpha.probs(x)[y];
            if a == 0.0 {
                continue;
            }
            let r = pi.probs(x)[y] / a;
            let r_ref = if exact_ratio { pi_k.probs(x)[y] / a } else { 1.0 };
            d = d.min((r - (r_ref + eps)).abs());
            if r_ref - eps > 0.0 {
                d = d.min((r - (r_ref - eps)).abs());
            }
        }
    }
    d
}

/// Bernoulli bandit with success probabilities drawn from `[lo, hi]`.
pub fn bandit(seed: u64, prompts: usize, responses: usize, lo: f64, hi: f64) -> (Environment, Policy) {
    let probs = draw_success_probs(prompts, lo, hi, RngStream::new(seed, 1)).unwrap();
    let (r, p) = make_bernoulli_env(&probs, responses, RngStream::new(seed, 2)).unwrap();
    (Environment::uniform(r), p)
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}
