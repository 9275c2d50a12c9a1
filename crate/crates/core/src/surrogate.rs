//! Objective functions in logit space.
//!
//! Exact-mode objectives integrate over the response grid: the importance
//! sampled expectation `E_{y~alpha}[ratio * A]` becomes a finite sum, and the
//! KL penalty `KL(pi || pi_ref)` is the exact per-prompt divergence. The
//! empirical objective averages over sampled groups like the training loop
//! does. Every objective returns its gradient with respect to the logits of
//! `pi`.
//!
//! At clip kinks (where the `min` or `clip` arguments tie) the gradient
//! follows the unclipped branch.

use serde::{Deserialize, Serialize};

use crate::advantage::{exact_stats, is_zero_variance, ExactAdvantage, GroupAdvantage, GroupSampleBatch};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::policy::{Policy, PromptSpace};
use crate::reward::RewardModel;

/// Reference ratio used as the centre of the clip band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioApproximation {
    /// `pi_k / alpha`
    ExactPiKRatio,
    /// The constant 1, i.e. `pi_k ~ alpha` for a small staleness.
    #[default]
    UnitRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub clip_epsilon: f64,
    pub ratio_approximation: RatioApproximation,
}

impl Default for ClipParams {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            ratio_approximation: RatioApproximation::UnitRatio,
        }
    }
}

impl ClipParams {
    pub fn new(clip_epsilon: f64, ratio_approximation: RatioApproximation) -> Result<Self> {
        let p = Self {
            clip_epsilon,
            ratio_approximation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.clip_epsilon) {
            return Err(Error::Validation(format!(
                "clip_epsilon must be in [0, 1], got {}",
                self.clip_epsilon
            )));
        }
        Ok(())
    }
}

/// Objective value with its logit gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Same row-major shape as the policy logits.
    pub gradient: Vec<f64>,
    /// Unweighted per-prompt terms; `value = weights . per_prompt`.
    pub per_prompt: Vec<f64>,
}

/// `f_eps(r, r', a) = min(r a, clip(r, max(r' - eps, 0), r' + eps) a)`.
pub fn clip_fn(r: f64, r_ref: f64, a: f64, eps: f64) -> f64 {
    let lo = (r_ref - eps).max(0.0);
    let hi = r_ref + eps;
    (r * a).min(r.clamp(lo, hi) * a)
}

/// `d f_eps / d r`, following the unclipped branch at ties.
fn clip_slope(r: f64, r_ref: f64, a: f64, eps: f64) -> f64 {
    let lo = (r_ref - eps).max(0.0);
    let hi = r_ref + eps;
    if r * a <= r.clamp(lo, hi) * a {
        a
    } else {
        0.0
    }
}

/// Softmax chain rule: gradient in logits from `w_y = d objective / d pi_y`.
fn logit_gradient(probs: &[f64], w: &[f64]) -> Vec<f64> {
    let mean: f64 = probs.iter().zip(w).map(|(p, w)| p * w).sum();
    probs
        .iter()
        .zip(w)
        .map(|(p, w)| if *p == 0.0 { 0.0 } else { p * (w - mean) })
        .collect()
}

fn support_error(prompt: usize, response: usize) -> Error {
    Error::Domain(format!(
        "pi({response}|{prompt}) > 0 but the sampling policy gives it zero mass"
    ))
}

fn check_exact_inputs(policies: &[&Policy], adv: &ExactAdvantage, prompt: usize) -> Result<()> {
    let first = policies[0];
    for p in &policies[1..] {
        first.same_shape(p)?;
    }
    first.check_prompt(prompt)?;
    if adv.prompt_count() != first.prompt_count() || adv.response_count() != first.response_count() {
        return Err(Error::ShapeMismatch(
            "advantage field does not match the policy shape".into(),
        ));
    }
    Ok(())
}

/// `L_alpha(pi(.|x)) = E_{y~alpha}[pi/alpha * A_alpha(x, y)]`.
pub fn surrogate_plain(pi: &Policy, alpha: &Policy, adv: &ExactAdvantage, prompt: usize) -> Result<f64> {
    check_exact_inputs(&[pi, alpha], adv, prompt)?;
    plain_term(pi.probs(prompt), alpha.probs(prompt), adv.row(prompt), prompt).map(|(v, _)| v)
}

fn plain_term(pi: &[f64], alpha: &[f64], adv: &[f64], prompt: usize) -> Result<(f64, Vec<f64>)> {
    let mut value = 0.0;
    let mut w = vec![0.0; pi.len()];
    for y in 0..pi.len() {
        if alpha[y] == 0.0 {
            if pi[y] > 0.0 {
                return Err(support_error(prompt, y));
            }
            continue;
        }
        value += alpha[y] * (pi[y] / alpha[y]) * adv[y];
        w[y] = adv[y];
    }
    Ok((value, logit_gradient(pi, &w)))
}

/// `L^c_alpha(pi(.|x)) = E_{y~alpha} f_eps(pi/alpha, pi_k/alpha, A_alpha)`.
pub fn surrogate_clipped(
    pi: &Policy,
    pi_k: &Policy,
    alpha: &Policy,
    adv: &ExactAdvantage,
    params: &ClipParams,
    prompt: usize,
) -> Result<f64> {
    params.validate()?;
    check_exact_inputs(&[pi, pi_k, alpha], adv, prompt)?;
    clipped_term(
        pi.probs(prompt),
        pi_k.probs(prompt),
        alpha.probs(prompt),
        adv.row(prompt),
        params,
        prompt,
    )
    .map(|(v, _)| v)
}

fn clipped_term(
    pi: &[f64],
    pi_k: &[f64],
    alpha: &[f64],
    adv: &[f64],
    params: &ClipParams,
    prompt: usize,
) -> Result<(f64, Vec<f64>)> {
    let eps = params.clip_epsilon;
    let mut value = 0.0;
    let mut w = vec![0.0; pi.len()];
    for y in 0..pi.len() {
        if alpha[y] == 0.0 {
            if pi[y] > 0.0 {
                return Err(support_error(prompt, y));
            }
            continue;
        }
        let r = pi[y] / alpha[y];
        let r_ref = match params.ratio_approximation {
            RatioApproximation::ExactPiKRatio => pi_k[y] / alpha[y],
            RatioApproximation::UnitRatio => 1.0,
        };
        value += alpha[y] * clip_fn(r, r_ref, adv[y], eps);
        w[y] = clip_slope(r, r_ref, adv[y], eps);
    }
    Ok((value, logit_gradient(pi, &w)))
}

/// Exact `KL(pi || pi_ref)` for one row and its logit gradient.
pub(crate) fn kl_term(pi: &[f64], pi_ref: &[f64], prompt: usize) -> Result<(f64, Vec<f64>)> {
    let mut kl = 0.0;
    let mut log_ratio = vec![0.0; pi.len()];
    for y in 0..pi.len() {
        if pi[y] == 0.0 {
            continue;
        }
        if pi_ref[y] == 0.0 {
            return Err(Error::Domain(format!(
                "KL(pi || pi_ref) undefined at prompt {prompt}: pi_ref({y}) = 0"
            )));
        }
        log_ratio[y] = (pi[y] / pi_ref[y]).ln();
        kl += pi[y] * log_ratio[y];
    }
    Ok((kl, logit_gradient(pi, &log_ratio)))
}

struct PromptInputs<'a> {
    pi: &'a Policy,
    pi_k: &'a Policy,
    alpha: &'a Policy,
    pi_ref: &'a Policy,
    params: &'a ClipParams,
    beta: f64,
}

impl PromptInputs<'_> {
    /// `L^c - beta KL` for one prompt and its unweighted gradient row.
    fn term(&self, prompt: usize, adv_row: &[f64]) -> Result<(f64, Vec<f64>)> {
        let pi = self.pi.probs(prompt);
        let (surrogate, mut grad) = clipped_term(
            pi,
            self.pi_k.probs(prompt),
            self.alpha.probs(prompt),
            adv_row,
            self.params,
            prompt,
        )?;
        if self.beta == 0.0 {
            return Ok((surrogate, grad));
        }
        let (kl, kl_grad) = kl_term(pi, self.pi_ref.probs(prompt), prompt)?;
        for (g, k) in grad.iter_mut().zip(kl_grad) {
            *g -= self.beta * k;
        }
        Ok((surrogate - self.beta * kl, grad))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Validation(format!("beta must be >= 0, got {beta}")));
    }
    Ok(())
}

type PromptTerm = Result<Option<(f64, Vec<f64>)>>;

fn assemble(prompts: &PromptSpace, responses: usize, terms: Vec<PromptTerm>) -> Result<ObjectiveValue> {
    let mut gradient = vec![0.0; prompts.prompt_count() * responses];
    let mut per_prompt = vec![0.0; prompts.prompt_count()];
    for (x, term) in terms.into_iter().enumerate() {
        let Some((value, grad)) = term? else { continue };
        per_prompt[x] = value;
        let w = prompts.weights()[x];
        for (g, d) in gradient[x * responses..(x + 1) * responses].iter_mut().zip(grad) {
            *g = w * d;
        }
    }
    Ok(ObjectiveValue {
        value: prompts.expectation(&per_prompt),
        gradient,
        per_prompt,
    })
}

fn check_prompt_space(prompts: &PromptSpace, pi: &Policy) -> Result<()> {
    if prompts.prompt_count() != pi.prompt_count() {
        return Err(Error::ShapeMismatch(format!(
            "prompt space has {} prompts, policy has {}",
            prompts.prompt_count(),
            pi.prompt_count()
        )));
    }
    Ok(())
}

/// `E_x[L^c_alpha(pi(.|x))] - beta E_x[KL(pi(.|x) || pi_ref(.|x))]`.
#[allow(clippy::too_many_arguments)]
pub fn loss_kl_regularized(
    pi: &Policy,
    pi_k: &Policy,
    alpha: &Policy,
    pi_ref: &Policy,
    adv: &ExactAdvantage,
    params: &ClipParams,
    beta: f64,
    prompts: &PromptSpace,
    exec: Execution,
) -> Result<ObjectiveValue> {
    params.validate()?;
    check_beta(beta)?;
    check_exact_inputs(&[pi, pi_k, alpha, pi_ref], adv, 0)?;
    check_prompt_space(prompts, pi)?;
    let inputs = PromptInputs {
        pi,
        pi_k,
        alpha,
        pi_ref,
        params,
        beta,
    };
    let terms = exec.map_range(pi.prompt_count(), |x| inputs.term(x, adv.row(x)).map(Some));
    assemble(prompts, pi.response_count(), terms)
}

/// On-policy objective with prompts of zero reward variance under `pi_k`
/// removed: `E_x 1[sigma_{pi_k}(x) != 0] (L^c_{pi_k} - beta KL)`.
///
/// Both the surrogate and the KL penalty are masked. Masked prompts get an
/// exactly zero gradient row.
#[allow(clippy::too_many_arguments)]
pub fn loss_masked(
    pi: &Policy,
    pi_k: &Policy,
    pi_ref: &Policy,
    reward: &RewardModel,
    params: &ClipParams,
    beta: f64,
    var_epsilon: f64,
    prompts: &PromptSpace,
    exec: Execution,
) -> Result<ObjectiveValue> {
    params.validate()?;
    check_beta(beta)?;
    pi.same_shape(pi_k)?;
    pi.same_shape(pi_ref)?;
    reward.check_policy(pi)?;
    check_prompt_space(prompts, pi)?;
    let inputs = PromptInputs {
        pi,
        pi_k,
        alpha: pi_k,
        pi_ref,
        params,
        beta,
    };
    let terms = exec.map_range(pi.prompt_count(), |x| {
        let stats = exact_stats(pi_k, reward, x, var_epsilon)?;
        if stats.std == 0.0 {
            return Ok(None);
        }
        let adv_row: Vec<f64> = reward.row(x).iter().map(|r| stats.whiten(*r)).collect();
        inputs.term(x, &adv_row).map(Some)
    });
    assemble(prompts, pi.response_count(), terms)
}

/// Prompts whose exact reward variance under `pi_k` is zero.
pub fn zero_variance_prompts(pi_k: &Policy, reward: &RewardModel) -> Result<Vec<bool>> {
    (0..reward.prompt_count())
        .map(|x| exact_stats(pi_k, reward, x, 0.0).map(|s| s.std == 0.0))
        .collect()
}

/// Sampled objective of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalObjective {
    /// Mean over groups of `(1/G) sum_i f_eps(ratio_i, ref_i, A_hat_i) - beta KL_x`.
    pub value: f64,
    pub gradient: Vec<f64>,
    pub per_group: Vec<f64>,
    pub masked: Vec<bool>,
}

impl EmpiricalObjective {
    pub fn masked_fraction(&self) -> f64 {
        self.masked.iter().filter(|m| **m).count() as f64 / self.masked.len().max(1) as f64
    }
}

/// Group-sampled version of the (optionally masked) KL-regularized clipped
/// objective, with per-sample importance weights `pi(y_i|x) / alpha(y_i|x)`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_objective(
    pi: &Policy,
    pi_k: &Policy,
    alpha: &Policy,
    pi_ref: &Policy,
    batches: &[GroupSampleBatch],
    advantages: &[GroupAdvantage],
    params: &ClipParams,
    beta: f64,
    mask_zero_variance: bool,
    exec: Execution,
) -> Result<EmpiricalObjective> {
    params.validate()?;
    check_beta(beta)?;
    pi.same_shape(pi_k)?;
    pi.same_shape(alpha)?;
    pi.same_shape(pi_ref)?;
    if batches.is_empty() || batches.len() != advantages.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} batches but {} advantage groups",
            batches.len(),
            advantages.len()
        )));
    }
    let eps = params.clip_epsilon;
    let group_terms = exec.map_range(batches.len(), |b| -> Result<Option<(f64, Vec<f64>)>> {
        let batch = &batches[b];
        let adv = &advantages[b];
        let x = batch.prompt;
        pi.check_prompt(x)?;
        if adv.prompt != x || adv.values.len() != batch.responses.len() {
            return Err(Error::ShapeMismatch(format!(
                "advantages of group {b} do not match its samples"
            )));
        }
        if mask_zero_variance && is_zero_variance(batch) {
            return Ok(None);
        }
        let probs = pi.probs(x);
        let old = alpha.probs(x);
        let cur = pi_k.probs(x);
        let g = batch.responses.len() as f64;
        let mut value = 0.0;
        let mut w = vec![0.0; probs.len()];
        for (&y, &a) in batch.responses.iter().zip(&adv.values) {
            pi.check_response(y)?;
            if old[y] == 0.0 {
                return Err(support_error(x, y));
            }
            let r = probs[y] / old[y];
            let r_ref = match params.ratio_approximation {
                RatioApproximation::ExactPiKRatio => cur[y] / old[y],
                RatioApproximation::UnitRatio => 1.0,
            };
            value += clip_fn(r, r_ref, a, eps) / g;
            // d ratio / d pi_y = 1 / alpha_y
            w[y] += clip_slope(r, r_ref, a, eps) / old[y] / g;
        }
        let mut grad = logit_gradient(probs, &w);
        if beta != 0.0 {
            let (kl, kl_grad) = kl_term(probs, pi_ref.probs(x), x)?;
            value -= beta * kl;
            for (d, k) in grad.iter_mut().zip(kl_grad) {
                *d -= beta * k;
            }
        }
        Ok(Some((value, grad)))
    });

    let responses = pi.response_count();
    let scale = 1.0 / batches.len() as f64;
    let mut gradient = vec![0.0; pi.logits().len()];
    let mut per_group = Vec::with_capacity(batches.len());
    let mut masked = Vec::with_capacity(batches.len());
    for (batch, term) in batches.iter().zip(group_terms) {
        match term? {
            None => {
                per_group.push(0.0);
                masked.push(true);
            }
            Some((value, grad)) => {
                per_group.push(value);
                masked.push(false);
                let x = batch.prompt;
                for (g, d) in gradient[x * responses..(x + 1) * responses].iter_mut().zip(grad) {
                    *g += scale * d;
                }
            }
        }
    }
    Ok(EmpiricalObjective {
        value: per_group.iter().sum::<f64>() * scale,
        gradient,
        per_group,
        masked,
    })
}
