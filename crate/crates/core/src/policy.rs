//! Finite-space policies, divergences, sampling and score functions.
//!
//! A [`Policy`] is a `prompt_count x response_count` logit table; its
//! probabilities are always the row-wise softmax of the logits. The same type
//! plays every role in the algorithm: the trained policy, the current iterate,
//! the stale sampler and the KL reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on probability vectors summing to one.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Prompt distribution over a finite prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PromptSpace {
    weights: Vec<f64>,
}

impl PromptSpace {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Validation(
                "prompt space must contain at least one prompt".into(),
            ));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w >= 0.0) || !w.is_finite())
        {
            return Err(Error::Validation(format!(
                "prompt weight {i} is {w}, expected a nonnegative number"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!("prompt weights sum to {total}, expected 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(prompt_count: usize) -> Self {
        assert!(prompt_count > 0, "prompt space must be nonempty");
        Self {
            weights: vec![1.0 / prompt_count as f64; prompt_count],
        }
    }

    pub fn prompt_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted mean of a per-prompt quantity, summed in prompt order.
    pub fn expectation(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.weights.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Draws one prompt index.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        sample_index(&self.weights, rng)
    }
}

impl TryFrom<Vec<f64>> for PromptSpace {
    type Error = Error;
    fn try_from(weights: Vec<f64>) -> Result<Self> {
        Self::new(weights)
    }
}

impl From<PromptSpace> for Vec<f64> {
    fn from(p: PromptSpace) -> Self {
        p.weights
    }
}

/// Size of the finite response set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseSpace {
    response_count: usize,
}

impl ResponseSpace {
    pub fn new(response_count: usize) -> Result<Self> {
        if response_count < 2 {
            return Err(Error::Validation(format!(
                "response space needs at least 2 responses, got {response_count}"
            )));
        }
        Ok(Self { response_count })
    }

    pub fn response_count(self) -> usize {
        self.response_count
    }
}

/// Identifies one independent random stream.
///
/// Draws depend only on `(seed, stream_id, draw index)`, so work can be split
/// across threads or resumed from a checkpoint without carrying RNG state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRepr", into = "PolicyRepr")]
pub struct Policy {
    prompts: usize,
    responses: usize,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl Policy {
    /// Builds a policy from a row-major logit table. Logits may be `-inf`
    /// (a response with exactly zero probability) but every row needs at least
    /// one finite entry.
    pub fn new(prompts: usize, responses: usize, logits: Vec<f64>) -> Result<Self> {
        if prompts == 0 || responses == 0 {
            return Err(Error::Validation(
                "policy needs at least one prompt and one response".into(),
            ));
        }
        if logits.len() != prompts * responses {
            return Err(Error::ShapeMismatch(format!(
                "logit table has {} entries, expected {prompts}x{responses}",
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::Validation(format!(
                "logit ({}, {}) is {}",
                i / responses,
                i % responses,
                logits[i]
            )));
        }
        let mut policy = Self {
            prompts,
            responses,
            probs: vec![0.0; logits.len()],
            logits,
        };
        for x in 0..prompts {
            policy.refresh_row(x)?;
        }
        Ok(policy)
    }

    pub fn uniform(prompts: usize, responses: usize) -> Self {
        Self::new(prompts, responses, vec![0.0; prompts * responses]).expect("uniform policy is valid")
    }

    /// Builds a policy whose probabilities equal `probs` (logits = ln p).
    pub fn from_probs(prompts: usize, responses: usize, probs: &[f64]) -> Result<Self> {
        if probs.len() != prompts * responses {
            return Err(Error::ShapeMismatch(format!(
                "probability table has {} entries, expected {prompts}x{responses}",
                probs.len()
            )));
        }
        for (x, row) in probs.chunks(responses).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("row {x} is not a probability vector")));
            }
        }
        Self::new(prompts, responses, probs.iter().map(|p| p.ln()).collect())
    }

    pub fn prompt_count(&self) -> usize {
        self.prompts
    }

    pub fn response_count(&self) -> usize {
        self.responses
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.prompts, self.responses)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_row(&self, prompt: usize) -> &[f64] {
        &self.logits[prompt * self.responses..(prompt + 1) * self.responses]
    }

    /// `pi(.|prompt)`; panics on an out-of-range prompt.
    pub fn probs(&self, prompt: usize) -> &[f64] {
        &self.probs[prompt * self.responses..(prompt + 1) * self.responses]
    }

    /// All probabilities, row-major.
    pub fn prob_table(&self) -> &[f64] {
        &self.probs
    }

    pub fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt >= self.prompts {
            return Err(Error::IndexOutOfRange {
                what: "prompt",
                index: prompt,
                len: self.prompts,
            });
        }
        Ok(())
    }

    pub fn check_response(&self, response: usize) -> Result<()> {
        if response >= self.responses {
            return Err(Error::IndexOutOfRange {
                what: "response",
                index: response,
                len: self.responses,
            });
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Policy) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "policies have shapes {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Returns `pi(.|prompt)`.
    pub fn row_distribution(&self, prompt: usize) -> Result<&[f64]> {
        self.check_prompt(prompt)?;
        Ok(self.probs(prompt))
    }

    /// Policy with logits divided by `temperature`.
    pub fn with_temperature(&self, temperature: f64) -> Result<Policy> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if temperature == 1.0 {
            return Ok(self.clone());
        }
        Policy::new(
            self.prompts,
            self.responses,
            self.logits.iter().map(|l| l / temperature).collect(),
        )
    }

    /// Adds `delta` (row-major, same shape as the logits) and re-normalizes
    /// the touched rows. Zero entries leave the logit bit pattern untouched.
    pub fn apply_update(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.logits.len() {
            return Err(Error::ShapeMismatch(format!(
                "update has {} entries, expected {}",
                delta.len(),
                self.logits.len()
            )));
        }
        for x in 0..self.prompts {
            let range = x * self.responses..(x + 1) * self.responses;
            let row_delta = &delta[range.clone()];
            if row_delta.iter().all(|d| *d == 0.0) {
                continue;
            }
            for (l, d) in self.logits[range].iter_mut().zip(row_delta) {
                if *d != 0.0 {
                    *l += d;
                }
            }
            self.refresh_row(x)?;
        }
        Ok(())
    }

    fn refresh_row(&mut self, x: usize) -> Result<()> {
        let range = x * self.responses..(x + 1) * self.responses;
        let row = &self.logits[range.clone()];
        if row.iter().any(|l| !l.is_finite() && *l != f64::NEG_INFINITY) {
            return Err(Error::Domain(format!("non-finite logit in row {x}")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Validation(format!("row {x} has no finite logit")));
        }
        let probs = &mut self.probs[range];
        let mut total = 0.0;
        for (p, l) in probs.iter_mut().zip(row) {
            *p = (l - max).exp();
            total += *p;
        }
        for p in probs.iter_mut() {
            *p /= total;
        }
        Ok(())
    }
}

/// Serialized form: logits only, `-inf` written as a string.
#[derive(Serialize, Deserialize)]
struct PolicyRepr {
    prompts: usize,
    responses: usize,
    logits: Vec<LogitRepr>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LogitRepr {
    Finite(f64),
    Text(String),
}

impl From<Policy> for PolicyRepr {
    fn from(p: Policy) -> Self {
        PolicyRepr {
            prompts: p.prompts,
            responses: p.responses,
            logits: p
                .logits
                .iter()
                .map(|l| {
                    if l.is_finite() {
                        LogitRepr::Finite(*l)
                    } else {
                        LogitRepr::Text("-inf".into())
                    }
                })
                .collect(),
        }
    }
}

impl TryFrom<PolicyRepr> for Policy {
    type Error = Error;
    fn try_from(r: PolicyRepr) -> Result<Self> {
        let logits = r
            .logits
            .into_iter()
            .map(|l| match l {
                LogitRepr::Finite(v) => Ok(v),
                LogitRepr::Text(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
                LogitRepr::Text(s) => Err(Error::Format(format!("bad logit {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Policy::new(r.prompts, r.responses, logits)
    }
}

fn check_same_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Total variation distance `1/2 sum |p - q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_same_len(p, q)?;
    let l1: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * l1).min(1.0))
}

/// `KL(p || q)` in nats, with `0 ln(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_same_len(p, q)?;
    let mut kl = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Err(Error::Domain(format!("KL undefined: p[{i}] = {a} but q[{i}] = 0")));
        }
        kl += a * (a / b).ln();
    }
    Ok(kl.max(0.0))
}

/// Inverse-CDF categorical draw. Never returns an index of probability zero.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cumulative += p;
            last_positive = i;
            if u < cumulative {
                return i;
            }
        }
    }
    // u landed in the rounding gap above the accumulated total
    last_positive
}

/// Draws `group_size` i.i.d. responses from `pi(.|prompt)`.
pub fn sample_group(policy: &Policy, prompt: usize, group_size: usize, stream: RngStream) -> Result<Vec<usize>> {
    if group_size < 2 {
        return Err(Error::Config(format!(
            "group_size must be at least 2, got {group_size}"
        )));
    }
    sample_responses(policy, prompt, group_size, stream)
}

pub(crate) fn sample_responses(policy: &Policy, prompt: usize, n: usize, stream: RngStream) -> Result<Vec<usize>> {
    let probs = policy.row_distribution(prompt)?;
    let mut rng = stream.rng();
    Ok((0..n).map(|_| sample_index(probs, &mut rng)).collect())
}

/// Gradient of `ln pi(response|prompt)` with respect to that prompt's logit
/// row: `one_hot(response) - pi(.|prompt)`. Other rows have zero gradient.
pub fn grad_log_prob(policy: &Policy, prompt: usize, response: usize) -> Result<Vec<f64>> {
    policy.check_prompt(prompt)?;
    policy.check_response(response)?;
    let mut g: Vec<f64> = policy.probs(prompt).iter().map(|p| -p).collect();
    g[response] += 1.0;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn row(logits: &[f64]) -> Policy {
        Policy::new(1, logits.len(), logits.to_vec()).unwrap()
    }

    fn random_dist(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let p = row(&(0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>());
        p.probs(0).to_vec()
    }

    #[test]
    fn row_distribution_examples() {
        assert_eq!(row(&[0.0, 0.0]).row_distribution(0).unwrap(), &[0.5, 0.5]);
        let p = row(&[3f64.ln(), 0.0]);
        let d = p.row_distribution(0).unwrap();
        assert!((d[0] - 0.75).abs() < 1e-15 && (d[1] - 0.25).abs() < 1e-15);
        assert_eq!(row(&[0.0; 4]).row_distribution(0).unwrap(), &[0.25; 4]);
        assert!(matches!(
            row(&[0.0, 0.0]).row_distribution(1),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn rejects_bad_logits() {
        assert!(Policy::new(1, 2, vec![f64::NAN, 0.0]).is_err());
        assert!(Policy::new(1, 2, vec![f64::INFINITY, 0.0]).is_err());
        assert!(Policy::new(1, 2, vec![f64::NEG_INFINITY; 2]).is_err());
        assert!(Policy::new(1, 2, vec![0.0]).is_err());
        let saturated = Policy::new(1, 2, vec![0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(saturated.probs(0), &[1.0, 0.0]);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((tv_distance(&[0.6, 0.4], &[0.4, 0.6]).unwrap() - 0.2).abs() < 1e-15);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::Domain(_))));
        // zero mass in p where q is zero is fine
        assert_eq!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn tv_triangle_and_pinsker_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(2..10);
            let (p, q, r) = (
                random_dist(&mut rng, n),
                random_dist(&mut rng, n),
                random_dist(&mut rng, n),
            );
            let pq = tv_distance(&p, &q).unwrap();
            assert_eq!(pq, tv_distance(&q, &p).unwrap());
            assert!(pq <= tv_distance(&p, &r).unwrap() + tv_distance(&r, &q).unwrap() + 1e-12);
            let kl = kl_divergence(&p, &q).unwrap();
            assert!(pq <= (0.5 * kl).sqrt() + 1e-12, "pinsker: tv {pq} kl {kl}");
        }
    }

    #[test]
    fn sampling_degenerate_and_deterministic() {
        let p = Policy::new(1, 2, vec![0.0, f64::NEG_INFINITY]).unwrap();
        let s = sample_group(&p, 0, 64, RngStream::new(3, 0)).unwrap();
        assert!(s.iter().all(|&y| y == 0));

        let u = Policy::uniform(1, 5);
        let a = sample_group(&u, 0, 100, RngStream::new(9, 4)).unwrap();
        let b = sample_group(&u, 0, 100, RngStream::new(9, 4)).unwrap();
        let c = sample_group(&u, 0, 100, RngStream::new(9, 5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(matches!(
            sample_group(&u, 0, 1, RngStream::new(0, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sampling_frequencies_match_uniform() {
        let u = Policy::uniform(1, 4);
        let stream = RngStream::new(2024, 7);
        let draws = sample_group(&u, 0, 4096, stream).unwrap();
        // oracle: count the same uniforms against the exact CDF by hand
        let mut rng = stream.rng();
        let mut oracle = [0usize; 4];
        for _ in 0..4096 {
            let v: f64 = rng.random();
            oracle[(v * 4.0).floor() as usize] += 1;
        }
        let mut counts = [0usize; 4];
        for y in draws {
            counts[y] += 1;
        }
        assert_eq!(counts, oracle);
        for c in counts {
            assert!((c as f64 / 4096.0 - 0.25).abs() <= 0.03);
        }
    }

    #[test]
    fn grad_log_prob_examples() {
        assert_eq!(grad_log_prob(&Policy::uniform(1, 2), 0, 0).unwrap(), vec![0.5, -0.5]);
        let sat = Policy::new(1, 2, vec![0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(grad_log_prob(&sat, 0, 0).unwrap(), vec![0.0, 0.0]);
        assert!(grad_log_prob(&sat, 0, 2).is_err());
    }

    #[test]
    fn grad_log_prob_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..50 {
            let n = rng.random_range(2..7);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = rng.random_range(0..n);
            let g = grad_log_prob(&row(&logits), 0, y).unwrap();
            for j in 0..n {
                let mut up = logits.clone();
                let mut dn = logits.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (row(&up).probs(0)[y].ln() - row(&dn).probs(0)[y].ln()) / (2.0 * h);
                let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
                assert!((fd - g[j]).abs() / scale <= 1e-6, "j={j} fd={fd} g={}", g[j]);
            }
        }
    }

    #[test]
    fn serde_keeps_neg_infinity() {
        let p = Policy::new(2, 2, vec![0.25, f64::NEG_INFINITY, -1.5, 3.0]).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let back: Policy = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);
        assert_eq!(p.logits()[1].to_bits(), back.logits()[1].to_bits());
    }

    #[test]
    fn prompt_space_validation() {
        assert!(PromptSpace::new(vec![0.5, 0.5]).is_ok());
        assert!(PromptSpace::new(vec![0.5, 0.6]).is_err());
        assert!(PromptSpace::new(vec![-0.5, 1.5]).is_err());
        assert!(PromptSpace::new(vec![]).is_err());
        assert!(ResponseSpace::new(1).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(logits in proptest::collection::vec(-20.0f64..20.0, 2..8), c in -50.0f64..50.0) {
            let a = row(&logits);
            let b = row(&logits.iter().map(|l| l + c).collect::<Vec<_>>());
            for (x, y) in a.probs(0).iter().zip(b.probs(0)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            let s: f64 = a.probs(0).iter().sum();
            prop_assert!((s - 1.0).abs() <= SIMPLEX_TOL);
        }

        #[test]
        fn grad_rows_sum_to_zero(logits in proptest::collection::vec(-10.0f64..10.0, 2..8), pick in 0usize..8) {
            let p = row(&logits);
            let y = pick % logits.len();
            let s: f64 = grad_log_prob(&p, 0, y).unwrap().iter().sum();
            prop_assert!(s.abs() <= 1e-12);
        }
    }
}
