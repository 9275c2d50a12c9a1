//! Group Relative Policy Optimization on finite prompt and response spaces.
//!
//! Every quantity is computed exactly over an enumerated response grid, so the
//! on-policy and off-policy GRPO objectives, their clipped and KL-regularized
//! variants, and the policy-improvement lower bounds can be evaluated without
//! Monte-Carlo error. Sampling is only used where the algorithm samples: group
//! draws inside the trainer and Pass@1 evaluation.
//!
//! Module map:
//!
//! - [`policy`]: logit-table policies, TV and KL, group sampling, score function
//! - [`reward`]: bounded reward tables and scenario generators
//! - [`advantage`]: exact and group-estimated whitened rewards
//! - [`surrogate`]: plain, clipped, KL-regularized and zero-variance-masked objectives
//! - [`bounds`]: improvement lower bounds, variance factor, counterexample search
//! - [`trainer`]: iterative GRPO with `(v, i)` staleness/reuse knobs
//! - [`harness`]: config ingestion, metrics files, SVG plots, run comparison

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod bounds;
pub mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod surrogate;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use policy::{Policy, PromptSpace, ResponseSpace, RngStream};
pub use reward::RewardModel;
