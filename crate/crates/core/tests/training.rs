mod common;

use grpo_core::trainer::{evaluate_pass_at_1, train, BatchMode, OptimizerKind, Trainer, TrainerConfig};
use grpo_core::{Error, Execution, RngStream};

use common::*;

fn config(seed: u64) -> TrainerConfig {
    TrainerConfig {
        stages: 2,
        iterations_per_stage: 40,
        group_size: 16,
        batch_prompts: 8,
        optimizer: OptimizerKind::Adam,
        learning_rate: 0.05,
        beta: 0.01,
        seed,
        ..TrainerConfig::default()
    }
}

fn mean_staleness(seed: u64, v: usize) -> f64 {
    let (env, initial) = bandit(seed, 8, 6, 0.2, 0.6);
    let cfg = TrainerConfig {
        server_update_period: v,
        ..config(seed)
    };
    let out = train(cfg, env, initial, Execution::Parallel).unwrap();
    out.records.iter().map(|r| r.staleness_tv).sum::<f64>() / out.records.len() as f64
}

#[test]
fn staleness_grows_with_the_update_period() {
    for seed in 0..3 {
        assert_eq!(mean_staleness(seed, 1), 0.0);
        let (two, ten) = (mean_staleness(seed, 2), mean_staleness(seed, 10));
        assert!(two > 0.0);
        assert!(ten >= two, "seed {seed}: v=2 {two}, v=10 {ten}");
    }
}

#[test]
fn reference_policy_is_swapped_only_at_stage_ends() {
    let (env, initial) = bandit(4, 6, 5, 0.2, 0.6);
    let cfg = TrainerConfig {
        iterations_per_stage: 7,
        stages: 3,
        ..config(4)
    };
    let mut trainer = Trainer::new(cfg, env, initial.clone(), Execution::Parallel).unwrap();
    let mut reference = initial;
    while let Some(report) = trainer.step().unwrap() {
        let state = trainer.state();
        if report.record.iteration == 7 {
            reference = state.theta.clone();
        }
        assert_eq!(state.pi_ref, reference, "iteration {}", report.record.global_iteration);
    }
    assert_eq!(trainer.state().stage, 4);
}

#[test]
fn every_iteration_draws_fresh_samples_from_the_current_sampler() {
    let (env, initial) = bandit(5, 6, 5, 0.2, 0.6);
    let cfg = TrainerConfig {
        server_update_period: 4,
        iterations_per_stage: 10,
        stages: 2,
        ..config(5)
    };
    let mut trainer = Trainer::new(cfg, env, initial, Execution::Parallel).unwrap();
    let mut seen = Vec::new();
    while let Some(report) = trainer.step().unwrap() {
        let version = trainer.state().sampler_version;
        assert!(report.batches.iter().all(|b| b.sampler_version == version));
        seen.push(report.batches);
    }
    let state = trainer.state();
    assert_eq!(state.samples_drawn, 20);
    assert_eq!(state.inner_steps, 20);
    // two refreshes per stage of ten with v = 4
    assert_eq!(state.sampler_version, 4);
    for pair in seen.windows(2) {
        assert_ne!(
            pair[0].iter().map(|b| &b.responses).collect::<Vec<_>>(),
            pair[1].iter().map(|b| &b.responses).collect::<Vec<_>>()
        );
    }
}

#[test]
fn sample_reuse_takes_several_steps_per_batch() {
    let (env, initial) = bandit(6, 4, 5, 0.2, 0.6);
    let cfg = TrainerConfig {
        sgd_iters_per_batch: 3,
        iterations_per_stage: 5,
        stages: 1,
        ..config(6)
    };
    let out = train(cfg.clone(), env.clone(), initial.clone(), Execution::Parallel).unwrap();
    assert_eq!(out.state.samples_drawn, 5);
    assert_eq!(out.state.inner_steps, 15);

    let mixed = TrainerConfig {
        server_update_period: 2,
        ..cfg
    };
    assert!(matches!(
        Trainer::new(mixed, env, initial, Execution::Parallel),
        Err(Error::Config(_))
    ));
}

#[test]
fn sweep_mode_visits_prompts_in_order() {
    let (env, initial) = bandit(7, 5, 4, 0.2, 0.6);
    let cfg = TrainerConfig {
        batch_mode: BatchMode::Sweep,
        batch_prompts: 3,
        iterations_per_stage: 4,
        stages: 1,
        ..config(7)
    };
    let mut trainer = Trainer::new(cfg, env, initial, Execution::Parallel).unwrap();
    let mut order = Vec::new();
    while let Some(report) = trainer.step().unwrap() {
        order.extend(report.batches.iter().map(|b| b.prompt));
    }
    assert_eq!(order, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1]);
}

#[test]
fn training_is_identical_across_execution_modes() {
    let (env, initial) = bandit(8, 6, 5, 0.2, 0.6);
    let cfg = TrainerConfig {
        server_update_period: 3,
        ..config(8)
    };
    let a = train(cfg.clone(), env.clone(), initial.clone(), Execution::Parallel).unwrap();
    let b = train(cfg, env, initial, Execution::Sequential).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.policy, b.policy);
}

#[test]
fn pass_at_one_estimate_tracks_the_exact_value() {
    let (env, initial) = bandit(9, 6, 5, 0.2, 0.6);
    let out = train(config(9), env.clone(), initial, Execution::Parallel).unwrap();
    let p = evaluate_pass_at_1(&out.policy, &env, 4000, RngStream::new(1, 0), Execution::Parallel).unwrap();
    assert!(p.binary);
    assert!((p.mean - p.exact_mean).abs() < 0.03, "{} vs {}", p.mean, p.exact_mean);
    let again = evaluate_pass_at_1(&out.policy, &env, 4000, RngStream::new(1, 0), Execution::Sequential).unwrap();
    assert_eq!(p, again);
    let exact = env.mean_reward(&out.policy).unwrap();
    assert!((p.exact_mean - exact).abs() < 1e-12);
}
