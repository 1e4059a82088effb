mod common;

use common::positive_uplift_fraction;
use grpo_lab::config::{Preset, RunConfig, Seeds};
use grpo_lab::grpo::{self, collect_step, group_advantages, update_cycle, NullSink};
use grpo_lab::metrics::exact_pass_at_n;
use grpo_lab::optim::Adam;
use grpo_lab::record::Phase;
use grpo_lab::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn short_config(preset: Preset, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::for_preset(preset);
    cfg.seeds = Seeds::from_base(5);
    cfg.train.num_steps = steps;
    cfg.eval.every = 5;
    cfg.eval.num_states = 50;
    cfg.eval.n_max = 64;
    cfg
}

#[test]
fn buffer_holds_only_mixed_groups() {
    let cfg = RunConfig::default();
    let env = cfg.build_env().unwrap();
    let policy = cfg.build_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let buffer = collect_step(&env, &policy, &cfg.train, &mut rng).unwrap();

    assert!(buffer.len() >= cfg.train.buffer_target);
    assert!(buffer.groups.len() >= cfg.train.buffer_target / cfg.train.group_size);
    assert_eq!(buffer.len(), buffer.groups.len() * cfg.train.group_size);
    assert!(buffer.stats.groups_sampled >= buffer.stats.groups_admitted);
    for g in &buffer.groups {
        assert!(g.raw_rewards.contains(&0) && g.raw_rewards.contains(&1));
        let dist = policy.forward(&g.state);
        for (a, lp) in g.actions.iter().zip(&g.old_log_probs) {
            assert_eq!(dist.log_prob(*a), *lp);
        }
    }
    for s in &buffer.samples {
        let g = &buffer.groups[s.state];
        let i = g
            .actions
            .iter()
            .zip(&g.advantages)
            .position(|(a, adv)| *a == s.action && *adv == s.advantage);
        assert!(i.is_some());
    }
}

#[test]
fn shaped_groups_are_renormalized() {
    let mut cfg = RunConfig::for_preset(Preset::Unlikeliness1);
    cfg.seeds = Seeds::from_base(2);
    let env = cfg.build_env().unwrap();
    let policy = cfg.build_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let buffer = collect_step(&env, &policy, &cfg.train, &mut rng).unwrap();
    for g in &buffer.groups {
        assert_eq!(
            group_advantages(&g.perturbed_rewards).unwrap(),
            g.advantages
        );
        for ((&raw, &shaped), &rank) in g.raw_rewards.iter().zip(&g.perturbed_rewards).zip(&g.ranks)
        {
            let g_len = g.actions.len() as f64;
            let expected = f64::from(raw) * (1.0 - 0.25 * (g_len - rank as f64) / g_len);
            assert_eq!(shaped, expected);
        }
    }
}

#[test]
fn optimizer_steps_scale_with_epochs() {
    let cfg = RunConfig::default();
    let env = cfg.build_env().unwrap();
    let reference = cfg.build_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let buffer = collect_step(&env, &reference, &cfg.train, &mut rng).unwrap();
    assert_eq!(buffer.len(), 256);
    for (k, expected) in [(1, 4), (3, 12)] {
        let mut tc = cfg.train.clone();
        tc.ppo_epochs = k;
        let mut policy = reference.clone();
        let mut adam = Adam::new(cfg.optimizer, policy.num_params());
        let t = update_cycle(&mut policy, &mut adam, &buffer, &reference, &tc, &mut rng).unwrap();
        assert_eq!(t.optimizer_steps, expected);
        assert_eq!(adam.steps_taken() as usize, expected);
        assert_eq!(t.epochs.len(), k);
        assert_ne!(policy, reference);
    }
}

#[test]
fn repeated_epochs_drive_samples_into_the_clip_region() {
    let cfg = RunConfig::default();
    let env = cfg.build_env().unwrap();
    let reference = cfg.build_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let buffer = collect_step(&env, &reference, &cfg.train, &mut rng).unwrap();
    let mut tc = cfg.train.clone();
    tc.ppo_epochs = 20;
    let mut policy = reference.clone();
    let mut adam = Adam::new(cfg.optimizer, policy.num_params());
    let t = update_cycle(&mut policy, &mut adam, &buffer, &reference, &tc, &mut rng).unwrap();
    assert!(t.epochs[0].clipped_fraction < t.epochs[19].clipped_fraction);
    assert!(t.epochs[19].clipped_fraction > 0.2, "{:?}", t.epochs[19]);
}

#[test]
fn more_epochs_uplift_more_positive_samples() {
    let f = positive_uplift_fraction(1, 0.10, &[1, 2]);
    assert!(f[1] > f[0], "{f:?}");
}

#[test]
fn solved_environment_reports_vanished_signal() {
    let mut cfg = RunConfig::default();
    cfg.train.train_tau = -1e9;
    let env = cfg.build_env().unwrap();
    let policy = cfg.build_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = collect_step(&env, &policy, &cfg.train, &mut rng).unwrap_err();
    assert!(matches!(err, Error::SignalVanished(10_000)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn training_is_deterministic() {
    let cfg = short_config(Preset::Unlikeliness2, 6);
    let a = grpo::train(&cfg, &mut NullSink).unwrap();
    let b = grpo::train(&cfg, &mut NullSink).unwrap();
    assert_eq!(a.policy, b.policy);
    let lines = |o: &grpo::TrainOutcome| {
        o.records
            .iter()
            .map(|r| r.to_json_line())
            .collect::<Vec<_>>()
    };
    assert_eq!(lines(&a), lines(&b));
}

#[test]
fn zero_steps_returns_the_initial_policy() {
    let cfg = short_config(Preset::Default, 0);
    let out = grpo::train(&cfg, &mut NullSink).unwrap();
    assert_eq!(out.policy, out.initial);
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].phase, Phase::Eval);
    assert_eq!(out.records[0].step, 0);
}

#[test]
fn records_follow_the_evaluation_schedule() {
    let cfg = short_config(Preset::Default, 12);
    let out = grpo::train(&cfg, &mut NullSink).unwrap();
    let eval_steps: Vec<usize> = out.eval_records().map(|r| r.step).collect();
    assert_eq!(eval_steps, vec![0, 5, 10, 12]);
    let train_steps: Vec<usize> = out
        .records
        .iter()
        .filter(|r| r.phase == Phase::Train)
        .map(|r| r.step)
        .collect();
    assert_eq!(train_steps, (1..=12).collect::<Vec<_>>());
    for r in out.records.iter().filter(|r| r.phase == Phase::Train) {
        assert_eq!(r.get("optimizer_steps"), Some(4.0));
        assert!(r.get("kl").unwrap() >= 0.0);
    }
    for r in out.eval_records() {
        assert_eq!(r.pass_at_n.len(), 15);
    }
}

#[test]
fn exact_pass_is_monotone_in_n_and_tau() {
    let cfg = RunConfig::default();
    let env = cfg.build_env().unwrap();
    let policy = cfg.build_policy();
    let states = env.eval_states(40, 9);
    let taus = [-1.0, 0.0, 1.0, 2.5, 4.0, 5.0, 8.0];
    let ns = [1, 2, 4, 8, 16, 32, 64, 512];
    for &tau in &taus {
        let curve: Vec<f64> = ns
            .iter()
            .map(|&n| exact_pass_at_n(&env, &policy, &states, tau, n))
            .collect();
        assert!(
            curve.windows(2).all(|w| w[0] <= w[1]),
            "tau {tau}: {curve:?}"
        );
    }
    for &n in &ns {
        let curve: Vec<f64> = taus
            .iter()
            .map(|&t| exact_pass_at_n(&env, &policy, &states, t, n))
            .collect();
        assert!(curve.windows(2).all(|w| w[0] >= w[1]), "n {n}: {curve:?}");
    }
}
