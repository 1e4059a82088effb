//! Shared fixtures for the integration tests and the acceptance runner.
#![allow(dead_code)]

use grpo_lab::config::{Preset, RunConfig, Seeds};
use grpo_lab::env::Action;
use grpo_lab::grpo::{self, collect_step, update_cycle, NullSink, TrainConfig};
use grpo_lab::optim::Adam;
use grpo_lab::policy::{objective_gradient, ClipObjective, PolicyParams, TrainSample};
use grpo_lab::run::uplift_on_eval_states;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct GradientInstance {
    pub policy: PolicyParams,
    pub reference: PolicyParams,
    pub states: Vec<Vec<f64>>,
    pub samples: Vec<TrainSample>,
    pub objective: ClipObjective,
}

const STATE_DIM: usize = 4;
const ACTIONS: usize = 8;
const HIDDEN: usize = 5;
const SAMPLES: usize = 6;
const KINK_MARGIN: f64 = 1e-3;

fn perturbed(seed: u64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut p = PolicyParams::init(STATE_DIM, ACTIONS, HIDDEN, seed);
    for v in p.values_mut() {
        *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    p
}

/// A random small instance whose sample ratios all sit away from the clip
/// boundaries, where the objective is differentiable.
pub fn gradient_instance(seed: u64) -> GradientInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let policy = perturbed(rng.random(), &mut rng);
        let reference = perturbed(rng.random(), &mut rng);
        let num_states = rng.random_range(1..=3);
        let states: Vec<Vec<f64>> = (0..num_states)
            .map(|_| (0..STATE_DIM).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let objective = ClipObjective {
            clip_eps: 0.2,
            kl_coef: rng.random_range(0.0..0.3),
        };
        let samples: Vec<TrainSample> = (0..SAMPLES)
            .map(|_| {
                let state = rng.random_range(0..num_states);
                let action = Action::from_index(rng.random_range(0..ACTIONS));
                let log_prob = policy.forward(&states[state]).log_prob(action);
                TrainSample {
                    state,
                    action,
                    old_log_prob: log_prob + rng.random_range(-0.4..0.4),
                    advantage: rng.sample(StandardNormal),
                }
            })
            .collect();
        let near_kink = samples.iter().any(|s| {
            let ratio =
                (policy.forward(&states[s.state]).log_prob(s.action) - s.old_log_prob).exp();
            [1.0 - objective.clip_eps, 1.0 + objective.clip_eps]
                .iter()
                .any(|b| (ratio - b).abs() < KINK_MARGIN)
        });
        if !near_kink {
            return GradientInstance {
                policy,
                reference,
                states,
                samples,
                objective,
            };
        }
    }
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every coordinate.
pub fn gradient_max_rel_error(inst: &GradientInstance, h: f64) -> f64 {
    let value = |p: &PolicyParams| {
        objective_gradient(
            p,
            &inst.reference,
            &inst.states,
            &inst.samples,
            &inst.objective,
        )
        .unwrap()
        .value
    };
    let analytic = objective_gradient(
        &inst.policy,
        &inst.reference,
        &inst.states,
        &inst.samples,
        &inst.objective,
    )
    .unwrap()
    .gradient;
    let analytic: Vec<f64> = analytic.values().copied().collect();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = inst.policy.clone();
        let mut minus = inst.policy.clone();
        *plus.values_mut().nth(i).unwrap() += h;
        *minus.values_mut().nth(i).unwrap() -= h;
        let fd = (value(&plus) - value(&minus)) / (2.0 * h);
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

pub fn binary_rewards(bits: &[bool]) -> Vec<f64> {
    bits.iter().map(|&b| f64::from(u8::from(b))).collect()
}

/// Headline numbers of one full training run.
#[derive(Debug, Clone, Copy)]
pub struct RunSummary {
    pub pass1_tau1_start: f64,
    pub pass1_tau1_end: f64,
    pub pass32_tau5_start: f64,
    pub pass32_tau5_end: f64,
    pub entropy_end: f64,
    pub uplift_trend: f64,
}

pub fn acceptance_config(preset: Preset, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::for_preset(preset);
    cfg.seeds = Seeds::from_base(seed);
    cfg.eval.every = cfg.train.num_steps;
    cfg
}

pub fn run_summary(preset: Preset, seed: u64) -> RunSummary {
    let cfg = acceptance_config(preset, seed);
    let out = grpo::train(&cfg, &mut NullSink).expect("training succeeds");
    let evals: Vec<_> = out.eval_records().collect();
    let (first, last) = (evals[0], evals[evals.len() - 1]);
    assert_eq!(first.step, 0);
    assert_eq!(last.step, cfg.train.num_steps);
    let cell = |r: &grpo_lab::record::MetricsRecord, tau: f64, n: usize| {
        r.pass_cell(tau, n).unwrap().exact
    };
    let report = uplift_on_eval_states(
        &out.env,
        &out.initial,
        &out.policy,
        cfg.train.group_size,
        cfg.eval.uplift_tau,
        cfg.eval.num_states,
        cfg.seeds.eval,
    );
    RunSummary {
        pass1_tau1_start: cell(first, 1.0, 1),
        pass1_tau1_end: cell(last, 1.0, 1),
        pass32_tau5_start: cell(first, 5.0, 32),
        pass32_tau5_end: cell(last, 5.0, 32),
        entropy_end: last.get("entropy").unwrap(),
        uplift_trend: report.trend(),
    }
}

/// Fraction of positive-advantage samples whose probability rose after one
/// update cycle with `ppo_epochs`, starting from the initial policy of `seed`
/// on a buffer collected once and shared across calls.
pub fn positive_uplift_fraction(seed: u64, kl_coef: f64, epoch_counts: &[usize]) -> Vec<f64> {
    let mut cfg = RunConfig {
        seeds: Seeds::from_base(seed),
        ..RunConfig::default()
    };
    cfg.train.kl_coef = kl_coef;
    let env = cfg.build_env().unwrap();
    let initial = cfg.build_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.train);
    let buffer = collect_step(&env, &initial, &cfg.train, &mut rng).unwrap();

    epoch_counts
        .iter()
        .map(|&k| {
            let tc = TrainConfig {
                ppo_epochs: k,
                ..cfg.train.clone()
            };
            let mut policy = initial.clone();
            let mut adam = Adam::new(cfg.optimizer, policy.num_params());
            let mut update_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.train ^ 0x5eed);
            update_cycle(
                &mut policy,
                &mut adam,
                &buffer,
                &initial,
                &tc,
                &mut update_rng,
            )
            .unwrap();
            let (mut positive, mut increased) = (0usize, 0usize);
            for s in buffer.samples.iter().filter(|s| s.advantage > 0.0) {
                let state = &buffer.groups[s.state].state;
                positive += 1;
                if policy.forward(state).log_prob(s.action)
                    > initial.forward(state).log_prob(s.action)
                {
                    increased += 1;
                }
            }
            increased as f64 / positive as f64
        })
        .collect()
}
