//! Group-relative policy optimization.
//!
//! One training step samples groups of actions from the frozen policy,
//! keeps only groups whose verifier rewards are mixed, optionally reshapes
//! the rewards of correct samples by their probability rank, normalizes
//! advantages per group, and then runs `ppo_epochs` passes of clipped
//! updates over the collected buffer.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{Action, EnvSpec};
use crate::error::{Error, Result};
use crate::metrics::Evaluator;
use crate::optim::Adam;
use crate::policy::{self, ClipObjective, PolicyParams, TrainSample};
use crate::record::{MetricsRecord, Phase};

/// Consecutive zero-variance groups after which collection gives up.
pub const MAX_CONSECUTIVE_SKIPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub rank_coef: Option<f64>,
    pub ppo_epochs: usize,
    pub buffer_target: usize,
    pub minibatch_size: usize,
    pub train_tau: f64,
    pub num_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 32,
            clip_eps: 0.2,
            kl_coef: 0.02,
            rank_coef: None,
            ppo_epochs: 1,
            buffer_target: 256,
            minibatch_size: 64,
            train_tau: 1.0,
            num_steps: 200,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ClipObjective {
        ClipObjective {
            clip_eps: self.clip_eps,
            kl_coef: self.kl_coef,
        }
    }

    /// Returns every violated constraint, keyed by field name.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.group_size < 2 {
            bad.push(format!(
                "train.group_size = {} (must be >= 2)",
                self.group_size
            ));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            bad.push(format!(
                "train.clip_eps = {} (must be in (0, 1))",
                self.clip_eps
            ));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            bad.push(format!(
                "train.kl_coef = {} (must be finite and >= 0)",
                self.kl_coef
            ));
        }
        if let Some(r) = self.rank_coef {
            if !(0.0..1.0).contains(&r) {
                bad.push(format!("train.rank_coef = {r} (must be in [0, 1))"));
            }
        }
        if self.ppo_epochs < 1 {
            bad.push("train.ppo_epochs = 0 (must be >= 1)".into());
        }
        if self.minibatch_size < 1 {
            bad.push("train.minibatch_size = 0 (must be >= 1)".into());
        }
        if self.buffer_target < self.minibatch_size {
            bad.push(format!(
                "train.buffer_target = {} (must be >= minibatch_size {})",
                self.buffer_target, self.minibatch_size
            ));
        }
        if !self.train_tau.is_finite() {
            bad.push(format!(
                "train.train_tau = {} (must be finite)",
                self.train_tau
            ));
        }
        bad
    }
}

/// Population-normalized group advantages, or `None` when every reward is equal.
pub fn group_advantages(rewards: &[f64]) -> Option<Vec<f64>> {
    let first = *rewards.first()?;
    if rewards.iter().all(|&r| r == first) {
        return None;
    }
    // Normalizing by the largest magnitude first makes positive rescaling of
    // two-level rewards bit-exact.
    let scale = rewards.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let scaled: Vec<f64> = rewards.iter().map(|r| r / scale).collect();
    let n = scaled.len() as f64;
    let mean = scaled.iter().sum::<f64>() / n;
    let std = (scaled.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Some(scaled.iter().map(|r| (r - mean) / std).collect())
}

/// Ranks `1..=G` by descending log-probability; ties keep index order.
pub fn rank_group(log_probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..log_probs.len()).collect();
    order.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]));
    let mut ranks = vec![0; log_probs.len()];
    for (pos, idx) in order.into_iter().enumerate() {
        ranks[idx] = pos + 1;
    }
    ranks
}

/// `r_i = R_i (1 - rank_coef (G - rank_i) / G)`.
pub fn unlikeliness_rewards(raw_rewards: &[f64], ranks: &[usize], rank_coef: f64) -> Vec<f64> {
    let g = raw_rewards.len() as f64;
    raw_rewards
        .iter()
        .zip(ranks)
        .map(|(&r, &rank)| {
            if r == 0.0 {
                0.0
            } else {
                r * (1.0 - rank_coef * (g - rank as f64) / g)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleGroup {
    pub state: Vec<f64>,
    pub actions: Vec<Action>,
    pub raw_rewards: Vec<u8>,
    pub old_log_probs: Vec<f64>,
    pub ranks: Vec<usize>,
    pub perturbed_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CollectStats {
    pub groups_sampled: usize,
    pub groups_admitted: usize,
    /// Distinct actions per sampled group, averaged over every group drawn.
    pub mean_unique_actions: f64,
}

/// Admitted groups plus the flattened per-sample view used by the optimizer.
#[derive(Debug, Clone)]
pub struct SampleBuffer {
    pub groups: Vec<SampleGroup>,
    /// `TrainSample::state` indexes into `groups`.
    pub samples: Vec<TrainSample>,
    pub stats: CollectStats,
}

impl SampleBuffer {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn states(&self) -> Vec<&[f64]> {
        self.groups.iter().map(|g| g.state.as_slice()).collect()
    }

    /// Clears the buffer after an update cycle.
    pub fn clear(&mut self) {
        self.groups.clear();
        self.samples.clear();
    }
}

/// Fills a buffer of at least `buffer_target` samples from mixed-reward groups.
///
/// `sampling_policy` plays the role of the frozen old policy: its
/// log-probabilities are recorded with each sample.
pub fn collect_step<R: rand::Rng + ?Sized>(
    env: &EnvSpec,
    sampling_policy: &PolicyParams,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<SampleBuffer> {
    let g = config.group_size;
    let mut groups = Vec::new();
    let mut samples = Vec::new();
    let mut sampled = 0usize;
    let mut unique_total = 0usize;
    let mut consecutive_skips = 0usize;

    while samples.len() < config.buffer_target {
        let state = env.sample_state(rng);
        let dist = sampling_policy.forward(&state);
        let sampler = dist.sampler();
        let actions: Vec<Action> = (0..g).map(|_| sampler.sample(rng)).collect();
        let scores = env.scores(&state);
        let raw_rewards: Vec<u8> = actions
            .iter()
            .map(|a| u8::from(scores[a.index()] >= config.train_tau))
            .collect();
        sampled += 1;
        unique_total += actions.iter().collect::<BTreeSet<_>>().len();

        let raw: Vec<f64> = raw_rewards.iter().map(|&r| f64::from(r)).collect();
        if group_advantages(&raw).is_none() {
            consecutive_skips += 1;
            if consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                return Err(Error::SignalVanished(consecutive_skips));
            }
            continue;
        }
        consecutive_skips = 0;

        let old_log_probs: Vec<f64> = actions.iter().map(|&a| dist.log_prob(a)).collect();
        let ranks = rank_group(&old_log_probs);
        let perturbed_rewards = match config.rank_coef {
            Some(beta) => unlikeliness_rewards(&raw, &ranks, beta),
            None => raw.clone(),
        };
        let advantages =
            group_advantages(&perturbed_rewards).expect("perturbation keeps a mixed group mixed");

        let group_idx = groups.len();
        samples.extend(actions.iter().zip(&old_log_probs).zip(&advantages).map(
            |((&action, &old_log_prob), &advantage)| TrainSample {
                state: group_idx,
                action,
                old_log_prob,
                advantage,
            },
        ));
        groups.push(SampleGroup {
            state,
            actions,
            raw_rewards,
            old_log_probs,
            ranks,
            perturbed_rewards,
            advantages,
        });
    }

    Ok(SampleBuffer {
        stats: CollectStats {
            groups_sampled: sampled,
            groups_admitted: groups.len(),
            mean_unique_actions: unique_total as f64 / sampled as f64,
        },
        groups,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTelemetry {
    pub objective: f64,
    pub kl: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    pub clipped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateTelemetry {
    pub epochs: Vec<EpochTelemetry>,
    pub optimizer_steps: usize,
}

/// `ppo_epochs` shuffled passes over the buffer, one optimizer step per minibatch.
///
/// Telemetry is measured on each minibatch before its step; the old
/// log-probabilities stay frozen for every epoch.
pub fn update_cycle<R: rand::Rng + ?Sized>(
    policy: &mut PolicyParams,
    optimizer: &mut Adam,
    buffer: &SampleBuffer,
    reference: &PolicyParams,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<UpdateTelemetry> {
    let states = buffer.states();
    let objective = config.objective();
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut epochs = Vec::with_capacity(config.ppo_epochs);
    let mut steps = 0;

    for _ in 0..config.ppo_epochs {
        order.shuffle(rng);
        let mut obj_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut ratio_sum = 0.0;
        let mut ratio_max = f64::NEG_INFINITY;
        let mut clipped = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(config.minibatch_size) {
            let minibatch: Vec<TrainSample> = chunk.iter().map(|&i| buffer.samples[i]).collect();
            let eval =
                policy::objective_gradient(policy, reference, &states, &minibatch, &objective)?;
            obj_sum += eval.value;
            kl_sum += eval.kl;
            for t in &eval.terms {
                ratio_sum += t.ratio;
                ratio_max = ratio_max.max(t.ratio);
                clipped += usize::from(t.clipped(config.clip_eps));
            }
            batches += 1;
            optimizer.ascend(policy, &eval.gradient);
            steps += 1;
            if !policy.is_finite() {
                return Err(Error::TrainingFault(format!(
                    "non-finite parameter after optimizer step {steps}"
                )));
            }
        }
        let n = buffer.len() as f64;
        epochs.push(EpochTelemetry {
            objective: obj_sum / batches as f64,
            kl: kl_sum / batches as f64,
            mean_ratio: ratio_sum / n,
            max_ratio: ratio_max,
            clipped_fraction: clipped as f64 / n,
        });
    }
    Ok(UpdateTelemetry {
        epochs,
        optimizer_steps: steps,
    })
}

/// Receives metrics and checkpoints as training proceeds.
pub trait RunSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;
    fn checkpoint(&mut self, step: usize, policy: &PolicyParams) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl RunSink for NullSink {
    fn record(&mut self, _: &MetricsRecord) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _: usize, _: &PolicyParams) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub env: EnvSpec,
    pub initial: PolicyParams,
    pub policy: PolicyParams,
    pub records: Vec<MetricsRecord>,
}

impl TrainOutcome {
    pub fn eval_records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Eval)
    }
}

/// Runs a full training job: reference snapshot, then `num_steps` of
/// collect + update, with evaluations at step 0, every `eval.every` steps,
/// and at the final step.
pub fn train(config: &RunConfig, sink: &mut dyn RunSink) -> Result<TrainOutcome> {
    config.validate()?;
    let env = config.build_env()?;
    let initial = config.build_policy();
    let reference = initial.clone();
    let mut policy = initial.clone();
    let mut optimizer = Adam::new(config.optimizer, policy.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.train);
    let evaluator = Evaluator::new(&env, &config.eval, config.seeds.eval)?;
    let hash = config.hash();
    let tc = &config.train;
    let mut records = Vec::new();

    let mut emit = |rec: MetricsRecord, sink: &mut dyn RunSink| -> Result<()> {
        rec.check_finite()?;
        sink.record(&rec)?;
        records.push(rec);
        Ok(())
    };

    sink.checkpoint(0, &policy)?;
    emit(evaluator.evaluate(&policy, 0, &hash)?, sink)?;

    for step in 1..=tc.num_steps {
        let mut buffer = collect_step(&env, &policy, tc, &mut rng)?;
        let telemetry = update_cycle(
            &mut policy,
            &mut optimizer,
            &buffer,
            &reference,
            tc,
            &mut rng,
        )?;
        buffer.clear();
        emit(train_record(step, &hash, &buffer.stats, &telemetry), sink)?;

        if step % config.eval.every == 0 || step == tc.num_steps {
            emit(evaluator.evaluate(&policy, step, &hash)?, sink)?;
            sink.checkpoint(step, &policy)?;
        }
    }

    Ok(TrainOutcome {
        env,
        initial,
        policy,
        records,
    })
}

fn train_record(
    step: usize,
    hash: &str,
    stats: &CollectStats,
    telemetry: &UpdateTelemetry,
) -> MetricsRecord {
    let k = telemetry.epochs.len() as f64;
    let avg = |f: fn(&EpochTelemetry) -> f64| telemetry.epochs.iter().map(f).sum::<f64>() / k;
    let last = telemetry.epochs.last().expect("at least one epoch");
    let mut rec = MetricsRecord::new(step, Phase::Train, hash);
    rec.scalar("objective", avg(|e| e.objective))
        .scalar("kl", avg(|e| e.kl))
        .scalar("mean_ratio", avg(|e| e.mean_ratio))
        .scalar(
            "max_ratio",
            telemetry
                .epochs
                .iter()
                .map(|e| e.max_ratio)
                .fold(f64::NEG_INFINITY, f64::max),
        )
        .scalar("clipped_fraction", avg(|e| e.clipped_fraction))
        .scalar("final_epoch_clipped_fraction", last.clipped_fraction)
        .scalar("unique_actions", stats.mean_unique_actions)
        .scalar("groups_sampled", stats.groups_sampled as f64)
        .scalar("groups_admitted", stats.groups_admitted as f64)
        .scalar("optimizer_steps", telemetry.optimizer_steps as f64);
    rec
}
