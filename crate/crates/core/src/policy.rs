//! Two-layer tanh MLP policy over a discrete action set.
//!
//! Besides the forward pass this module owns the clipped-surrogate objective
//! and its exact gradient, derived by hand for this fixed architecture.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::Action;
use crate::error::{Error, Result};

/// Weights of `logits = W2 tanh(W1 s + b1) + b2`. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    state_dim: usize,
    hidden_dim: usize,
    num_actions: usize,
    /// `hidden_dim x state_dim`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `num_actions x hidden_dim`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl PolicyParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
    pub fn init(state_dim: usize, num_actions: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(state_dim, num_actions, hidden_dim);
        let bound1 = 1.0 / (state_dim as f64).sqrt();
        let bound2 = 1.0 / (hidden_dim as f64).sqrt();
        p.w1.iter_mut()
            .for_each(|w| *w = rng.random_range(-bound1..bound1));
        p.w2.iter_mut()
            .for_each(|w| *w = rng.random_range(-bound2..bound2));
        p
    }

    pub fn zeros(state_dim: usize, num_actions: usize, hidden_dim: usize) -> Self {
        PolicyParams {
            state_dim,
            hidden_dim,
            num_actions,
            w1: vec![0.0; hidden_dim * state_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; num_actions * hidden_dim],
            b2: vec![0.0; num_actions],
        }
    }

    /// Rebuilds parameters from their flat layout (`w1, b1, w2, b2`).
    pub fn from_flat(
        state_dim: usize,
        num_actions: usize,
        hidden_dim: usize,
        values: &[f64],
    ) -> Result<Self> {
        let mut p = Self::zeros(state_dim, num_actions, hidden_dim);
        if values.len() != p.num_params() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                p.num_params(),
                values.len()
            )));
        }
        p.values_mut()
            .zip(values)
            .for_each(|(dst, src)| *dst = *src);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.state_dim, self.num_actions, self.hidden_dim)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.state_dim == other.state_dim
            && self.hidden_dim == other.hidden_dim
            && self.num_actions == other.num_actions
    }

    pub fn forward(&self, state: &[f64]) -> ActionDistribution {
        self.forward_with_hidden(state).1
    }

    fn forward_with_hidden(&self, state: &[f64]) -> (Vec<f64>, ActionDistribution) {
        debug_assert_eq!(state.len(), self.state_dim);
        let hidden: Vec<f64> = self
            .w1
            .chunks_exact(self.state_dim)
            .zip(&self.b1)
            .map(|(row, b)| (crate::env::dot(row, state) + b).tanh())
            .collect();
        let logits: Vec<f64> = self
            .w2
            .chunks_exact(self.hidden_dim)
            .zip(&self.b2)
            .map(|(row, b)| crate::env::dot(row, &hidden) + b)
            .collect();
        (hidden, ActionDistribution::from_logits(&logits))
    }

    /// Accumulates the gradient of `sum_k dlogits[k] * logit_k` at `state` into `grad`.
    fn backprop(&self, state: &[f64], hidden: &[f64], dlogits: &[f64], grad: &mut PolicyParams) {
        let mut dhidden = vec![0.0; self.hidden_dim];
        for (k, &dl) in dlogits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            grad.b2[k] += dl;
            let row = k * self.hidden_dim;
            for j in 0..self.hidden_dim {
                grad.w2[row + j] += dl * hidden[j];
                dhidden[j] += dl * self.w2[row + j];
            }
        }
        for j in 0..self.hidden_dim {
            let dpre = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
            grad.b1[j] += dpre;
            let row = j * self.state_dim;
            for (i, s) in state.iter().enumerate() {
                grad.w1[row + i] += dpre * s;
            }
        }
    }
}

/// A categorical distribution over actions, kept in both linear and log space.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ActionDistribution {
    /// Max-shifted softmax; log-probs via log-sum-exp.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = shifted.iter().sum();
        let log_total = total.ln();
        let probs = shifted.iter().map(|e| e / total).collect();
        let log_probs = logits.iter().map(|l| (l - max) - log_total).collect();
        ActionDistribution { probs, log_probs }
    }

    /// Builds a distribution from explicit probabilities (zeros allowed).
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        ActionDistribution { probs, log_probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn num_actions(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, action: Action) -> f64 {
        self.probs[action.index()]
    }

    pub fn log_prob(&self, action: Action) -> f64 {
        self.log_probs[action.index()]
    }

    /// Shannon entropy in nats, with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| p * lp)
            .sum::<f64>()
    }

    /// Exact `KL(self || other)` over the action set.
    pub fn kl_divergence(&self, other: &ActionDistribution) -> f64 {
        debug_assert_eq!(self.num_actions(), other.num_actions());
        let kl: f64 = self
            .probs
            .iter()
            .zip(&self.log_probs)
            .zip(&other.log_probs)
            .filter(|((p, _), _)| **p > 0.0)
            .map(|((p, lp), lq)| p * (lp - lq))
            .sum();
        kl.max(0.0)
    }

    /// Inverse-CDF sampler over this distribution.
    pub fn sampler(&self) -> ActionSampler {
        let mut acc = 0.0;
        let cdf = self
            .probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        ActionSampler { cdf }
    }
}

pub struct ActionSampler {
    cdf: Vec<f64>,
}

impl ActionSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        let total = *self.cdf.last().expect("non-empty action set");
        let u = rng.random::<f64>() * total;
        let idx = self.cdf.partition_point(|&c| c <= u);
        Action::from_index(idx.min(self.cdf.len() - 1))
    }
}

/// `group_size` i.i.d. draws from the policy at `state`.
pub fn sample_actions<R: Rng + ?Sized>(
    policy: &PolicyParams,
    state: &[f64],
    group_size: usize,
    rng: &mut R,
) -> Vec<Action> {
    let sampler = policy.forward(state).sampler();
    (0..group_size).map(|_| sampler.sample(rng)).collect()
}

/// Clip width and KL weight for the surrogate objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipObjective {
    pub clip_eps: f64,
    pub kl_coef: f64,
}

/// One action taken at `states[state]`, with its sampling-time log-prob and advantage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSample {
    pub state: usize,
    pub action: Action,
    pub old_log_prob: f64,
    pub advantage: f64,
}

/// Per-sample view of the surrogate at the evaluated parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTerm {
    pub ratio: f64,
    pub surrogate: f64,
    /// `d objective / d log pi(a|s)`; exactly zero when the clipped branch is active.
    pub log_prob_weight: f64,
}

impl SampleTerm {
    pub fn clipped(&self, clip_eps: f64) -> bool {
        self.ratio < 1.0 - clip_eps || self.ratio > 1.0 + clip_eps
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    /// Surrogate mean minus `kl_coef` times the state-averaged KL.
    pub value: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub terms: Vec<SampleTerm>,
    pub gradient: PolicyParams,
}

impl ObjectiveEval {
    pub fn mean_ratio(&self) -> f64 {
        self.terms.iter().map(|t| t.ratio).sum::<f64>() / self.terms.len() as f64
    }

    pub fn max_ratio(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.ratio)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn clipped_fraction(&self, clip_eps: f64) -> f64 {
        let n = self.terms.iter().filter(|t| t.clipped(clip_eps)).count();
        n as f64 / self.terms.len() as f64
    }
}

/// Clipped surrogate and the weight it places on `log pi(a|s)`.
///
/// Ties between the two branches resolve to the unclipped one.
pub fn surrogate_term(
    log_prob: f64,
    sample: &TrainSample,
    clip_eps: f64,
    batch_len: usize,
) -> SampleTerm {
    let ratio = (log_prob - sample.old_log_prob).exp();
    let unclipped = ratio * sample.advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * sample.advantage;
    if unclipped <= clipped {
        SampleTerm {
            ratio,
            surrogate: unclipped,
            log_prob_weight: unclipped / batch_len as f64,
        }
    } else {
        SampleTerm {
            ratio,
            surrogate: clipped,
            log_prob_weight: 0.0,
        }
    }
}

/// Objective value and exact gradient over a minibatch.
///
/// The surrogate is averaged over samples; the KL penalty against `reference`
/// is computed exactly per distinct state and averaged over those states.
pub fn objective_gradient<S: AsRef<[f64]>>(
    policy: &PolicyParams,
    reference: &PolicyParams,
    states: &[S],
    samples: &[TrainSample],
    objective: &ClipObjective,
) -> Result<ObjectiveEval> {
    if samples.is_empty() {
        return Err(Error::Usage("empty minibatch".into()));
    }
    let mut by_state: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_state.entry(s.state).or_default().push(i);
    }
    let n = samples.len();
    let num_states = by_state.len() as f64;
    let mut gradient = policy.zeros_like();
    let mut terms = vec![
        SampleTerm {
            ratio: f64::NAN,
            surrogate: 0.0,
            log_prob_weight: 0.0
        };
        n
    ];
    let mut kl_total = 0.0;

    for (&state_idx, members) in &by_state {
        let state = states[state_idx].as_ref();
        let (hidden, dist) = policy.forward_with_hidden(state);
        let mut dlogits = vec![0.0; policy.num_actions];

        for &i in members {
            let sample = &samples[i];
            let term = surrogate_term(dist.log_prob(sample.action), sample, objective.clip_eps, n);
            if term.log_prob_weight != 0.0 {
                // d log pi(a) / d logits = onehot(a) - p
                let w = term.log_prob_weight;
                for (d, p) in dlogits.iter_mut().zip(dist.probs()) {
                    *d -= w * p;
                }
                dlogits[sample.action.index()] += w;
            }
            terms[i] = term;
        }

        let reference_dist = reference.forward(state);
        let kl = dist.kl_divergence(&reference_dist);
        kl_total += kl;
        if objective.kl_coef != 0.0 {
            // d KL / d logit_k = p_k (log p_k - log q_k - KL)
            let scale = objective.kl_coef / num_states;
            for (k, d) in dlogits.iter_mut().enumerate() {
                let p = dist.probs[k];
                *d -= scale * p * (dist.log_probs[k] - reference_dist.log_probs[k] - kl);
            }
        }

        if dlogits.iter().any(|&d| d != 0.0) {
            policy.backprop(state, &hidden, &dlogits, &mut gradient);
        }
    }

    let surrogate = terms.iter().map(|t| t.surrogate).sum::<f64>() / n as f64;
    let kl = kl_total / num_states;
    let eval = ObjectiveEval {
        value: surrogate - objective.kl_coef * kl,
        surrogate,
        kl,
        terms,
        gradient,
    };
    if !eval.value.is_finite() || !eval.gradient.is_finite() {
        return Err(Error::TrainingFault(diagnostic_dump(
            policy, samples, &eval,
        )));
    }
    Ok(eval)
}

fn diagnostic_dump(policy: &PolicyParams, samples: &[TrainSample], eval: &ObjectiveEval) -> String {
    let max_abs_param = policy.values().fold(0.0f64, |m, v| m.max(v.abs()));
    let bad_grad = eval.gradient.values().filter(|g| !g.is_finite()).count();
    let mut out = format!(
        "non-finite objective or gradient: value={} surrogate={} kl={} \
         non_finite_grad_entries={bad_grad} max_abs_param={max_abs_param}",
        eval.value, eval.surrogate, eval.kl
    );
    for (s, t) in samples.iter().zip(&eval.terms).take(16) {
        out.push_str(&format!(
            "\n  state={} action={} old_log_prob={} advantage={} ratio={}",
            s.state,
            s.action.id(),
            s.old_log_prob,
            s.advantage,
            t.ratio
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn init_is_finite_valid_and_deterministic() {
        let a = PolicyParams::init(10, 128, 64, 3);
        let b = PolicyParams::init(10, 128, 64, 3);
        assert_eq!(a, b);
        assert!(a.is_finite());
        let d = a.forward(&[0.3; 10]);
        assert_abs_diff_eq!(d.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(a.b1.iter().chain(&a.b2).all(|&b| b == 0.0));
        assert!(a.w1.iter().all(|w| w.abs() <= 1.0 / 10f64.sqrt()));
        assert!(a.w2.iter().all(|w| w.abs() <= 1.0 / 8.0));
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p = PolicyParams::zeros(10, 128, 64);
        let d = p.forward(&[1.0, -2.0, 0.5, 3.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        for &q in d.probs() {
            assert_eq!(q, 1.0 / 128.0);
        }
    }

    #[test]
    fn logit_shift_invariance() {
        let mut p = PolicyParams::init(10, 128, 64, 5);
        let s = [0.1, -0.4, 1.2, 0.0, 0.7, -1.1, 0.3, 0.3, 2.0, -0.5];
        let before = p.forward(&s);
        p.b2.iter_mut().for_each(|b| *b += 3.7);
        let after = p.forward(&s);
        for (x, y) in before.probs().iter().zip(after.probs()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let d = ActionDistribution::from_logits(&[1000.0, -1000.0, 0.0]);
        assert!(d.log_probs().iter().all(|lp| lp.is_finite()));
        assert_abs_diff_eq!(d.probs()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_distribution_samples_one_action() {
        let mut logits = vec![0.0; 128];
        logits[17] = 80.0;
        let sampler = ActionDistribution::from_logits(&logits).sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..32).all(|_| sampler.sample(&mut rng).index() == 17));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = PolicyParams::init(10, 128, 64, 1);
        let s = [0.5; 10];
        let a = sample_actions(&p, &s, 32, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_actions(&p, &s, 32, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let p = PolicyParams::zeros(10, 128, 64);
        let s = [0.0; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = vec![0usize; 128];
        let reps = 10_000;
        for _ in 0..reps {
            for a in sample_actions(&p, &s, 32, &mut rng) {
                counts[a.index()] += 1;
            }
        }
        let total = (reps * 32) as f64;
        let q = 1.0 / 128.0;
        let se = (q * (1.0 - q) / total).sqrt();
        for c in counts {
            assert!(
                (c as f64 / total - q).abs() < 3.0 * se,
                "freq {}",
                c as f64 / total
            );
        }
    }

    #[test]
    fn entropy_closed_forms() {
        let uniform = ActionDistribution::from_logits(&[0.0; 128]);
        assert_abs_diff_eq!(uniform.entropy(), 128f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(uniform.entropy(), 4.8520, epsilon = 1e-4);
        let one_hot = ActionDistribution::from_probs(vec![0.0, 1.0, 0.0]);
        assert_eq!(one_hot.entropy(), 0.0);
        let half = ActionDistribution::from_probs(vec![0.5, 0.5]);
        assert_abs_diff_eq!(half.entropy(), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn kl_closed_forms() {
        let p = ActionDistribution::from_probs(vec![0.5, 0.5]);
        let q = ActionDistribution::from_probs(vec![0.25, 0.75]);
        assert_eq!(p.kl_divergence(&p), 0.0);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_abs_diff_eq!(p.kl_divergence(&q), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(p.kl_divergence(&q), 0.1438, epsilon = 1e-4);
    }

    #[test]
    fn ratio_one_reduces_to_policy_gradient() {
        let policy = PolicyParams::init(4, 8, 5, 2);
        let states = vec![vec![0.3, -1.0, 0.8, 0.1], vec![-0.2, 0.4, 1.5, -0.7]];
        let actions = [(0, 1, 1.2), (0, 5, -0.4), (1, 3, 0.9), (1, 3, -1.7)];
        let samples: Vec<TrainSample> = actions
            .iter()
            .map(|&(st, a, adv)| TrainSample {
                state: st,
                action: Action::from_index(a),
                old_log_prob: policy.forward(&states[st]).log_probs()[a],
                advantage: adv,
            })
            .collect();
        let obj = ClipObjective {
            clip_eps: 0.2,
            kl_coef: 0.0,
        };
        let eval = objective_gradient(&policy, &policy, &states, &samples, &obj).unwrap();
        let mean_adv = actions.iter().map(|a| a.2).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(eval.value, mean_adv, epsilon = 1e-12);

        // plain policy gradient: (1/n) sum A grad log pi
        let mut pg = policy.zeros_like();
        for s in &samples {
            let (hidden, dist) = policy.forward_with_hidden(&states[s.state]);
            let mut dlogits: Vec<f64> = dist
                .probs()
                .iter()
                .map(|p| -p * s.advantage / 4.0)
                .collect();
            dlogits[s.action.index()] += s.advantage / 4.0;
            policy.backprop(&states[s.state], &hidden, &dlogits, &mut pg);
        }
        for (a, b) in eval.gradient.values().zip(pg.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn clipped_positive_sample_has_zero_weight() {
        let sample = TrainSample {
            state: 0,
            action: Action::from_index(0),
            old_log_prob: -2.0,
            advantage: 1.0,
        };
        let term = surrogate_term(-2.0 + 0.5, &sample, 0.2, 4);
        assert!(term.ratio > 1.2);
        assert_eq!(term.log_prob_weight, 0.0);
        assert_abs_diff_eq!(term.surrogate, 1.2, epsilon = 1e-15);
    }

    #[test]
    fn ties_use_unclipped_branch() {
        let sample = TrainSample {
            state: 0,
            action: Action::from_index(0),
            old_log_prob: -1.0,
            advantage: 2.0,
        };
        let term = surrogate_term(-1.0, &sample, 0.2, 1);
        assert_eq!(term.ratio, 1.0);
        assert_eq!(term.log_prob_weight, 2.0);
    }

    #[test]
    fn empty_minibatch_rejected() {
        let p = PolicyParams::zeros(2, 3, 2);
        let obj = ClipObjective {
            clip_eps: 0.2,
            kl_coef: 0.0,
        };
        assert!(objective_gradient::<Vec<f64>>(&p, &p, &[], &[], &obj).is_err());
    }

    #[test]
    fn non_finite_gradient_is_training_fault() {
        let mut p = PolicyParams::init(2, 3, 2, 0);
        p.w2[0] = f64::NAN;
        let states = vec![vec![1.0, 1.0]];
        let samples = [TrainSample {
            state: 0,
            action: Action::from_index(1),
            old_log_prob: -1.0,
            advantage: 1.0,
        }];
        let obj = ClipObjective {
            clip_eps: 0.2,
            kl_coef: 0.1,
        };
        let err = objective_gradient(&p, &p, &states, &samples, &obj).unwrap_err();
        assert!(matches!(err, Error::TrainingFault(ref msg) if msg.contains("advantage=1")));
    }

    #[test]
    fn flat_round_trip() {
        let p = PolicyParams::init(3, 4, 5, 8);
        let flat: Vec<f64> = p.values().copied().collect();
        assert_eq!(PolicyParams::from_flat(3, 4, 5, &flat).unwrap(), p);
        assert!(PolicyParams::from_flat(3, 4, 5, &flat[1..]).is_err());
    }
}
