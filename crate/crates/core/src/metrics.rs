//! Evaluation machinery: pass@N (sampled and exact), the clip-bound pass@N
//! prediction, uplift rates by probability rank, and diversity statistics.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::env::{Action, EnvSpec};
use crate::error::{Error, Result};
use crate::grpo::rank_group;
use crate::policy::{ActionDistribution, PolicyParams};
use crate::record::{MetricsRecord, PassCell, Phase};

/// Binary outcomes, `problems x n_max`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeMatrix {
    problems: usize,
    n_max: usize,
    outcomes: Vec<u8>,
}

impl OutcomeMatrix {
    pub fn new(problems: usize, n_max: usize, outcomes: Vec<u8>) -> Result<Self> {
        if n_max == 0 || outcomes.len() != problems * n_max {
            return Err(Error::Usage(format!(
                "outcome matrix needs {problems} x {n_max} entries, got {}",
                outcomes.len()
            )));
        }
        if outcomes.iter().any(|&o| o > 1) {
            return Err(Error::Usage("outcomes must be 0 or 1".into()));
        }
        Ok(OutcomeMatrix {
            problems,
            n_max,
            outcomes,
        })
    }

    pub fn problems(&self) -> usize {
        self.problems
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn row(&self, problem: usize) -> &[u8] {
        &self.outcomes[problem * self.n_max..(problem + 1) * self.n_max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassEstimate {
    pub mean: f64,
    /// Sample standard deviation across trials; absent with a single trial.
    pub std: Option<f64>,
    pub trials: usize,
}

impl PassEstimate {
    pub fn standard_error(&self) -> Option<f64> {
        self.std.map(|s| s / (self.trials as f64).sqrt())
    }
}

/// Chunked pass@n: each problem's attempts are cut into `n_max / n`
/// consecutive chunks, and trial `i` averages chunk `i` over problems.
pub fn pass_at_n_chunked(outcomes: &OutcomeMatrix, n: usize) -> Result<PassEstimate> {
    if n == 0 || !outcomes.n_max.is_multiple_of(n) {
        return Err(Error::Usage(format!(
            "n = {n} does not divide n_max = {}",
            outcomes.n_max
        )));
    }
    let trials = outcomes.n_max / n;
    let mut per_trial = vec![0.0; trials];
    for p in 0..outcomes.problems {
        for (t, chunk) in outcomes.row(p).chunks_exact(n).enumerate() {
            if chunk.contains(&1) {
                per_trial[t] += 1.0;
            }
        }
    }
    let problems = outcomes.problems.max(1) as f64;
    per_trial.iter_mut().for_each(|v| *v /= problems);
    let mean = per_trial.iter().sum::<f64>() / trials as f64;
    let std = (trials > 1).then(|| {
        let ss: f64 = per_trial.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (trials - 1) as f64).sqrt()
    });
    Ok(PassEstimate { mean, std, trials })
}

/// `1 - (1 - p)^n`.
pub fn pass_at_n_from_prob(p: f64, n: usize) -> f64 {
    1.0 - (1.0 - p).powi(n as i32)
}

/// Mean over `states` of the exact pass@n.
pub fn exact_pass_at_n(
    env: &EnvSpec,
    policy: &PolicyParams,
    states: &[Vec<f64>],
    tau: f64,
    n: usize,
) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    states
        .iter()
        .map(|s| pass_at_n_from_prob(env.success_prob(policy, s, tau), n))
        .sum::<f64>()
        / states.len() as f64
}

/// pass@n if every correct action's probability is scaled up by `1 + eps`.
pub fn predicted_pass_after_rl(p0: f64, eps: f64, n: usize) -> Result<f64> {
    let boosted = (1.0 + eps) * p0;
    if !(0.0..=1.0).contains(&p0) || !(0.0..=1.0).contains(&boosted) {
        return Err(Error::Usage(format!(
            "(1 + eps) * p0 = {boosted} is not a probability"
        )));
    }
    Ok(pass_at_n_from_prob(boosted, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictPoint {
    pub n: usize,
    pub baseline: f64,
    pub predicted: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictCurve {
    pub p0: f64,
    pub eps: f64,
    pub points: Vec<PredictPoint>,
}

impl PredictCurve {
    /// The `n` at which the predicted improvement is largest.
    pub fn argmax_n(&self) -> usize {
        self.points
            .iter()
            .max_by(|a, b| a.delta.total_cmp(&b.delta))
            .map(|p| p.n)
            .unwrap_or(1)
    }
}

/// Improvement curves `predicted - baseline` for `n = 1..=n_max`, one per `p0`.
pub fn predict_curves(p0s: &[f64], eps: f64, n_max: usize) -> Result<Vec<PredictCurve>> {
    p0s.iter()
        .map(|&p0| {
            let points = (1..=n_max)
                .map(|n| {
                    let baseline = pass_at_n_from_prob(p0, n);
                    let predicted = predicted_pass_after_rl(p0, eps, n)?;
                    Ok(PredictPoint {
                        n,
                        baseline,
                        predicted,
                        delta: predicted - baseline,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PredictCurve { p0, eps, points })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankUplift {
    pub rank: usize,
    pub positive_count: usize,
    pub uplift_count: usize,
}

impl RankUplift {
    /// `None` when no positive sample landed at this rank.
    pub fn rate(&self) -> Option<f64> {
        (self.positive_count > 0).then(|| self.uplift_count as f64 / self.positive_count as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpliftReport {
    pub ranks: Vec<RankUplift>,
}

impl UpliftReport {
    pub fn empty(group_size: usize) -> Self {
        UpliftReport {
            ranks: (1..=group_size)
                .map(|rank| RankUplift {
                    rank,
                    positive_count: 0,
                    uplift_count: 0,
                })
                .collect(),
        }
    }

    /// Counts one positive sample at `rank` (1-based).
    pub fn observe(&mut self, rank: usize, uplifted: bool) {
        let entry = &mut self.ranks[rank - 1];
        entry.positive_count += 1;
        entry.uplift_count += usize::from(uplifted);
    }

    pub fn total_positive(&self) -> usize {
        self.ranks.iter().map(|r| r.positive_count).sum()
    }

    /// Spearman correlation between probability order (rank 1 highest) and
    /// uplift rate over ranks with a defined rate. Positive means likely
    /// samples are uplifted more often. Zero when either side is constant.
    pub fn trend(&self) -> f64 {
        let (order, rates): (Vec<f64>, Vec<f64>) = self
            .ranks
            .iter()
            .filter_map(|r| r.rate().map(|u| (-(r.rank as f64), u)))
            .unzip();
        spearman(&order, &rates).unwrap_or(0.0)
    }
}

/// For each state, draw `group_size` actions from `initial`, rank them by
/// initial probability, and for correct ones record whether `trained`
/// assigns strictly more probability than `initial`.
pub fn uplift_rates<R: Rng + ?Sized>(
    env: &EnvSpec,
    initial: &PolicyParams,
    trained: &PolicyParams,
    states: &[Vec<f64>],
    group_size: usize,
    tau: f64,
    rng: &mut R,
) -> UpliftReport {
    let mut report = UpliftReport::empty(group_size);
    for state in states {
        let before = initial.forward(state);
        let after = trained.forward(state);
        let scores = env.scores(state);
        let sampler = before.sampler();
        let actions: Vec<Action> = (0..group_size).map(|_| sampler.sample(rng)).collect();
        let log_probs: Vec<f64> = actions.iter().map(|&a| before.log_prob(a)).collect();
        for (&action, rank) in actions.iter().zip(rank_group(&log_probs)) {
            if scores[action.index()] >= tau {
                report.observe(rank, after.prob(action) > before.prob(action));
            }
        }
    }
    report
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityStats {
    pub mean_unique_actions: f64,
    pub mean_entropy: f64,
}

pub fn diversity_stats(groups: &[Vec<Action>], dists: &[ActionDistribution]) -> DiversityStats {
    let mean = |total: f64, count: usize| {
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    };
    let unique: usize = groups
        .iter()
        .map(|g| g.iter().collect::<BTreeSet<_>>().len())
        .sum();
    let entropy: f64 = dists.iter().map(ActionDistribution::entropy).sum();
    DiversityStats {
        mean_unique_actions: mean(unique as f64, groups.len()),
        mean_entropy: mean(entropy, dists.len()),
    }
}

/// Samples `n_max` actions per state and scores them at each `tau`.
///
/// Problem `i` draws from stream `i + 1` of `seed` (stream 0 generates the
/// evaluation states), so the matrix does not depend on visiting order.
pub fn sample_outcomes(
    env: &EnvSpec,
    policy: &PolicyParams,
    states: &[Vec<f64>],
    taus: &[f64],
    n_max: usize,
    seed: u64,
) -> Result<Vec<OutcomeMatrix>> {
    let mut per_tau = vec![Vec::with_capacity(states.len() * n_max); taus.len()];
    for (i, state) in states.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let sampler = policy.forward(state).sampler();
        let scores = env.scores(state);
        for _ in 0..n_max {
            let score = scores[sampler.sample(&mut rng).index()];
            for (out, &tau) in per_tau.iter_mut().zip(taus) {
                out.push(u8::from(score >= tau));
            }
        }
    }
    per_tau
        .into_iter()
        .map(|o| OutcomeMatrix::new(states.len(), n_max, o))
        .collect()
}

/// Exact and chunked pass@n over the evaluation grid, plus mean entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub cells: Vec<PassCell>,
    pub mean_entropy: f64,
}

impl EvalSummary {
    pub fn cell(&self, tau: f64, n: usize) -> Option<&PassCell> {
        self.cells.iter().find(|c| c.tau == tau && c.n == n)
    }
}

/// Evaluates policies on a fixed state set drawn once from the eval seed.
pub struct Evaluator<'a> {
    env: &'a EnvSpec,
    config: &'a EvalConfig,
    states: Vec<Vec<f64>>,
    seed: u64,
}

impl<'a> Evaluator<'a> {
    pub fn new(env: &'a EnvSpec, config: &'a EvalConfig, seed: u64) -> Result<Self> {
        if let Some(&bad) = config
            .ns
            .iter()
            .find(|&&n| n == 0 || !config.n_max.is_multiple_of(n))
        {
            return Err(Error::Config(format!(
                "eval n = {bad} does not divide n_max = {}",
                config.n_max
            )));
        }
        Ok(Evaluator {
            env,
            config,
            states: env.eval_states(config.num_states, seed),
            seed,
        })
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn summarize(&self, policy: &PolicyParams) -> Result<EvalSummary> {
        let outcomes = sample_outcomes(
            self.env,
            policy,
            &self.states,
            &self.config.taus,
            self.config.n_max,
            self.seed,
        )?;
        let mut cells = Vec::new();
        for (&tau, matrix) in self.config.taus.iter().zip(&outcomes) {
            for &n in &self.config.ns {
                let chunked = pass_at_n_chunked(matrix, n)?;
                cells.push(PassCell {
                    tau,
                    n,
                    exact: exact_pass_at_n(self.env, policy, &self.states, tau, n),
                    chunked_mean: chunked.mean,
                    chunked_std: chunked.std,
                    chunked_trials: chunked.trials,
                });
            }
        }
        let dists: Vec<_> = self.states.iter().map(|s| policy.forward(s)).collect();
        Ok(EvalSummary {
            cells,
            mean_entropy: diversity_stats(&[], &dists).mean_entropy,
        })
    }

    pub fn evaluate(
        &self,
        policy: &PolicyParams,
        step: usize,
        config_hash: &str,
    ) -> Result<MetricsRecord> {
        let summary = self.summarize(policy)?;
        let mut rec = MetricsRecord::new(step, Phase::Eval, config_hash);
        rec.scalar("entropy", summary.mean_entropy);
        rec.pass_at_n = summary.cells;
        Ok(rec)
    }
}
