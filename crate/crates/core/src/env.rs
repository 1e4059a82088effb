//! Threshold-verifier toy environment.
//!
//! States are real vectors, actions are a finite set of hidden vectors, and an
//! action solves a state when its dot product with the state reaches the
//! difficulty threshold `tau`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ActionDistribution, PolicyParams};

/// A discrete action. Stored zero-based; the external id is one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action(usize);

impl Action {
    pub fn from_index(index: usize) -> Self {
        Action(index)
    }

    /// Builds an action from its one-based id, checking it against the action count.
    pub fn from_id(id: usize, num_actions: usize) -> Result<Self> {
        if id == 0 || id > num_actions {
            return Err(Error::Usage(format!(
                "action id {id} outside 1..={num_actions}"
            )));
        }
        Ok(Action(id - 1))
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn id(self) -> usize {
        self.0 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    state_dim: usize,
    num_actions: usize,
    /// Row-major `num_actions x state_dim`.
    action_vectors: Vec<f64>,
    env_seed: u64,
}

impl EnvSpec {
    /// Draws the hidden action vectors i.i.d. standard normal from `env_seed`.
    pub fn new(state_dim: usize, num_actions: usize, env_seed: u64) -> Result<Self> {
        if state_dim < 1 {
            return Err(Error::Config(format!(
                "state_dim must be >= 1, got {state_dim}"
            )));
        }
        if num_actions < 2 {
            return Err(Error::Config(format!(
                "num_actions must be >= 2, got {num_actions}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(env_seed);
        let action_vectors = (0..state_dim * num_actions)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(EnvSpec {
            state_dim,
            num_actions,
            action_vectors,
            env_seed,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn env_seed(&self) -> u64 {
        self.env_seed
    }

    pub fn action_vector(&self, action: Action) -> &[f64] {
        let start = action.index() * self.state_dim;
        &self.action_vectors[start..start + self.state_dim]
    }

    pub fn action_vectors(&self) -> &[f64] {
        &self.action_vectors
    }

    /// A state with i.i.d. standard normal coordinates.
    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.state_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Dot product of `state` with every action vector.
    pub fn scores(&self, state: &[f64]) -> Vec<f64> {
        debug_assert_eq!(state.len(), self.state_dim);
        self.action_vectors
            .chunks_exact(self.state_dim)
            .map(|v| dot(v, state))
            .collect()
    }

    /// Binary verifier reward: 1 iff `state . v_action >= tau`.
    pub fn reward(&self, state: &[f64], action: Action, tau: f64) -> Result<u8> {
        self.check_state(state)?;
        if action.index() >= self.num_actions {
            return Err(Error::Usage(format!(
                "action id {} outside 1..={}",
                action.id(),
                self.num_actions
            )));
        }
        Ok(u8::from(dot(self.action_vector(action), state) >= tau))
    }

    /// Exact probability that one draw from `policy` at `state` is rewarded.
    pub fn success_prob(&self, policy: &PolicyParams, state: &[f64], tau: f64) -> f64 {
        let dist = policy.forward(state);
        self.success_mass(&dist, &self.scores(state), tau)
    }

    /// Probability mass of `dist` on actions whose score clears `tau`.
    pub fn success_mass(&self, dist: &ActionDistribution, scores: &[f64], tau: f64) -> f64 {
        let mass: f64 = dist
            .probs()
            .iter()
            .zip(scores)
            .filter(|(_, &s)| s >= tau)
            .map(|(p, _)| p)
            .sum();
        mass.clamp(0.0, 1.0)
    }

    /// The fixed evaluation states, drawn from a seed reserved for evaluation.
    pub fn eval_states(&self, count: usize, eval_seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
        (0..count).map(|_| self.sample_state(&mut rng)).collect()
    }

    pub(crate) fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim {
            return Err(Error::Usage(format!(
                "state has length {}, environment expects {}",
                state.len(),
                self.state_dim
            )));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
