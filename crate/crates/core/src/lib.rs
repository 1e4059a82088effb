//! GRPO on a toy threshold-verifier environment.
//!
//! The crate trains a small MLP policy with group-relative policy
//! optimization, optionally reshaping rewards to favour low-probability
//! correct actions, and measures the result with pass@N, uplift-rate and
//! entropy diagnostics.

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod grpo;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod record;
pub mod run;

pub use config::{Preset, RunConfig};
pub use env::{Action, EnvSpec};
pub use error::{Error, Result};
pub use policy::{ActionDistribution, PolicyParams};
