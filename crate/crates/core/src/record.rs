//! Structured metrics lines written to `metrics.jsonl`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
    Diagnose,
}

/// pass@n at one `(tau, n)` cell, exact and chunked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassCell {
    pub tau: f64,
    pub n: usize,
    pub exact: f64,
    pub chunked_mean: f64,
    pub chunked_std: Option<f64>,
    pub chunked_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema: u32,
    pub step: usize,
    pub phase: Phase,
    pub config_hash: String,
    pub scalars: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pass_at_n: Vec<PassCell>,
}

impl MetricsRecord {
    pub fn new(step: usize, phase: Phase, config_hash: &str) -> Self {
        MetricsRecord {
            schema: SCHEMA_VERSION,
            step,
            phase,
            config_hash: config_hash.to_owned(),
            scalars: BTreeMap::new(),
            pass_at_n: Vec::new(),
        }
    }

    pub fn scalar(&mut self, name: &str, value: f64) -> &mut Self {
        self.scalars.insert(name.to_owned(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied()
    }

    pub fn pass_cell(&self, tau: f64, n: usize) -> Option<&PassCell> {
        self.pass_at_n.iter().find(|c| c.tau == tau && c.n == n)
    }

    pub fn check_finite(&self) -> Result<()> {
        let bad_scalar = self.scalars.iter().find(|(_, v)| !v.is_finite());
        if let Some((name, v)) = bad_scalar {
            return Err(Error::TrainingFault(format!(
                "step {} metric {name} is not finite ({v})",
                self.step
            )));
        }
        for c in &self.pass_at_n {
            let values = [
                Some(c.tau),
                Some(c.exact),
                Some(c.chunked_mean),
                c.chunked_std,
            ];
            if values.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::TrainingFault(format!(
                    "step {} pass@{} at tau {} is not finite",
                    self.step, c.n, c.tau
                )));
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics records always serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: MetricsRecord = serde_json::from_str(line)
            .map_err(|e| Error::Usage(format!("malformed metrics line: {e}")))?;
        if rec.schema != SCHEMA_VERSION {
            return Err(Error::Usage(format!(
                "unsupported metrics schema {} (expected {SCHEMA_VERSION})",
                rec.schema
            )));
        }
        Ok(rec)
    }
}
