//! Run configuration: a sectioned TOML file, variant presets and CLI overrides.
//!
//! Precedence, lowest first: built-in defaults, the preset named in
//! `[run] preset`, explicit keys in the file, then command-line overrides.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::grpo::TrainConfig;
use crate::optim::AdamConfig;
use crate::policy::PolicyParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub label: String,
    pub preset: Option<String>,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            label: "default".into(),
            preset: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub state_dim: usize,
    pub num_actions: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            state_dim: 10,
            num_actions: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { hidden_dim: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub env: u64,
    pub init: u64,
    pub train: u64,
    pub eval: u64,
}

impl Seeds {
    /// Four decorrelated seeds derived from one base value.
    pub fn from_base(base: u64) -> Self {
        // TOML integers are signed 64-bit, so derived seeds keep the top bit clear.
        let mix = |k: u64| splitmix64(base.wrapping_mul(4).wrapping_add(k)) >> 1;
        Seeds {
            env: mix(0),
            init: mix(1),
            train: mix(2),
            eval: mix(3),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::from_base(0)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate every this many training steps.
    pub every: usize,
    pub taus: Vec<f64>,
    pub ns: Vec<usize>,
    pub n_max: usize,
    pub num_states: usize,
    /// Threshold at which uplift diagnostics count a sample as correct.
    pub uplift_tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            every: 10,
            taus: vec![1.0, 4.0, 5.0],
            ns: vec![1, 4, 8, 16, 32],
            n_max: 512,
            num_states: 200,
            uplift_tau: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub optimizer: AdamConfig,
    pub seeds: Seeds,
    pub eval: EvalConfig,
}

/// Keys that may appear in a config file but are absent from a serialized default.
const OPTIONAL_KEYS: &[(&str, &str)] = &[("run", "preset"), ("train", "rank_coef")];

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let mut cfg = RunConfig::default();
        cfg.apply_preset(preset);
        cfg
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        preset.apply(&mut self.train);
        self.run.preset = Some(preset.name().to_owned());
        self.run.label = preset.name().to_owned();
    }

    /// Parses and validates a config file, rejecting (and listing) unknown keys.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        let unknown = unknown_keys(&file);
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )));
        }

        let mut base = RunConfig::default();
        if let Some(name) = file
            .get("run")
            .and_then(|r| r.get("preset"))
            .and_then(|p| p.as_str())
        {
            base.apply_preset(name.parse()?);
        }
        let mut merged = toml::Table::try_from(&base).expect("defaults serialize");
        merge(&mut merged, file);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration as TOML; persisted with every run.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short SHA-256 of the effective config text.
    /// Identifies the experiment; the output location and label do not count.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.run.out_dir = PathBuf::new();
        canonical.run.label = String::new();
        let digest = Sha256::digest(canonical.to_toml_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = self.train.violations();
        if self.env.state_dim < 1 {
            bad.push("env.state_dim = 0 (must be >= 1)".into());
        }
        if self.env.num_actions < 2 {
            bad.push(format!(
                "env.num_actions = {} (must be >= 2)",
                self.env.num_actions
            ));
        }
        if self.policy.hidden_dim < 1 {
            bad.push("policy.hidden_dim = 0 (must be >= 1)".into());
        }
        let opt = &self.optimizer;
        if !(opt.learning_rate > 0.0 && opt.learning_rate.is_finite()) {
            bad.push(format!("optimizer.learning_rate = {}", opt.learning_rate));
        }
        if !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) {
            bad.push("optimizer.beta1/beta2 must be in [0, 1)".into());
        }
        if opt.epsilon.is_nan() || opt.epsilon <= 0.0 {
            bad.push(format!("optimizer.epsilon = {}", opt.epsilon));
        }
        let ev = &self.eval;
        if ev.every < 1 {
            bad.push("eval.every = 0 (must be >= 1)".into());
        }
        if ev.num_states < 1 {
            bad.push("eval.num_states = 0 (must be >= 1)".into());
        }
        if ev.n_max < 1 {
            bad.push("eval.n_max = 0 (must be >= 1)".into());
        }
        for &n in &ev.ns {
            if n == 0 || !ev.n_max.is_multiple_of(n) {
                bad.push(format!(
                    "eval.ns entry {n} does not divide n_max {}",
                    ev.n_max
                ));
            }
        }
        if ev
            .taus
            .iter()
            .chain([&ev.uplift_tau])
            .any(|t| !t.is_finite())
        {
            bad.push("eval thresholds must be finite".into());
        }
        if let Some(p) = &self.run.preset {
            if let Err(e) = p.parse::<Preset>() {
                bad.push(e.to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn build_env(&self) -> Result<EnvSpec> {
        EnvSpec::new(self.env.state_dim, self.env.num_actions, self.seeds.env)
    }

    pub fn build_policy(&self) -> PolicyParams {
        PolicyParams::init(
            self.env.state_dim,
            self.env.num_actions,
            self.policy.hidden_dim,
            self.seeds.init,
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.out_dir.join(&self.run.label)
    }
}

fn unknown_keys(file: &toml::Table) -> Vec<String> {
    let known = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    let mut unknown = Vec::new();
    for (section, value) in file {
        let Some(known_section) = known.get(section).and_then(|v| v.as_table()) else {
            unknown.push(section.clone());
            continue;
        };
        let Some(table) = value.as_table() else {
            unknown.push(format!("{section} (expected a table)"));
            continue;
        };
        for key in table.keys() {
            let optional = OPTIONAL_KEYS.contains(&(section.as_str(), key.as_str()));
            if !known_section.contains_key(key) && !optional {
                unknown.push(format!("{section}.{key}"));
            }
        }
    }
    unknown
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// The GRPO variants compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Default,
    HighKl,
    Unlikeliness1,
    Unlikeliness2,
    Epochs2,
    Epochs3,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Default,
        Preset::HighKl,
        Preset::Unlikeliness1,
        Preset::Unlikeliness2,
        Preset::Epochs2,
        Preset::Epochs3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Default => "default",
            Preset::HighKl => "high-kl",
            Preset::Unlikeliness1 => "unlikeliness-1",
            Preset::Unlikeliness2 => "unlikeliness-2",
            Preset::Epochs2 => "epochs-2",
            Preset::Epochs3 => "epochs-3",
        }
    }

    /// `(ppo_epochs, kl_coef, rank_coef)`
    pub fn settings(self) -> (usize, f64, Option<f64>) {
        match self {
            Preset::Default => (1, 0.02, None),
            Preset::HighKl => (1, 0.10, None),
            Preset::Unlikeliness1 => (1, 0.10, Some(0.25)),
            Preset::Unlikeliness2 => (2, 0.10, Some(0.25)),
            Preset::Epochs2 => (2, 0.10, None),
            Preset::Epochs3 => (3, 0.10, None),
        }
    }

    pub fn apply(self, train: &mut TrainConfig) {
        let (k, kl, rank) = self.settings();
        train.ppo_epochs = k;
        train.kl_coef = kl;
        train.rank_coef = rank;
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!(
                    "unknown preset {s:?} (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub eval_every: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub label: Option<String>,
}

impl RunConfig {
    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(p) = o.preset {
            self.apply_preset(p);
        }
        if let Some(seed) = o.seed {
            self.seeds = Seeds::from_base(seed);
        }
        if let Some(steps) = o.steps {
            self.train.num_steps = steps;
        }
        if let Some(every) = o.eval_every {
            self.eval.every = every;
        }
        if let Some(out) = &o.out_dir {
            self.run.out_dir = out.clone();
        }
        if let Some(label) = &o.label {
            self.run.label = label.clone();
        }
        self.validate()
    }
}
