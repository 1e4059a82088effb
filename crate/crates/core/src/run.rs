//! Run directories and the report files behind each CLI subcommand.
//!
//! A training run directory holds:
//!
//! - `effective_config.toml`: the merged configuration, which fully determines the run
//! - `metrics.jsonl`: one [`MetricsRecord`] per training step and per evaluation
//! - `eval_summary.csv`: `step,tau,n,exact,chunked_mean,chunked_std,chunked_trials`
//! - `timings.jsonl`: wall-clock per metrics line, kept apart so that
//!   `metrics.jsonl` is reproducible byte for byte
//! - `checkpoints/initial.ckpt` (the reference policy), `step_NNNNN.ckpt`, `final.ckpt`
//!
//! Missing values in CSV files are written as `null`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Lineage};
use crate::config::{EvalConfig, RunConfig};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::grpo::{self, RunSink, TrainOutcome};
use crate::metrics::{self, EvalSummary, Evaluator, PredictCurve, UpliftReport};
use crate::policy::PolicyParams;
use crate::record::{MetricsRecord, Phase};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const EVAL_SUMMARY: &str = "eval_summary.csv";
pub const TIMINGS_LOG: &str = "timings.jsonl";
pub const EVAL_REPORT: &str = "eval_report.csv";
pub const UPLIFT_REPORT: &str = "uplift_report.csv";
pub const UPLIFT_SUMMARY: &str = "uplift_summary.json";
pub const PREDICT_CURVES: &str = "predict_curves.csv";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_all(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_owned(), |x| x.to_string())
}

struct RunDirSink {
    dir: PathBuf,
    metrics: BufWriter<File>,
    eval_csv: BufWriter<File>,
    timings: BufWriter<File>,
    started: Instant,
    lineage: Lineage,
    quiet: bool,
}

impl RunDirSink {
    fn open(dir: &Path, config: &RunConfig, quiet: bool) -> Result<Self> {
        let ckpt_dir = dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let mut eval_csv = create(&dir.join(EVAL_SUMMARY))?;
        writeln!(
            eval_csv,
            "step,tau,n,exact,chunked_mean,chunked_std,chunked_trials"
        )
        .map_err(|e| Error::io(dir.join(EVAL_SUMMARY), e))?;
        Ok(RunDirSink {
            dir: dir.to_owned(),
            metrics: create(&dir.join(METRICS_LOG))?,
            eval_csv,
            timings: create(&dir.join(TIMINGS_LOG))?,
            started: Instant::now(),
            lineage: Lineage {
                env_seed: config.seeds.env,
                init_seed: config.seeds.init,
                step: 0,
                config_hash: config.hash(),
            },
            quiet,
        })
    }

    fn write_record(&mut self, rec: &MetricsRecord) -> std::io::Result<()> {
        writeln!(self.metrics, "{}", rec.to_json_line())?;
        self.metrics.flush()?;
        let unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        writeln!(
            self.timings,
            r#"{{"step":{},"phase":"{}","wall_clock_unix_ms":{},"elapsed_ms":{}}}"#,
            rec.step,
            serde_json::to_value(rec.phase)
                .expect("phase serializes")
                .as_str()
                .unwrap_or(""),
            unix_ms,
            self.started.elapsed().as_millis()
        )?;
        if rec.phase == Phase::Eval {
            for c in &rec.pass_at_n {
                writeln!(
                    self.eval_csv,
                    "{},{},{},{},{},{},{}",
                    rec.step,
                    c.tau,
                    c.n,
                    c.exact,
                    c.chunked_mean,
                    fmt_opt(c.chunked_std),
                    c.chunked_trials
                )?;
            }
            self.eval_csv.flush()?;
        }
        Ok(())
    }
}

impl RunSink for RunDirSink {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.write_record(rec)
            .map_err(|e| Error::io(self.dir.join(METRICS_LOG), e))?;
        if !self.quiet && rec.phase == Phase::Eval {
            let cells: Vec<String> = rec
                .pass_at_n
                .iter()
                .filter(|c| c.n == 1 || c.n == 32)
                .map(|c| format!("pass@{}(tau={})={:.3}", c.n, c.tau, c.exact))
                .collect();
            eprintln!(
                "step {:>4}  entropy={:.3}  {}",
                rec.step,
                rec.get("entropy").unwrap_or(f64::NAN),
                cells.join(" ")
            );
        }
        Ok(())
    }

    fn checkpoint(&mut self, step: usize, policy: &PolicyParams) -> Result<()> {
        let name = if step == 0 {
            "initial.ckpt".to_owned()
        } else {
            format!("step_{step:05}.ckpt")
        };
        let ck = Checkpoint {
            policy: policy.clone(),
            lineage: Lineage {
                step: step as u64,
                ..self.lineage.clone()
            },
        };
        ck.save(&self.dir.join("checkpoints").join(name))
    }
}

/// Trains into `config.run_dir()` and returns that directory with the outcome.
pub fn train_run(config: &RunConfig, quiet: bool) -> Result<(PathBuf, TrainOutcome)> {
    config.validate()?;
    let dir = config.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_all(&dir.join(EFFECTIVE_CONFIG), &config.to_toml_string())?;
    let mut sink = RunDirSink::open(&dir, config, quiet)?;
    let outcome = grpo::train(config, &mut sink)?;
    let final_ck = Checkpoint {
        policy: outcome.policy.clone(),
        lineage: Lineage {
            step: config.train.num_steps as u64,
            ..sink.lineage.clone()
        },
    };
    final_ck.save(&dir.join("checkpoints").join("final.ckpt"))?;
    Ok((dir, outcome))
}

/// Rebuilds the environment a checkpoint was trained in, checking any
/// configured dimensions against the checkpoint's.
pub fn env_for_checkpoint(ck: &Checkpoint, config: Option<&RunConfig>) -> Result<EnvSpec> {
    let p = &ck.policy;
    if let Some(cfg) = config {
        if cfg.env.state_dim != p.state_dim() || cfg.env.num_actions != p.num_actions() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has state_dim={} num_actions={}, config expects state_dim={} num_actions={}",
                p.state_dim(),
                p.num_actions(),
                cfg.env.state_dim,
                cfg.env.num_actions
            )));
        }
    }
    EnvSpec::new(p.state_dim(), p.num_actions(), ck.lineage.env_seed)
}

pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    config: Option<&RunConfig>,
    eval: &EvalConfig,
    eval_seed: u64,
) -> Result<EvalSummary> {
    let env = env_for_checkpoint(ck, config)?;
    Evaluator::new(&env, eval, eval_seed)?.summarize(&ck.policy)
}

#[derive(Serialize)]
struct EvalReportJson<'a> {
    mean_entropy: f64,
    cells: &'a [crate::record::PassCell],
}

/// Writes `eval_report.csv` (`tau,n,method,mean,std,trials`) and a JSON copy.
pub fn write_eval_report(dir: &Path, summary: &EvalSummary) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("tau,n,method,mean,std,trials\n");
    for c in &summary.cells {
        csv.push_str(&format!("{},{},exact,{},null,null\n", c.tau, c.n, c.exact));
    }
    for c in &summary.cells {
        csv.push_str(&format!(
            "{},{},chunked,{},{},{}\n",
            c.tau,
            c.n,
            c.chunked_mean,
            fmt_opt(c.chunked_std),
            c.chunked_trials
        ));
    }
    let path = dir.join(EVAL_REPORT);
    write_all(&path, &csv)?;
    let json = serde_json::to_string_pretty(&EvalReportJson {
        mean_entropy: summary.mean_entropy,
        cells: &summary.cells,
    })
    .expect("report serializes");
    write_all(&dir.join("eval_report.json"), &json)?;
    Ok(path)
}

/// Uplift rates of `trained` relative to `initial` on the evaluation states.
pub fn diagnose(
    initial: &Checkpoint,
    trained: &Checkpoint,
    group_size: usize,
    tau: f64,
    num_states: usize,
    eval_seed: u64,
) -> Result<UpliftReport> {
    if !initial.policy.same_shape(&trained.policy) {
        return Err(Error::Checkpoint(
            "checkpoints have different dimensions".into(),
        ));
    }
    if initial.lineage.env_seed != trained.lineage.env_seed {
        return Err(Error::Checkpoint(format!(
            "checkpoints come from different environments (env seeds {} and {})",
            initial.lineage.env_seed, trained.lineage.env_seed
        )));
    }
    if group_size < 2 {
        return Err(Error::Usage("group size must be >= 2".into()));
    }
    let env = env_for_checkpoint(initial, None)?;
    Ok(uplift_on_eval_states(
        &env,
        &initial.policy,
        &trained.policy,
        group_size,
        tau,
        num_states,
        eval_seed,
    ))
}

/// Uplift diagnostic with the sampling stream reserved for diagnostics.
pub fn uplift_on_eval_states(
    env: &EnvSpec,
    initial: &PolicyParams,
    trained: &PolicyParams,
    group_size: usize,
    tau: f64,
    num_states: usize,
    eval_seed: u64,
) -> UpliftReport {
    let states = env.eval_states(num_states, eval_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    rng.set_stream(u64::MAX);
    metrics::uplift_rates(env, initial, trained, &states, group_size, tau, &mut rng)
}

#[derive(Serialize)]
struct UpliftSummaryJson {
    group_size: usize,
    tau: f64,
    total_positive: usize,
    trend: f64,
}

/// Writes `uplift_report.csv` (`rank,positive_count,uplift_count,u_j`) and
/// `uplift_summary.json` with the rank-correlation trend.
pub fn write_uplift_report(dir: &Path, report: &UpliftReport, tau: f64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("rank,positive_count,uplift_count,u_j\n");
    for r in &report.ranks {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.rank,
            r.positive_count,
            r.uplift_count,
            fmt_opt(r.rate())
        ));
    }
    let path = dir.join(UPLIFT_REPORT);
    write_all(&path, &csv)?;
    let summary = UpliftSummaryJson {
        group_size: report.ranks.len(),
        tau,
        total_positive: report.total_positive(),
        trend: report.trend(),
    };
    write_all(
        &dir.join(UPLIFT_SUMMARY),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(path)
}

/// Writes `predict_curves.csv` (`p0,eps,n,baseline,predicted,delta`).
pub fn write_predict_curves(dir: &Path, curves: &[PredictCurve]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("p0,eps,n,baseline,predicted,delta\n");
    for c in curves {
        for p in &c.points {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.p0, c.eps, p.n, p.baseline, p.predicted, p.delta
            ));
        }
    }
    let path = dir.join(PREDICT_CURVES);
    write_all(&path, &csv)?;
    Ok(path)
}

/// Reads a `metrics.jsonl` file back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRecord::from_json_line)
        .collect()
}
