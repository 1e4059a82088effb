use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grpo_lab::checkpoint::Checkpoint;
use grpo_lab::config::{EvalConfig, Overrides, Preset, RunConfig, Seeds};
use grpo_lab::metrics::predict_curves;
use grpo_lab::{run, Error, Result};

#[derive(Parser)]
#[command(
    name = "grpo-lab",
    version,
    about = "GRPO and unlikeliness-reward experiments on a toy verifier environment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write a run directory
    Train(TrainArgs),
    /// Evaluate a checkpoint: exact and chunked pass@N plus entropy
    Eval(EvalArgs),
    /// Uplift rates of a trained checkpoint relative to its initial policy
    Diagnose(DiagnoseArgs),
    /// Predicted pass@N improvement curves under the clip-bound model
    Predict(PredictArgs),
    /// List the built-in variant presets
    Presets,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Base seed; derives the env, init, train and eval seeds
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for the run directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config; supplies defaults and is checked against the checkpoint
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    taus: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    num_states: Option<usize>,
    /// Evaluation seed (defaults to the config's eval seed)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long = "init")]
    initial: PathBuf,
    #[arg(long = "final")]
    trained: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long)]
    num_states: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.125, 0.03125, 0.0078125, 0.001953125])]
    p0: Vec<f64>,
    #[arg(long, default_value_t = 0.2)]
    eps: f64,
    #[arg(long, default_value_t = 512)]
    n_max: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

fn load_config(path: Option<&PathBuf>) -> Result<Option<RunConfig>> {
    path.map(|p| {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        RunConfig::from_toml_str(&text)
    })
    .transpose()
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(args.config.as_ref())?.unwrap_or_default();
    config.apply_overrides(&Overrides {
        preset: args.preset,
        seed: args.seed,
        steps: args.steps,
        eval_every: args.eval_every,
        out_dir: args.out,
        label: args.label,
    })?;
    let (dir, outcome) = run::train_run(&config, args.quiet)?;
    if !args.quiet {
        println!("{}", dir.display());
        if let Some(last) = outcome.eval_records().last() {
            println!(
                "final entropy {:.4}",
                last.get("entropy").unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let config = load_config(args.config.as_ref())?;
    let mut eval = config.as_ref().map(|c| c.eval.clone()).unwrap_or_default();
    if let Some(t) = args.taus {
        eval.taus = t;
    }
    if let Some(n) = args.ns {
        eval.ns = n;
    }
    if let Some(n) = args.n_max {
        eval.n_max = n;
    }
    if let Some(n) = args.num_states {
        eval.num_states = n;
    }
    let seed = args
        .seed
        .or(config.as_ref().map(|c| c.seeds.eval))
        .unwrap_or(Seeds::default().eval);
    let ck = Checkpoint::load(&args.checkpoint)?;
    let summary = run::evaluate_checkpoint(&ck, config.as_ref(), &eval, seed)?;
    let path = run::write_eval_report(&args.out, &summary)?;
    if !args.quiet {
        println!("mean entropy {:.4}", summary.mean_entropy);
        for c in &summary.cells {
            println!(
                "tau={:<4} n={:<4} exact={:.4} chunked={:.4}",
                c.tau, c.n, c.exact, c.chunked_mean
            );
        }
        println!("{}", path.display());
    }
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let config = load_config(args.config.as_ref())?;
    let defaults = config.unwrap_or_default();
    let eval: &EvalConfig = &defaults.eval;
    let group_size = args.group_size.unwrap_or(defaults.train.group_size);
    let tau = args.tau.unwrap_or(eval.uplift_tau);
    let initial = Checkpoint::load(&args.initial)?;
    let trained = Checkpoint::load(&args.trained)?;
    let report = run::diagnose(
        &initial,
        &trained,
        group_size,
        tau,
        args.num_states.unwrap_or(eval.num_states),
        args.seed.unwrap_or(defaults.seeds.eval),
    )?;
    let path = run::write_uplift_report(&args.out, &report, tau)?;
    if !args.quiet {
        for r in &report.ranks {
            let rate = r.rate().map_or("null".to_owned(), |u| format!("{u:.3}"));
            println!(
                "rank {:>3}  positives {:>5}  u_j {}",
                r.rank, r.positive_count, rate
            );
        }
        println!("trend {:.4}", report.trend());
        println!("{}", path.display());
    }
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let curves = predict_curves(&args.p0, args.eps, args.n_max)?;
    let path = run::write_predict_curves(&args.out, &curves)?;
    if !args.quiet {
        for c in &curves {
            let peak = &c.points[c.argmax_n() - 1];
            println!(
                "p0={:<12} peak delta {:.4} at n={}",
                c.p0, peak.delta, peak.n
            );
        }
        println!("{}", path.display());
    }
    Ok(())
}

fn presets() {
    println!("{:<16} {:>2} {:>6} {:>9}", "preset", "K", "kl", "rank_coef");
    for p in Preset::ALL {
        let (k, kl, rank) = p.settings();
        let rank = rank.map_or("-".to_owned(), |r| r.to_string());
        println!("{:<16} {:>2} {:>6} {:>9}", p.name(), k, kl, rank);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Predict(a) => predict(a),
        Command::Presets => {
            presets();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
