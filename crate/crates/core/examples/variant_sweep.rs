//! Trains several presets over a few seeds and prints the headline numbers.
//!
//! cargo run --release -p grpo-lab --example variant_sweep -- [steps] [seeds] [presets...]

use grpo_lab::config::{Preset, RunConfig, Seeds};
use grpo_lab::grpo::{self, NullSink};
use grpo_lab::run::uplift_on_eval_states;

fn main() -> grpo_lab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(200);
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let presets: Vec<Preset> = if args.len() > 2 {
        args[2..]
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()?
    } else {
        vec![
            Preset::Default,
            Preset::Unlikeliness1,
            Preset::Unlikeliness2,
            Preset::Epochs2,
        ]
    };
    println!(
        "{:<16} {:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "preset", "seed", "p1@1 0", "p1@1 T", "p32@5 0", "p32@5 T", "ent T", "trend", "p32@4 T"
    );
    for preset in &presets {
        for seed in 0..seeds {
            let mut cfg = RunConfig::for_preset(*preset);
            cfg.seeds = Seeds::from_base(seed);
            cfg.train.num_steps = steps;
            cfg.eval.every = steps.max(1);
            let out = grpo::train(&cfg, &mut NullSink)?;
            let evals: Vec<_> = out.eval_records().collect();
            let (first, last) = (evals[0], evals[evals.len() - 1]);
            let cell =
                |r: &grpo_lab::record::MetricsRecord, tau, n| r.pass_cell(tau, n).unwrap().exact;
            let report = uplift_on_eval_states(
                &out.env,
                &out.initial,
                &out.policy,
                cfg.train.group_size,
                cfg.eval.uplift_tau,
                cfg.eval.num_states,
                cfg.seeds.eval,
            );
            println!(
                "{:<16} {:>4} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                preset.name(),
                seed,
                cell(first, 1.0, 1),
                cell(last, 1.0, 1),
                cell(first, 5.0, 32),
                cell(last, 5.0, 32),
                last.get("entropy").unwrap(),
                report.trend(),
                cell(last, 4.0, 32),
            );
        }
    }
    Ok(())
}
