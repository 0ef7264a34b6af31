use std::process::ExitCode;

use aibomgen_harness::{render_matrix, Harness, Scenario};
use clap::Parser;

/// Runs tamper scenarios against an isolated platform and prints the
/// detection matrix. Exits non-zero if any scenario misbehaves.
#[derive(Parser)]
#[command(name = "aibomgen-harness", version)]
struct Args {
    /// Trials per scenario; ARTIFACT_MUTATE runs this many per artifact.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Untampered control runs.
    #[arg(long, default_value_t = 20)]
    controls: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Restrict to these scenarios (e.g. BOM_FORGE). Default: all.
    #[arg(long = "scenario")]
    scenarios: Vec<Scenario>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let scenarios = if args.scenarios.is_empty() { Scenario::ALL.to_vec() } else { args.scenarios };
    let mut harness = match Harness::start(args.seed) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let mut results = Vec::new();
    for scenario in scenarios {
        let trials = if scenario == Scenario::Noop { args.controls } else { args.trials };
        match harness.run_scenario(scenario, trials) {
            Ok(r) => results.push(r),
            Err(e) => {
                eprintln!("{scenario}: {e}");
                return ExitCode::from(2);
            }
        }
    }
    print!("{}", render_matrix(&results));
    if results.iter().all(|r| r.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
