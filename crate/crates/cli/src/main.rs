use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use errprop::harness::{bench, explore_scenario, run_scenario, to_csv, HarnessError, Scenario};
use errprop::protocol::Mode;
use errprop::transport::{ExploreBudget, ScheduleSeed};
use serde_json::json;

/// Simulated error propagation: scenario runs, schedule exploration and the
/// propagation micro-benchmark.
#[derive(Parser)]
#[command(name = "errprop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario under one schedule and print a JSON verdict record per mode.
    Run {
        file: PathBuf,
        /// Overrides the modes listed in the scenario.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the rendered transport trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Explore every interleaving within budget and print one JSON record per
    /// distinct verdict.
    Explore {
        file: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, default_value_t = 100_000)]
        max_executions: usize,
        #[arg(long, default_value_t = 2_000)]
        max_depth: usize,
        /// Enumerate every interleaving instead of one per equivalence class.
        #[arg(long)]
        no_reduction: bool,
    },
    /// Time duplicate, signal from rank 0, resolution and teardown; emits CSV.
    Bench {
        #[arg(long, default_value_t = 2)]
        ranks: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value = "black-channel")]
        mode: Mode,
    },
}

const EXIT_MISMATCH: u8 = 1;
const EXIT_PARSE: u8 = 2;

fn load(path: &Path) -> Result<Scenario, ExitCode> {
    let text = fs::read_to_string(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(EXIT_PARSE)
    })?;
    text.parse().map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(EXIT_PARSE)
    })
}

fn modes(s: &Scenario, mode: Option<Mode>) -> Vec<Mode> {
    match mode {
        Some(m) => vec![m],
        None => s.modes.clone(),
    }
}

fn harness_error(e: HarnessError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        HarnessError::HardFaultsUnsupported => ExitCode::from(EXIT_MISMATCH),
        HarnessError::Invalid(_) => ExitCode::from(EXIT_PARSE),
    }
}

fn cmd_run(file: &Path, mode: Option<Mode>, seed: u64, trace: Option<&Path>) -> ExitCode {
    let s = match load(file) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let mut ok = true;
    let mut dump = String::new();
    for m in modes(&s, mode) {
        let r = match run_scenario(&s, m, ScheduleSeed(seed)) {
            Ok(r) => r,
            Err(e) => return harness_error(e),
        };
        println!("{}", r.report.to_json());
        for m in &r.mismatches {
            eprintln!("mismatch: {m}");
        }
        ok &= r.mismatches.is_empty();
        dump.push_str(&r.trace.render());
    }
    if let Some(path) = trace {
        if let Err(e) = fs::write(path, dump) {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(EXIT_MISMATCH);
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_MISMATCH)
    }
}

fn cmd_explore(file: &Path, mode: Option<Mode>, budget: ExploreBudget) -> ExitCode {
    let s = match load(file) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let mut ok = true;
    for m in modes(&s, mode) {
        let e = match explore_scenario(&s, m, budget) {
            Ok(e) => e,
            Err(e) => return harness_error(e),
        };
        for v in &e.verdicts {
            let record = json!({ "scenario": s.name, "mode": m, "verdict": v });
            println!("{record}");
        }
        let summary = json!({
            "scenario": s.name,
            "mode": m,
            "executions": e.stats.executions,
            "pruned": e.stats.pruned,
            "truncated": e.stats.truncated,
            "coverage": if e.stats.complete() { "full" } else { "partial" },
            "verdicts": e.verdicts.len(),
            "max_leaks": e.max_leaks,
            "max_error_sends": e.max_error_sends,
        });
        println!("{summary}");
        for (m, count) in &e.mismatches {
            eprintln!("mismatch in {count} run(s): {m}");
        }
        ok &= e.mismatches.is_empty();
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_MISMATCH)
    }
}

fn cmd_bench(ranks: usize, iters: usize, mode: Mode) -> ExitCode {
    match bench(ranks, iters, mode) {
        Ok(rows) => {
            print!("{}", to_csv(&rows));
            ExitCode::SUCCESS
        }
        Err(e) => harness_error(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            file,
            mode,
            seed,
            trace,
        } => cmd_run(&file, mode, seed, trace.as_deref()),
        Command::Explore {
            file,
            mode,
            max_executions,
            max_depth,
            no_reduction,
        } => cmd_explore(
            &file,
            mode,
            ExploreBudget {
                max_depth,
                max_executions,
                reduction: !no_reduction,
            },
        ),
        Command::Bench { ranks, iters, mode } => cmd_bench(ranks, iters, mode),
    }
}
