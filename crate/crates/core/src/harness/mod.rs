//! Scenario files, simulated runs, verdicts and reference oracles.

pub mod bench;
pub mod oracle;
pub mod run;
pub mod scenario;
pub mod verdict;

pub use bench::{bench, to_csv, BenchRow, CSV_HEADER};
pub use oracle::{oracle_failed_ranks, simulate_failed_ranks};
pub use run::{build, explore_scenario, run_scenario, Exploration, HarnessError, RunResult};
pub use scenario::{Expectation, Scenario, ScenarioError, Step};
pub use verdict::{check, summarize, OutcomeKind, RankOutput, RunReport, RunStats, Verdict};
