//! Propagation micro-benchmark: duplicate, signal from rank 0, resolve,
//! tear down.

use std::fmt::Write as _;
use std::time::Instant;

use super::run::{run_scenario, HarnessError};
use super::scenario::{Scenario, Step};
use crate::protocol::{ErrorCode, Mode};
use crate::transport::ScheduleSeed;

pub const CSV_HEADER: &str = "iter,mode,ranks,sim_steps,messages,signal_sends,wall_ns";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchRow {
    pub iter: usize,
    pub mode: Mode,
    pub ranks: usize,
    pub sim_steps: u64,
    /// Every send and revocation notice posted during the iteration.
    pub messages: usize,
    /// Error-notice sends posted by rank 0.
    pub signal_sends: usize,
    /// Informational only.
    pub wall_ns: u128,
}

/// Rank 0 signals while every other rank waits on a receive from it.
pub fn bench_scenario(ranks: usize) -> Scenario {
    Scenario::new("bench", ranks)
        .program(0, [Step::Signal(ErrorCode::new(1).expect("valid code"))])
        .others(
            &[0],
            [
                Step::Irecv {
                    source: Some(0),
                    tag: 1,
                },
                Step::Wait,
            ],
        )
}

/// Runs `iters` sequential iterations; iteration `i` uses schedule seed `i`.
pub fn bench(ranks: usize, iters: usize, mode: Mode) -> Result<Vec<BenchRow>, HarnessError> {
    if ranks < 2 {
        return Err(HarnessError::Invalid(
            "bench needs at least two ranks".into(),
        ));
    }
    let scenario = bench_scenario(ranks);
    let mut rows = Vec::with_capacity(iters);
    for iter in 0..iters {
        let start = Instant::now();
        let r = run_scenario(&scenario, mode, ScheduleSeed(iter as u64))?;
        let wall_ns = start.elapsed().as_nanos();
        rows.push(BenchRow {
            iter,
            mode,
            ranks,
            sim_steps: r.trace.steps,
            messages: r.trace.total_messages(),
            signal_sends: r.report.stats.error_sends[0],
            wall_ns,
        });
    }
    Ok(rows)
}

fn summary(mut v: Vec<u128>) -> String {
    v.sort_unstable();
    match v.len() {
        0 => String::new(),
        n => format!("{}/{}/{}", v[0], median(&v), v[n - 1]),
    }
}

/// Lower median for even lengths so the value is always a data point.
fn median(sorted: &[u128]) -> u128 {
    sorted[(sorted.len() - 1) / 2]
}

/// Data rows followed by one `summary` row holding `min/median/max` for
/// each numeric column.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CSV_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter, r.mode, r.ranks, r.sim_steps, r.messages, r.signal_sends, r.wall_ns
        );
    }
    if let Some(first) = rows.first() {
        let col = |f: fn(&BenchRow) -> u128| summary(rows.iter().map(f).collect());
        let _ = writeln!(
            out,
            "summary,{},{},{},{},{},{}",
            first.mode,
            col(|r| r.ranks as u128),
            col(|r| r.sim_steps as u128),
            col(|r| r.messages as u128),
            col(|r| r.signal_sends as u128),
            col(|r| r.wall_ns),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_count_and_summary() {
        let rows = bench(2, 3, Mode::BlackChannel).unwrap();
        let csv = to_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[4].starts_with("summary,black-channel,2/2/2,"));
    }

    #[test]
    fn median_is_lower_middle() {
        assert_eq!(summary(vec![4, 1, 3, 2]), "1/2/4");
        assert_eq!(summary(vec![5]), "5/5/5");
    }
}
