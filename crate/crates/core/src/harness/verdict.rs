//! Per-run verdicts and expectation checking.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scenario::{Expectation, Scenario};
use crate::protocol::wire::ERR_TAG;
use crate::protocol::{ErrorReport, Mode, WaitOutcome};
use crate::transport::{ChannelRole, RankEnd, RankId, Termination, Trace};

/// Coarse classification of how a rank ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeKind {
    Success,
    Propagated,
    CorruptedComm,
    TransportError,
    Killed,
    /// Still waiting when the run ended.
    Blocked,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 6] = [
        OutcomeKind::Success,
        OutcomeKind::Propagated,
        OutcomeKind::CorruptedComm,
        OutcomeKind::TransportError,
        OutcomeKind::Killed,
        OutcomeKind::Blocked,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Success => "success",
            OutcomeKind::Propagated => "propagated",
            OutcomeKind::CorruptedComm => "corrupted-comm",
            OutcomeKind::TransportError => "transport-error",
            OutcomeKind::Killed => "killed",
            OutcomeKind::Blocked => "blocked",
        }
    }

    pub fn of(outcome: &WaitOutcome) -> Self {
        match outcome {
            WaitOutcome::Success(_) => OutcomeKind::Success,
            WaitOutcome::Propagated(_) => OutcomeKind::Propagated,
            WaitOutcome::CorruptedComm => OutcomeKind::CorruptedComm,
            WaitOutcome::TransportError(_) => OutcomeKind::TransportError,
        }
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutcomeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OutcomeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown outcome `{s}`"))
    }
}

/// What one rank program returns to the harness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankOutput {
    /// The first error outcome, or the clean scope exit.
    pub outcome: WaitOutcome,
    /// Results of completed allreduce steps, in order.
    pub reductions: Vec<u64>,
    /// World ranks of the shrunk communicator, if a shrink ran.
    pub shrink: Option<Vec<u32>>,
}

impl fmt::Display for RankOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.outcome)
    }
}

/// Schedule-independent result of a run. Two runs with equal verdicts are
/// indistinguishable to the ranks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Verdict {
    pub outcomes: Vec<OutcomeKind>,
    pub reports: Vec<Option<ErrorReport>>,
    pub deadlocked: bool,
    pub step_limit: bool,
    pub reductions: Vec<Vec<u64>>,
    pub shrink: Vec<Option<Vec<u32>>>,
}

impl Verdict {
    /// The report shared by every propagated rank, if they agree and at
    /// least one exists.
    pub fn common_report(&self) -> Option<&ErrorReport> {
        let mut it = self.reports.iter().flatten();
        let first = it.next()?;
        it.all(|r| r == first).then_some(first)
    }

    /// True if every rank holding a report holds the same one.
    pub fn reports_agree(&self) -> bool {
        let mut it = self.reports.iter().flatten();
        match it.next() {
            Some(first) => it.all(|r| r == first),
            None => true,
        }
    }

    /// Outcomes of ranks that were not killed.
    pub fn live_outcomes(&self) -> impl Iterator<Item = OutcomeKind> + '_ {
        self.outcomes
            .iter()
            .copied()
            .filter(|&o| o != OutcomeKind::Killed)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list: Vec<String> = self
            .outcomes
            .iter()
            .zip(&self.reports)
            .map(|(o, r)| match r {
                Some(r) => format!("{o}[{r}]"),
                None => o.to_string(),
            })
            .collect();
        write!(f, "{}", list.join(" "))?;
        if self.deadlocked {
            f.write_str(" deadlocked")?;
        }
        if self.step_limit {
            f.write_str(" step-limit")?;
        }
        Ok(())
    }
}

/// Schedule-dependent measurements of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub steps: u64,
    pub messages: BTreeMap<String, usize>,
    /// Error notices sent per rank on error channels.
    pub error_sends: Vec<usize>,
    /// Collective-internal requests abandoned by interrupted collectives.
    pub leak_count: u64,
}

impl RunStats {
    pub fn total_messages(&self) -> usize {
        self.messages.values().sum()
    }
}

/// Everything reported about one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub mode: Mode,
    pub seed: Option<u64>,
    pub verdict: Verdict,
    pub stats: RunStats,
}

impl RunReport {
    /// One-line JSON record.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

const ROLES: [(ChannelRole, &str); 3] = [
    (ChannelRole::Data, "data"),
    (ChannelRole::Error, "error"),
    (ChannelRole::Control, "control"),
];

pub fn summarize(trace: &Trace<RankOutput>) -> (Verdict, RunStats) {
    let n = trace.ends.len();
    let mut verdict = Verdict {
        outcomes: Vec::with_capacity(n),
        reports: Vec::with_capacity(n),
        deadlocked: trace.termination == Termination::Deadlocked,
        step_limit: trace.termination == Termination::StepLimit,
        reductions: Vec::with_capacity(n),
        shrink: Vec::with_capacity(n),
    };
    for end in &trace.ends {
        match end {
            RankEnd::Finished(out) => {
                verdict.outcomes.push(OutcomeKind::of(&out.outcome));
                verdict.reports.push(out.outcome.report().cloned());
                verdict.reductions.push(out.reductions.clone());
                verdict.shrink.push(out.shrink.clone());
            }
            RankEnd::Killed | RankEnd::Blocked => {
                verdict.outcomes.push(if matches!(end, RankEnd::Killed) {
                    OutcomeKind::Killed
                } else {
                    OutcomeKind::Blocked
                });
                verdict.reports.push(None);
                verdict.reductions.push(Vec::new());
                verdict.shrink.push(None);
            }
        }
    }
    let stats = RunStats {
        steps: trace.steps,
        messages: ROLES
            .iter()
            .map(|&(role, name)| (name.to_string(), trace.messages_on(role)))
            .collect(),
        error_sends: (0..n)
            .map(|r| trace.sends_from(RankId::from(r), ChannelRole::Error, ERR_TAG))
            .collect(),
        leak_count: trace.leak_count,
    };
    (verdict, stats)
}

/// Returns one message per violated expectation.
pub fn check(scenario: &Scenario, verdict: &Verdict, stats: &RunStats) -> Vec<String> {
    let mut failures = Vec::new();
    for e in &scenario.expectations {
        let ok = match e {
            Expectation::All(o) => verdict.live_outcomes().all(|x| x == *o),
            Expectation::Rank(r, o) => verdict.outcomes[*r] == *o,
            Expectation::Report(None) => verdict.reports.iter().all(Option::is_none),
            Expectation::Report(Some(want)) => {
                verdict.reports_agree() && verdict.common_report() == Some(want)
            }
            Expectation::Deadlocked(b) => verdict.deadlocked == *b,
            Expectation::Leak(b) => (stats.leak_count > 0) == *b,
            Expectation::ShrinkSize(k) => {
                let mut sizes = verdict.shrink.iter().flatten().map(Vec::len).peekable();
                sizes.peek().is_some() && sizes.all(|s| s == *k)
            }
            Expectation::ErrorSends { rank, count } => stats.error_sends[*rank] == *count,
        };
        if !ok {
            failures.push(format!(
                "expect {e}: got {verdict} leaks={}",
                stats.leak_count
            ));
        }
    }
    failures
}
