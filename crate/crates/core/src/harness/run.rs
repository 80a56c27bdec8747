//! Executes scenarios on the simulator.

use std::collections::{BTreeSet, VecDeque};
use std::rc::Rc;

use thiserror::Error;

use super::scenario::{Scenario, Step};
use super::verdict::{check, summarize, RankOutput, RunReport, Verdict};
use crate::protocol::{CommFuture, Communicator, Instance, Mode, ProtocolError, WaitOutcome};
use crate::transport::{
    explore, ExploreBudget, ExploreStats, RankId, ScheduleSeed, SimConfig, SimEndpoint, Simulation,
    Trace, Transport,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HarnessError {
    #[error("hard faults unsupported in black-channel mode")]
    HardFaultsUnsupported,
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Payload sent by `isend`: the sender's rank, repeated.
fn payload(rank: usize) -> Vec<u8> {
    vec![rank as u8; 8]
}

const RECV_CAPACITY: usize = 64;

struct RankState {
    comm: Option<Communicator<SimEndpoint>>,
    futures: VecDeque<CommFuture>,
    out: RankOutput,
}

impl RankState {
    /// Runs one step; returns an error outcome if the step produced one.
    async fn step(&mut self, ep: &SimEndpoint, step: Step) -> Option<WaitOutcome> {
        match step {
            Step::Delay(k) => {
                for _ in 0..k {
                    ep.yield_now().await;
                }
                return None;
            }
            Step::Catch => return None,
            _ => {}
        }
        let comm = self.comm.as_mut()?;
        match step {
            Step::Isend { dest, tag } => {
                let me = comm.rank();
                match comm.isend(dest, tag, payload(me)) {
                    Ok(f) => self.futures.push_back(f),
                    Err(ProtocolError::Unusable(_)) => {}
                    Err(e) => panic!("rank {me}: isend failed: {e}"),
                }
                None
            }
            Step::Irecv { source, tag } => {
                let me = comm.rank();
                match comm.irecv(source, tag, RECV_CAPACITY) {
                    Ok(f) => self.futures.push_back(f),
                    Err(ProtocolError::Unusable(_)) => {}
                    Err(e) => panic!("rank {me}: irecv failed: {e}"),
                }
                None
            }
            Step::Wait => {
                let f = self.futures.pop_front()?;
                let o = comm.wait(f).await;
                (!o.is_success()).then_some(o)
            }
            Step::Allreduce { op, value } => match comm.allreduce(op, &[value]).await {
                Ok(v) => {
                    self.out.reductions.push(v[0]);
                    None
                }
                Err(o) => Some(o),
            },
            Step::Barrier => {
                let o = comm.barrier().await;
                (!o.is_success()).then_some(o)
            }
            Step::Signal(code) => Some(comm.signal_error(code).await),
            Step::Unwind => {
                let comm = self.comm.take().expect("checked above");
                Some(comm.exit_scope(true).await)
            }
            Step::Shrink => {
                if comm.mode() == Mode::Ulfm {
                    if let Ok(shrunk) = comm.shrink().await {
                        self.out.shrink = Some(shrunk.group().iter().map(|r| r.0).collect());
                    }
                }
                None
            }
            Step::Delay(_) | Step::Catch => unreachable!(),
        }
    }
}

/// One rank's program: acquire the instance, duplicate the world, run the
/// steps up to the first error, then the steps after `catch`, then leave the
/// communicator's scope.
async fn rank_program(ep: SimEndpoint, mode: Mode, steps: Rc<Vec<Step>>) -> RankOutput {
    let instance = Instance::acquire(ep.clone()).expect("one instance per rank");
    let comm = instance.duplicate_world(mode);
    let mut st = RankState {
        comm: Some(comm),
        futures: VecDeque::new(),
        out: RankOutput {
            outcome: WaitOutcome::Success(None),
            reductions: Vec::new(),
            shrink: None,
        },
    };
    let split = steps.iter().position(|s| *s == Step::Catch);
    let (main, handler) = match split {
        Some(i) => (&steps[..i], &steps[i + 1..]),
        None => (&steps[..], &[][..]),
    };
    let mut error = None;
    for &s in main {
        if let Some(o) = st.step(&ep, s).await {
            error = Some(o);
            break;
        }
    }
    if error.is_some() {
        for &s in handler {
            st.step(&ep, s).await;
        }
    }
    if let Some(comm) = st.comm.take() {
        let o = comm.exit_scope(false).await;
        if error.is_none() && !o.is_success() {
            error = Some(o);
        }
    }
    st.out.outcome = error.unwrap_or(WaitOutcome::Success(None));
    drop(instance);
    st.out
}

/// Builds the simulation for `scenario` in `mode` without running it.
pub fn build(scenario: &Scenario, mode: Mode) -> Result<Simulation<RankOutput>, HarnessError> {
    scenario.validate().map_err(HarnessError::Invalid)?;
    if mode == Mode::BlackChannel && scenario.faults.has_kills() {
        return Err(HarnessError::HardFaultsUnsupported);
    }
    let cfg = SimConfig::new(scenario.n)
        .with_liveness(mode == Mode::Ulfm)
        .with_faults(scenario.faults.clone());
    let mut sim = Simulation::new(cfg);
    for (r, prog) in scenario.programs.iter().enumerate() {
        let prog = Rc::new(prog.clone());
        sim.spawn(RankId::from(r), move |ep| rank_program(ep, mode, prog));
    }
    Ok(sim)
}

/// A single seeded run.
pub struct RunResult {
    pub report: RunReport,
    pub trace: Trace<RankOutput>,
    /// Violated expectations.
    pub mismatches: Vec<String>,
}

pub fn run_scenario(
    scenario: &Scenario,
    mode: Mode,
    seed: ScheduleSeed,
) -> Result<RunResult, HarnessError> {
    let trace = build(scenario, mode)?.run(seed);
    let (verdict, stats) = summarize(&trace);
    let mismatches = check(scenario, &verdict, &stats);
    Ok(RunResult {
        report: RunReport {
            scenario: scenario.name.clone(),
            mode,
            seed: Some(seed.0),
            verdict,
            stats,
        },
        trace,
        mismatches,
    })
}

/// Distinct verdicts over the explored interleavings.
#[derive(Debug, Clone)]
pub struct Exploration {
    pub verdicts: BTreeSet<Verdict>,
    pub stats: ExploreStats,
    /// Violated expectations, deduplicated, with the number of runs that hit them.
    pub mismatches: Vec<(String, usize)>,
    pub max_leaks: u64,
    pub max_error_sends: usize,
}

pub fn explore_scenario(
    scenario: &Scenario,
    mode: Mode,
    budget: ExploreBudget,
) -> Result<Exploration, HarnessError> {
    build(scenario, mode)?;
    let mut verdicts = BTreeSet::new();
    let mut mismatches: Vec<(String, usize)> = Vec::new();
    let mut max_leaks = 0;
    let mut max_error_sends = 0;
    let stats = explore(
        || build(scenario, mode).expect("validated above"),
        budget,
        |trace| {
            let (verdict, stats) = summarize(&trace);
            for m in check(scenario, &verdict, &stats) {
                match mismatches.iter_mut().find(|(x, _)| *x == m) {
                    Some(entry) => entry.1 += 1,
                    None => mismatches.push((m, 1)),
                }
            }
            max_leaks = max_leaks.max(stats.leak_count);
            max_error_sends =
                max_error_sends.max(stats.error_sends.iter().copied().max().unwrap_or(0));
            verdicts.insert(verdict);
        },
    );
    Ok(Exploration {
        verdicts,
        stats,
        mismatches,
        max_leaks,
        max_error_sends,
    })
}
