//! Message-free reference for failed-rank resolution, and a driver that runs
//! the message-passing resolution on the simulator for comparison.

use std::collections::BTreeMap;
use std::fmt;

use crate::protocol::{determine_failed, ErrorCode, ErrorReport, FailedRanksError};
use crate::transport::{RankId, ScheduleSeed, SimConfig, Simulation, Termination, Transport};

/// The report every rank must obtain when exactly the ranks in `failed`
/// signalled their codes.
pub fn oracle_failed_ranks(
    failed: &BTreeMap<u32, ErrorCode>,
) -> Result<ErrorReport, FailedRanksError> {
    ErrorReport::new(failed.iter().map(|(&r, &c)| (r, c)).collect())
}

#[derive(Debug)]
struct Resolved(Result<ErrorReport, FailedRanksError>);

impl fmt::Display for Resolved {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Ok(r) => write!(f, "{r}"),
            Err(e) => write!(f, "{e}"),
        }
    }
}

/// Runs the message-passing resolution on `n` simulated ranks under one
/// schedule and returns each rank's result.
pub fn simulate_failed_ranks(
    n: usize,
    failed: &BTreeMap<u32, ErrorCode>,
    seed: ScheduleSeed,
) -> Vec<Result<ErrorReport, FailedRanksError>> {
    let mut sim: Simulation<Resolved> = Simulation::new(SimConfig::new(n));
    let group: Vec<RankId> = (0..n).map(RankId::from).collect();
    for r in 0..n {
        let group = group.clone();
        let code = failed.get(&(r as u32)).copied();
        sim.spawn(RankId::from(r), move |ep| async move {
            let channel = ep.world_channel();
            Resolved(determine_failed(&ep, &group, channel, r, code).await)
        });
    }
    let trace = sim.run(seed);
    assert_eq!(
        trace.termination,
        Termination::Completed,
        "resolution did not complete"
    );
    trace
        .ends
        .into_iter()
        .map(|e| match e {
            crate::transport::RankEnd::Finished(Resolved(r)) => r,
            other => panic!("rank ended as {other:?}"),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(v: i64) -> ErrorCode {
        ErrorCode::new(v).unwrap()
    }

    #[test]
    fn sorted_by_rank() {
        let failed = BTreeMap::from([(3, code(7)), (0, code(42))]);
        let r = oracle_failed_ranks(&failed).unwrap();
        assert_eq!(r.to_string(), "0:42,3:7");
        let one = oracle_failed_ranks(&BTreeMap::from([(3, code(9))])).unwrap();
        assert_eq!(one.to_string(), "3:9");
    }

    #[test]
    fn empty_map_is_an_error() {
        assert_eq!(
            oracle_failed_ranks(&BTreeMap::new()),
            Err(FailedRanksError::Empty)
        );
    }

    #[test]
    fn simulated_resolution_agrees_on_a_small_case() {
        let failed = BTreeMap::from([(1, code(5)), (2, code(6))]);
        let want = oracle_failed_ranks(&failed).unwrap();
        for seed in 0..8 {
            for got in simulate_failed_ranks(4, &failed, ScheduleSeed(seed)) {
                assert_eq!(got, Ok(want.clone()));
            }
        }
    }
}
