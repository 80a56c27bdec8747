//! Collective algorithms as per-rank phase plans over point-to-point messages.
//!
//! A plan is the list of phases one rank executes. In each phase the rank
//! posts at most one send (of its current value) and at most one receive,
//! waits for both, then merges the received value. Every phase carries a
//! step number that is added to the collective's base tag, so no two phases
//! of one collective share a tag.

use serde::{Deserialize, Serialize};

use super::wire::Codec;
use crate::transport::{ChannelId, RankId, RequestId, SendMode, Source, Tag, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceOp {
    Sum,
    Max,
    Band,
}

impl ReduceOp {
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            ReduceOp::Sum => a.wrapping_add(b),
            ReduceOp::Max => a.max(b),
            ReduceOp::Band => a & b,
        }
    }

    /// Element-wise combination; both sides must have equal length.
    pub fn combine(self, acc: &mut [u64], other: &[u64]) {
        assert_eq!(
            acc.len(),
            other.len(),
            "mismatched collective contributions"
        );
        for (a, b) in acc.iter_mut().zip(other) {
            *a = self.apply(*a, *b);
        }
    }
}

impl std::str::FromStr for ReduceOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(ReduceOp::Sum),
            "max" => Ok(ReduceOp::Max),
            "band" => Ok(ReduceOp::Band),
            other => Err(format!("unknown reduction `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Merge {
    Combine,
    Replace,
    Discard,
}

/// Ranks are indices into the collective's group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub step: u32,
    pub send_to: Option<usize>,
    pub recv_from: Option<usize>,
    pub merge: Merge,
}

impl Phase {
    fn send(step: u32, to: usize) -> Self {
        Phase {
            step,
            send_to: Some(to),
            recv_from: None,
            merge: Merge::Discard,
        }
    }

    fn recv(step: u32, from: usize, merge: Merge) -> Self {
        Phase {
            step,
            send_to: None,
            recv_from: Some(from),
            merge,
        }
    }
}

/// Recursive doubling; groups that are not a power of two first fold the
/// surplus ranks into their odd neighbours and unfold them at the end.
pub fn allreduce_plan(rank: usize, size: usize) -> Vec<Phase> {
    assert!(rank < size);
    let p = prev_power_of_two(size);
    let rem = size - p;
    let rounds = p.trailing_zeros();
    let mut plan = Vec::new();
    let folded = rank < 2 * rem;
    if folded && rank.is_multiple_of(2) {
        plan.push(Phase::send(0, rank + 1));
        plan.push(Phase::recv(rounds + 1, rank + 1, Merge::Replace));
        return plan;
    }
    if folded {
        plan.push(Phase::recv(0, rank - 1, Merge::Combine));
    }
    let vrank = if folded { rank / 2 } else { rank - rem };
    for i in 0..rounds {
        let vpeer = vrank ^ (1 << i);
        let peer = if vpeer < rem {
            vpeer * 2 + 1
        } else {
            vpeer + rem
        };
        plan.push(Phase {
            step: i + 1,
            send_to: Some(peer),
            recv_from: Some(peer),
            merge: Merge::Combine,
        });
    }
    if folded {
        plan.push(Phase::send(rounds + 1, rank - 1));
    }
    plan
}

/// Dissemination barrier: in round k talk to the ranks at distance 2^k.
pub fn barrier_plan(rank: usize, size: usize) -> Vec<Phase> {
    assert!(rank < size);
    let mut plan = Vec::new();
    let mut dist = 1;
    let mut step = 0;
    while dist < size {
        plan.push(Phase {
            step,
            send_to: Some((rank + dist) % size),
            recv_from: Some((rank + size - dist) % size),
            merge: Merge::Discard,
        });
        dist <<= 1;
        step += 1;
    }
    plan
}

/// Inclusive prefix reduction (Hillis-Steele). The send of each round
/// carries the value before that round's merge.
pub fn scan_plan(rank: usize, size: usize) -> Vec<Phase> {
    assert!(rank < size);
    let mut plan = Vec::new();
    let mut dist = 1;
    let mut step = 0;
    while dist < size {
        let send_to = (rank + dist < size).then_some(rank + dist);
        let recv_from = rank.checked_sub(dist);
        if send_to.is_some() || recv_from.is_some() {
            plan.push(Phase {
                step,
                send_to,
                recv_from,
                merge: Merge::Combine,
            });
        }
        dist <<= 1;
        step += 1;
    }
    plan
}

/// Binomial-tree broadcast from `root`.
pub fn bcast_plan(rank: usize, size: usize, root: usize) -> Vec<Phase> {
    assert!(rank < size && root < size);
    let vrank = (rank + size - root) % size;
    let mut plan = Vec::new();
    let mut mask = 1;
    while mask < size {
        if vrank & mask != 0 {
            let parent = (vrank - mask + root) % size;
            plan.push(Phase::recv(mask.trailing_zeros(), parent, Merge::Replace));
            break;
        }
        mask <<= 1;
    }
    mask >>= 1;
    while mask > 0 {
        if vrank + mask < size {
            plan.push(Phase::send(
                mask.trailing_zeros(),
                (vrank + mask + root) % size,
            ));
        }
        mask >>= 1;
    }
    plan
}

fn prev_power_of_two(n: usize) -> usize {
    assert!(n > 0);
    1 << (usize::BITS - 1 - n.leading_zeros())
}

/// Evaluates plans for every rank without messaging, by running the phases
/// in lock-step. Used to check plans against direct computation.
pub fn simulate_plans(plans: &[Vec<Phase>], inputs: &[Vec<u64>], op: ReduceOp) -> Vec<Vec<u64>> {
    let n = plans.len();
    let mut values: Vec<Vec<u64>> = inputs.to_vec();
    let mut cursor = vec![0usize; n];
    // Messages keyed by (src, dst, step).
    let mut mailbox: std::collections::BTreeMap<(usize, usize, u32), Vec<u64>> =
        std::collections::BTreeMap::new();
    let mut sent = vec![false; n];
    loop {
        let mut progressed = false;
        for r in 0..n {
            let Some(ph) = plans[r].get(cursor[r]) else {
                continue;
            };
            if !sent[r] {
                if let Some(d) = ph.send_to {
                    mailbox.insert((r, d, ph.step), values[r].clone());
                }
                sent[r] = true;
                progressed = true;
            }
            let got = match ph.recv_from {
                Some(s) => match mailbox.remove(&(s, r, ph.step)) {
                    Some(v) => Some(v),
                    None => continue,
                },
                None => None,
            };
            if let Some(v) = got {
                match ph.merge {
                    Merge::Combine => op.combine(&mut values[r], &v),
                    Merge::Replace => values[r] = v,
                    Merge::Discard => {}
                }
            }
            cursor[r] += 1;
            sent[r] = false;
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    assert!(
        (0..n).all(|r| cursor[r] == plans[r].len()),
        "plans deadlocked"
    );
    assert!(mailbox.is_empty(), "unconsumed plan messages");
    values
}

/// Why a phase wait gave up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Interrupt {
    /// An error notification arrived on the error channel.
    ErrorNotice,
    /// The communicator was revoked.
    Revoked,
    /// A peer died.
    HardFault,
    /// Any other transport failure.
    Transport(crate::transport::TransportErrorKind),
}

/// Decides how a rank waits for the requests of one phase.
#[allow(async_fn_in_trait)]
pub(crate) trait PhaseWaiter {
    async fn wait_phase(&mut self, reqs: &[RequestId]) -> Result<(), Interrupt>;
}

/// Waits for all requests; any errored request aborts the collective.
pub(crate) struct PlainWaiter<'a, T>(pub &'a T);

impl<T: Transport> PhaseWaiter for PlainWaiter<'_, T> {
    async fn wait_phase(&mut self, reqs: &[RequestId]) -> Result<(), Interrupt> {
        crate::transport::wait_all(self.0, reqs).await;
        first_error(self.0, reqs)
    }
}

pub(crate) fn first_error<T: Transport>(t: &T, reqs: &[RequestId]) -> Result<(), Interrupt> {
    use crate::transport::{RequestState, TransportErrorKind};
    for &q in reqs {
        if let RequestState::Errored(k) = t.state(q) {
            return Err(match k {
                TransportErrorKind::Revoked => Interrupt::Revoked,
                k if k.is_hard_fault() => Interrupt::HardFault,
                k => Interrupt::Transport(k),
            });
        }
    }
    Ok(())
}

/// Where and how one collective runs.
pub(crate) struct CollectiveCtx<'a, T> {
    pub t: &'a T,
    pub group: &'a [RankId],
    pub channel: ChannelId,
    pub tag_base: Tag,
    pub codec: Codec,
    /// Flag internal requests as non-cancellable.
    pub user: bool,
}

impl<T: Transport> CollectiveCtx<'_, T> {
    /// Executes `plan` starting from `value`. On interruption, requests of
    /// the current phase that are still pending are abandoned and recorded
    /// as leaked.
    pub async fn run<W: PhaseWaiter>(
        &self,
        plan: &[Phase],
        mut value: Vec<u64>,
        op: ReduceOp,
        waiter: &mut W,
    ) -> Result<Vec<u64>, Interrupt> {
        let len = value.len();
        for ph in plan {
            let tag = self.tag_base + Tag::from(ph.step);
            let mut reqs = Vec::with_capacity(2);
            if let Some(d) = ph.send_to {
                reqs.push(self.t.post_send(
                    self.group[d],
                    self.channel,
                    tag,
                    self.codec.encode(&value),
                    SendMode::Standard,
                ));
            }
            let recv = ph.recv_from.map(|s| {
                self.t.post_recv(
                    Source::Rank(self.group[s]),
                    self.channel,
                    tag,
                    self.codec.capacity(len),
                )
            });
            reqs.extend(recv);
            if self.user {
                for &q in &reqs {
                    self.t.mark_collective(q);
                }
            }
            if let Err(e) = waiter.wait_phase(&reqs).await {
                self.t.record_leak(&reqs);
                return Err(e);
            }
            if let Some(r) = recv {
                let c = self
                    .t
                    .take_completion(r)
                    .expect("completed receive without payload");
                let other = self
                    .codec
                    .decode(&c.payload)
                    .expect("malformed collective payload");
                match ph.merge {
                    Merge::Combine => op.combine(&mut value, &other),
                    Merge::Replace => value = other,
                    Merge::Discard => {}
                }
            }
        }
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_all(size: usize, plan: impl Fn(usize) -> Vec<Phase>, op: ReduceOp) -> Vec<Vec<u64>> {
        let plans: Vec<_> = (0..size).map(&plan).collect();
        let inputs: Vec<Vec<u64>> = (0..size).map(|r| vec![r as u64 + 1]).collect();
        simulate_plans(&plans, &inputs, op)
    }

    #[test]
    fn allreduce_sums_for_every_size() {
        for n in 1..=17 {
            let out = run_all(n, |r| allreduce_plan(r, n), ReduceOp::Sum);
            let expect = (n * (n + 1) / 2) as u64;
            assert!(out.iter().all(|v| v == &[expect]), "n={n}: {out:?}");
        }
    }

    #[test]
    fn allreduce_of_rank_ids_is_six_for_four() {
        let plans: Vec<_> = (0..4).map(|r| allreduce_plan(r, 4)).collect();
        let inputs: Vec<Vec<u64>> = (0..4).map(|r| vec![r]).collect();
        let out = simulate_plans(&plans, &inputs, ReduceOp::Sum);
        assert!(out.iter().all(|v| v == &[6]));
    }

    #[test]
    fn band_of_mixed_votes_is_zero() {
        let plans: Vec<_> = (0..4).map(|r| allreduce_plan(r, 4)).collect();
        let inputs = vec![vec![1], vec![1], vec![0], vec![1]];
        let out = simulate_plans(&plans, &inputs, ReduceOp::Band);
        assert!(out.iter().all(|v| v == &[0]));
    }

    #[test]
    fn scan_is_inclusive_prefix() {
        for n in 1..=9 {
            let out = run_all(n, |r| scan_plan(r, n), ReduceOp::Sum);
            for (r, v) in out.iter().enumerate() {
                assert_eq!(v[0], ((r + 1) * (r + 2) / 2) as u64, "n={n} r={r}");
            }
        }
    }

    #[test]
    fn bcast_reaches_everyone_from_every_root() {
        for n in 1..=9 {
            for root in 0..n {
                let out = run_all(n, |r| bcast_plan(r, n, root), ReduceOp::Sum);
                assert!(
                    out.iter().all(|v| v == &[root as u64 + 1]),
                    "n={n} root={root}"
                );
            }
        }
    }

    #[test]
    fn barrier_talks_to_ceil_log2_peers() {
        assert!(barrier_plan(0, 1).is_empty());
        assert_eq!(barrier_plan(0, 5).len(), 3);
        for n in 1..=9 {
            run_all(n, |r| barrier_plan(r, n), ReduceOp::Sum);
        }
    }

    #[test]
    fn phase_steps_are_distinct_per_rank() {
        for n in 1..=12 {
            for r in 0..n {
                for plan in [
                    allreduce_plan(r, n),
                    barrier_plan(r, n),
                    scan_plan(r, n),
                    bcast_plan(r, n, n - 1),
                ] {
                    let mut steps: Vec<u32> = plan.iter().map(|p| p.step).collect();
                    steps.sort_unstable();
                    steps.dedup();
                    assert_eq!(steps.len(), plan.len());
                    assert!(steps.iter().all(|&s| s < 256));
                }
            }
        }
    }
}
