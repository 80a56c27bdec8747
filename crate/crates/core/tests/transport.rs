use std::collections::HashMap;

use errprop::transport::{
    wait_all, ChannelRole, FaultScript, RankEnd, RankId, RequestState, ScheduleSeed, SendMode,
    SimConfig, Simulation, Source, Termination, Trace, TraceEvent, Transport,
};
use proptest::prelude::*;

const R0: RankId = RankId(0);
const R1: RankId = RankId(1);

/// Rank 0 sends one message per entry of `tags`, rank 1 receives them with
/// receives posted in `order`. Returns the payload seen by each receive.
fn stream(tags: Vec<u64>, order: Vec<usize>, seed: u64) -> Trace<String> {
    let mut sim = Simulation::new(SimConfig::new(2));
    let send_tags = tags.clone();
    sim.spawn(R0, move |ep| async move {
        let w = ep.world_channel();
        let reqs: Vec<_> = send_tags
            .iter()
            .enumerate()
            .map(|(i, &t)| ep.post_send(R1, w, t, vec![i as u8], SendMode::Standard))
            .collect();
        wait_all(&ep, &reqs).await;
        String::new()
    });
    sim.spawn(R1, move |ep| async move {
        let w = ep.world_channel();
        let reqs: Vec<_> = order
            .iter()
            .map(|&i| ep.post_recv(Source::Rank(R0), w, tags[i], 1))
            .collect();
        wait_all(&ep, &reqs).await;
        let got: Vec<String> = reqs
            .iter()
            .map(|&q| ep.take_completion(q).unwrap().payload[0].to_string())
            .collect();
        got.join(",")
    });
    sim.run(ScheduleSeed(seed))
}

fn finished(trace: &Trace<String>, rank: usize) -> &str {
    match &trace.ends[rank] {
        RankEnd::Finished(s) => s,
        other => panic!("rank {rank} ended {other:?}"),
    }
}

fn shuffled_order() -> impl Strategy<Value = (Vec<u64>, Vec<usize>)> {
    proptest::collection::vec(1..4u64, 1..8).prop_flat_map(|tags| {
        let n = tags.len();
        (Just(tags), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Messages on one (source, channel, tag) stream are matched in the
    /// order they were sent.
    #[test]
    fn non_overtaking((tags, order) in shuffled_order(), seed in any::<u64>()) {
        let trace = stream(tags.clone(), order.clone(), seed);
        prop_assert_eq!(trace.termination, Termination::Completed);
        let got: Vec<usize> = finished(&trace, 1)
            .split(',')
            .map(|s| s.parse().unwrap())
            .collect();
        let mut next: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, &t) in tags.iter().enumerate() {
            next.entry(t).or_default().push(i);
        }
        for v in next.values_mut() {
            v.reverse();
        }
        for (k, &i) in order.iter().enumerate() {
            let want = next.get_mut(&tags[i]).unwrap().pop().unwrap();
            prop_assert_eq!(got[k], want);
        }
    }

    /// The same seed reproduces the same trace byte for byte.
    #[test]
    fn same_seed_same_trace((tags, order) in shuffled_order(), seed in any::<u64>()) {
        let a = stream(tags.clone(), order.clone(), seed);
        let b = stream(tags, order, seed);
        prop_assert_eq!(a.render(), b.render());
        prop_assert_eq!(a.fingerprint, b.fingerprint);
    }

    /// Each request reaches exactly one terminal state and tests never see
    /// it go back to pending.
    #[test]
    fn request_lifecycle_is_monotone(
        ops in proptest::collection::vec(0..4u8, 1..10),
        seed in any::<u64>(),
    ) {
        let mut sim = Simulation::new(SimConfig::new(2));
        let sends = ops.iter().filter(|&&o| o == 0).count();
        sim.spawn(R0, move |ep| async move {
            let w = ep.world_channel();
            let mut reqs = Vec::new();
            for op in ops {
                match op {
                    0 => reqs.push(ep.post_send(R1, w, 7, vec![], SendMode::Synchronous)),
                    1 => reqs.push(ep.post_recv(Source::Rank(R1), w, 8, 0)),
                    2 => {
                        if let Some(&q) = reqs.last() {
                            ep.cancel(q).await;
                        }
                    }
                    _ => {
                        for &q in &reqs {
                            ep.test(q).await;
                        }
                    }
                }
            }
            String::new()
        });
        sim.spawn(R1, move |ep| async move {
            let w = ep.world_channel();
            for _ in 0..sends {
                let q = ep.post_recv(Source::Rank(R0), w, 7, 0);
                ep.test(q).await;
            }
            String::new()
        });
        let trace = sim.run(ScheduleSeed(seed));
        let mut terminal: HashMap<String, RequestState> = HashMap::new();
        for r in &trace.records {
            match &r.event {
                TraceEvent::State { req, state } => {
                    prop_assert!(state.is_terminal());
                    let prev = terminal.insert(req.to_string(), *state);
                    prop_assert!(prev.is_none(), "{} terminated twice", req);
                }
                TraceEvent::Test { req, state, .. } => {
                    let known = terminal.get(&req.to_string()).copied();
                    match known {
                        Some(s) => prop_assert_eq!(*state, s),
                        None => prop_assert_eq!(*state, RequestState::Pending),
                    }
                }
                _ => {}
            }
        }
    }

    /// A killed rank performs no operation after the kill step.
    #[test]
    fn kill_stops_the_victim(at in 0..12u64, seed in any::<u64>()) {
        let faults = FaultScript::new(vec![FaultScript::kill(at, R0)]);
        let mut sim = Simulation::new(SimConfig::new(2).with_liveness(true).with_faults(faults));
        sim.spawn(R0, |ep| async move {
            let w = ep.world_channel();
            for i in 0..6u8 {
                let q = ep.post_send(R1, w, 1, vec![i], SendMode::Standard);
                ep.wait_any(&[q]).await;
            }
            String::new()
        });
        sim.spawn(R1, |ep| async move {
            let w = ep.world_channel();
            let mut states = Vec::new();
            for _ in 0..6 {
                let q = ep.post_recv(Source::Rank(R0), w, 1, 1);
                ep.wait_any(&[q]).await;
                states.push(ep.state(q).to_string());
            }
            states.join(",")
        });
        let trace = sim.run(ScheduleSeed(seed));
        prop_assert_eq!(trace.termination, Termination::Completed);
        if let Some(k) = trace.kill_step(R0) {
            prop_assert!(matches!(trace.ends[0], RankEnd::Killed));
            for r in trace.records.iter().filter(|r| r.step > k) {
                let by_victim = match &r.event {
                    TraceEvent::PostSend { rank, .. }
                    | TraceEvent::PostRecv { rank, .. }
                    | TraceEvent::WaitAny { rank, .. }
                    | TraceEvent::Test { rank, .. }
                    | TraceEvent::Yield { rank } => *rank == R0,
                    _ => false,
                };
                prop_assert!(!by_victim, "rank 0 acted after its kill: {}", r);
            }
            let states = finished(&trace, 1);
            let received = states.split(',').filter(|s| *s == "complete").count();
            prop_assert_eq!(received, trace.sends_from(R0, ChannelRole::World, 1));
            if received < 6 {
                prop_assert!(states.ends_with("errored(proc-failed)"));
            }
        }
    }
}

fn isolation_run(seed: u64) -> Trace<String> {
    let mut sim = Simulation::new(SimConfig::new(2));
    let group = [R0, R1];
    sim.spawn(R0, move |ep| async move {
        let a = ep.derive_channel(ep.world_channel(), 1, &group, ChannelRole::Data);
        let q = ep.post_send(R1, a, 5, vec![1], SendMode::Standard);
        ep.wait_any(&[q]).await;
        String::new()
    });
    sim.spawn(R1, move |ep| async move {
        let a = ep.derive_channel(ep.world_channel(), 1, &group, ChannelRole::Data);
        let b = ep.derive_channel(ep.world_channel(), 2, &group, ChannelRole::Data);
        assert_ne!(a, b);
        let on_b = ep.post_recv(Source::Any, b, 5, 1);
        let on_a = ep.post_recv(Source::Any, a, 5, 1);
        ep.wait_any(&[on_a]).await;
        let state_b = ep.test(on_b).await;
        assert!(ep.cancel(on_b).await);
        state_b.to_string()
    });
    sim.run(ScheduleSeed(seed))
}

#[test]
fn channels_are_isolated() {
    for seed in 0..32 {
        let trace = isolation_run(seed);
        assert_eq!(trace.termination, Termination::Completed);
        assert_eq!(finished(&trace, 1), "pending");
    }
}

#[test]
fn synchronous_send_waits_for_the_match() {
    let mut sim = Simulation::new(SimConfig::new(2));
    sim.spawn(R0, |ep| async move {
        let q = ep.post_send(R1, ep.world_channel(), 3, vec![], SendMode::Synchronous);
        let early = ep.test(q).await;
        ep.wait_any(&[q]).await;
        early.to_string()
    });
    sim.spawn(R1, |ep| async move {
        for _ in 0..4 {
            ep.yield_now().await;
        }
        let q = ep.post_recv(Source::Rank(R0), ep.world_channel(), 3, 0);
        ep.wait_any(&[q]).await;
        String::new()
    });
    let trace = sim.run(ScheduleSeed(0));
    assert_eq!(trace.termination, Termination::Completed);
    assert_eq!(finished(&trace, 0), "pending");
}

#[test]
fn unmatched_receive_deadlocks() {
    let mut sim = Simulation::new(SimConfig::new(2));
    sim.spawn(R0, |ep| async move {
        let q = ep.post_recv(Source::Any, ep.world_channel(), 1, 0);
        ep.wait_any(&[q]).await;
        String::new()
    });
    sim.spawn(R1, |_| async move { String::new() });
    let trace = sim.run(ScheduleSeed(0));
    assert!(trace.deadlocked());
    assert!(matches!(trace.ends[0], RankEnd::Blocked));
}
