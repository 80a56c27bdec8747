use errprop::harness::{run_scenario, OutcomeKind, Scenario};
use errprop::protocol::Mode;
use errprop::transport::ScheduleSeed;

fn run(text: &str, mode: Mode, seed: u64) -> errprop::harness::RunResult {
    let s: Scenario = text.parse().expect("scenario parses");
    run_scenario(&s, mode, ScheduleSeed(seed)).expect("runs")
}

fn assert_clean(text: &str) {
    let s: Scenario = text.parse().expect("scenario parses");
    for &mode in &s.modes {
        for seed in 0..20 {
            let r = run_scenario(&s, mode, ScheduleSeed(seed)).expect("runs");
            assert!(
                r.mismatches.is_empty(),
                "{} mode={mode} seed={seed}: {:?}\n{}",
                s.name,
                r.mismatches,
                r.trace.render()
            );
        }
    }
}

#[test]
fn ping_pong_succeeds() {
    assert_clean(
        "name ping-pong\nranks 2\n\
         program 0: isend 1 5; irecv 1 6; wait; wait\n\
         program 1: irecv 0 5; wait; isend 0 6; wait\n\
         expect all success\nexpect deadlocked no\n",
    );
}

#[test]
fn single_signaller_propagates() {
    assert_clean(
        "name single\nranks 4\n\
         program 0: signal 42\n\
         program *: irecv 0 1; wait\n\
         expect all propagated\nexpect report 0:42\n",
    );
}

#[test]
fn unwind_corrupts() {
    assert_clean(
        "name unwind\nranks 4\n\
         program 2: unwind\n\
         program *: irecv 2 1; wait\n\
         expect all corrupted-comm\nexpect report none\n",
    );
}

#[test]
fn two_signallers_agree() {
    assert_clean(
        "name two\nranks 5\n\
         program 1: signal 7\n\
         program 3: signal 9\n\
         program *: irecv any 1; wait\n\
         expect all propagated\nexpect report 1:7,3:9\n",
    );
}

#[test]
fn allreduce_and_barrier_complete() {
    let r = run(
        "ranks 6\nprogram *: allreduce sum 3; barrier; allreduce max 1\nexpect all success\n",
        Mode::BlackChannel,
        3,
    );
    assert!(r.mismatches.is_empty(), "{:?}", r.mismatches);
    for red in &r.report.verdict.reductions {
        assert_eq!(red, &vec![18, 1]);
    }
    assert_eq!(r.report.verdict.outcomes, vec![OutcomeKind::Success; 6]);
}

#[test]
fn kill_then_shrink() {
    assert_clean(
        "name kill\nranks 4\nmode ulfm\n0 3 kill\n\
         program *: barrier; catch; shrink\n\
         expect all corrupted-comm\nexpect rank 3 killed\nexpect shrink-size 3\n",
    );
}
