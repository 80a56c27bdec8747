//! End-to-end acceptance criteria. Each test prints one `PASS`/`FAIL` line.

use std::collections::{BTreeMap, BTreeSet};

use errprop::harness::{
    bench, build, explore_scenario, oracle_failed_ranks, run_scenario, simulate_failed_ranks,
    Exploration, HarnessError, OutcomeKind, Scenario, Verdict,
};
use errprop::protocol::{ErrorCode, ErrorReport, Mode};
use errprop::transport::{ExploreBudget, ScheduleSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(), String>;

fn report(id: usize, name: &str, result: Outcome) {
    match result {
        Ok(()) => println!("criterion {id} {name}: PASS"),
        Err(why) => {
            println!("criterion {id} {name}: FAIL ({why})");
            panic!("criterion {id} failed: {why}");
        }
    }
}

fn ensure(cond: bool, why: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(why())
    }
}

fn parse(text: &str) -> Scenario {
    text.parse().expect("scenario parses")
}

/// Exhaustive exploration; anything short of full coverage is a failure.
fn explore_full(text: &str, mode: Mode) -> Result<Exploration, String> {
    let s = parse(text);
    let budget = ExploreBudget {
        max_executions: 200_000,
        ..ExploreBudget::default()
    };
    let e = explore_scenario(&s, mode, budget).map_err(|e| e.to_string())?;
    ensure(e.stats.complete(), || {
        format!("{mode}: partial coverage ({}) for {text:?}", e.stats)
    })?;
    Ok(e)
}

fn single_signaller(n: usize) -> String {
    format!("ranks {n}\nprogram 0: signal 3\nprogram *: barrier\n")
}

fn two_signallers(n: usize) -> String {
    format!("ranks {n}\nprogram 0: signal 3\nprogram 1: signal 4\nprogram *: barrier\n")
}

fn unwinder(n: usize) -> String {
    format!("ranks {n}\nprogram 0: unwind\nprogram *: barrier\n")
}

fn signal_and_unwind(n: usize) -> String {
    format!("ranks {n}\nprogram 0: signal 3\nprogram 1: unwind\nprogram *: barrier\n")
}

fn is_error(o: OutcomeKind) -> bool {
    matches!(o, OutcomeKind::Propagated | OutcomeKind::CorruptedComm)
}

fn uniform(v: &Verdict) -> bool {
    let first = v.outcomes[0];
    matches!(first, OutcomeKind::Propagated | OutcomeKind::CorruptedComm)
        && v.outcomes.iter().all(|&o| o == first)
        && v.reports_agree()
}

fn deadlock_cases() -> Vec<String> {
    let mut cases: Vec<String> = (2..=5).map(single_signaller).collect();
    cases.extend((3..=4).map(two_signallers));
    cases.extend((2..=4).map(unwinder));
    cases
}

#[test]
fn criterion_1_deadlock_preclusion() {
    let check = || -> Outcome {
        for text in deadlock_cases() {
            for mode in Mode::ALL {
                let e = explore_full(&text, mode)?;
                for v in &e.verdicts {
                    ensure(!v.deadlocked && !v.step_limit, || {
                        format!("{mode}: {v} for {text:?}")
                    })?;
                    ensure(v.outcomes.iter().all(|&o| is_error(o)), || {
                        format!("{mode}: non-error outcome {v} for {text:?}")
                    })?;
                }
            }
        }
        Ok(())
    };
    report(1, "deadlock preclusion", check());
}

fn random_report(rng: &mut ChaCha8Rng, n: usize) -> BTreeMap<u32, ErrorCode> {
    loop {
        let p: f64 = rng.gen_range(0.02..0.5);
        let mut failed = BTreeMap::new();
        for r in 0..n as u32 {
            if rng.gen_bool(p) {
                failed.insert(r, ErrorCode::new(rng.gen_range(1..1_000_000)).unwrap());
            }
        }
        if !failed.is_empty() {
            return failed;
        }
    }
}

fn resolution_matches(
    n: usize,
    failed: &BTreeMap<u32, ErrorCode>,
    seed: u64,
) -> Result<(), String> {
    let want = oracle_failed_ranks(failed).map_err(|e| e.to_string())?;
    for (r, got) in simulate_failed_ranks(n, failed, ScheduleSeed(seed))
        .into_iter()
        .enumerate()
    {
        ensure(got.as_ref() == Ok(&want), || {
            format!("n={n} rank {r}: got {got:?}, oracle {want}")
        })?;
    }
    Ok(())
}

#[test]
fn criterion_2_oracle_equivalence() {
    let check = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..=6usize {
            for mask in 1u32..(1 << n) {
                let failed: BTreeMap<u32, ErrorCode> = (0..n as u32)
                    .filter(|r| mask & (1 << r) != 0)
                    .map(|r| (r, ErrorCode::new(rng.gen_range(1..1000)).unwrap()))
                    .collect();
                resolution_matches(n, &failed, rng.gen())?;
            }
        }
        for _ in 0..1000 {
            let failed = random_report(&mut rng, 64);
            resolution_matches(64, &failed, rng.gen())?;
        }
        Ok(())
    };
    report(2, "oracle equivalence", check());
}

/// Random soft-fault scenario: some ranks signal, possibly one unwinds,
/// the rest all wait in the same receive or collective.
fn random_soft_scenario(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=8usize);
    let mut text = format!("ranks {n}\n");
    let signallers = rng.gen_range(1..=n.min(3));
    let unwind = rng.gen_bool(0.3);
    let waits = ["barrier", "allreduce sum 1", "irecv any 1; wait"];
    let wait = waits[rng.gen_range(0..waits.len())];
    for r in 0..n {
        let step = if r < signallers {
            format!("signal {}", rng.gen_range(1..100))
        } else if r == signallers && unwind {
            "unwind".to_string()
        } else {
            wait.to_string()
        };
        text.push_str(&format!("program {r}: {step}\n"));
    }
    text
}

#[test]
fn criterion_3_uniform_outcomes() {
    let check = || -> Outcome {
        for text in deadlock_cases() {
            for mode in Mode::ALL {
                for v in &explore_full(&text, mode)?.verdicts {
                    ensure(uniform(v), || format!("{mode}: {v} for {text:?}"))?;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let text = random_soft_scenario(&mut rng);
            let s = parse(&text);
            for mode in Mode::ALL {
                let seed = rng.gen();
                let r = run_scenario(&s, mode, ScheduleSeed(seed)).map_err(|e| e.to_string())?;
                let v = &r.report.verdict;
                ensure(uniform(v), || {
                    format!("{mode} seed {seed}: {v} for {text:?}")
                })?;
            }
        }
        Ok(())
    };
    report(3, "uniform outcomes", check());
}

#[test]
fn criterion_4_corruption_dominance() {
    let check = || -> Outcome {
        let mut cases: Vec<String> = (2..=4).map(signal_and_unwind).collect();
        cases.push("ranks 3\nprogram 0: unwind\nprogram 1: signal 5\nprogram 2: signal 6\n".into());
        for text in cases {
            for mode in Mode::ALL {
                for v in &explore_full(&text, mode)?.verdicts {
                    ensure(
                        !v.deadlocked
                            && v.outcomes.iter().all(|&o| o == OutcomeKind::CorruptedComm),
                        || format!("{mode}: {v} for {text:?}"),
                    )?;
                }
            }
        }
        Ok(())
    };
    report(4, "corruption dominance", check());
}

/// Schedule-independent projection compared across modes.
fn classes(e: &Exploration) -> BTreeSet<(Vec<OutcomeKind>, Vec<Option<ErrorReport>>)> {
    e.verdicts
        .iter()
        .map(|v| (v.outcomes.clone(), v.reports.clone()))
        .collect()
}

#[test]
fn criterion_5_mode_equivalence() {
    let check = || -> Outcome {
        let mut cases = deadlock_cases();
        cases.extend((2..=3).map(signal_and_unwind));
        cases.push(
            "ranks 4\nprogram 1: signal 7\nprogram 3: signal 9\nprogram *: irecv any 1; wait\n"
                .into(),
        );
        for text in cases {
            let black = classes(&explore_full(&text, Mode::BlackChannel)?);
            let ulfm = classes(&explore_full(&text, Mode::Ulfm)?);
            ensure(black == ulfm, || {
                format!("{text:?}: black-channel {black:?} vs ulfm {ulfm:?}")
            })?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let text = random_soft_scenario(&mut rng);
            let s = parse(&text);
            let seed = ScheduleSeed(rng.gen());
            let run = |mode| run_scenario(&s, mode, seed).map(|r| r.report.verdict);
            let (b, u) = (
                run(Mode::BlackChannel).map_err(|e| e.to_string())?,
                run(Mode::Ulfm).map_err(|e| e.to_string())?,
            );
            ensure(b.outcomes == u.outcomes && b.reports == u.reports, || {
                format!("{text:?}: black-channel {b} vs ulfm {u}")
            })?;
        }
        Ok(())
    };
    report(5, "mode equivalence", check());
}

#[test]
fn criterion_6_hard_faults() {
    let check = || -> Outcome {
        for n in 3..=5usize {
            for victim in 0..n {
                let text =
                    format!("ranks {n}\n0 {victim} kill\nprogram *: barrier; catch; shrink\n");
                let s = parse(&text);
                let survivors: Vec<u32> = (0..n as u32).filter(|&r| r != victim as u32).collect();
                for seed in 0..10 {
                    let r = run_scenario(&s, Mode::Ulfm, ScheduleSeed(seed))
                        .map_err(|e| e.to_string())?;
                    let v = &r.report.verdict;
                    for (rank, &o) in v.outcomes.iter().enumerate() {
                        let want = if rank == victim {
                            OutcomeKind::Killed
                        } else {
                            OutcomeKind::CorruptedComm
                        };
                        ensure(o == want, || {
                            format!("n={n} victim={victim} seed={seed}: {v}")
                        })?;
                    }
                    for (rank, g) in v.shrink.iter().enumerate() {
                        if rank != victim {
                            ensure(g.as_ref() == Some(&survivors), || {
                                format!("n={n} victim={victim} rank {rank}: shrink {g:?}")
                            })?;
                        }
                    }
                }
                let err = build(&s, Mode::BlackChannel).err();
                ensure(err == Some(HarnessError::HardFaultsUnsupported), || {
                    format!("black-channel accepted a kill: {err:?}")
                })?;
                ensure(
                    HarnessError::HardFaultsUnsupported.to_string()
                        == "hard faults unsupported in black-channel mode",
                    || "diagnostic text".into(),
                )?;
            }
        }
        Ok(())
    };
    report(6, "hard faults", check());
}

#[test]
fn criterion_7_message_budget() {
    let check = || -> Outcome {
        for n in 2..=16usize {
            let s = parse(&format!(
                "ranks {n}\nprogram 0: signal 3\nprogram *: irecv 0 1; wait\n"
            ));
            for seed in 0..5 {
                let r = run_scenario(&s, Mode::BlackChannel, ScheduleSeed(seed))
                    .map_err(|e| e.to_string())?;
                let sends = &r.report.stats.error_sends;
                ensure(
                    sends[0] == n - 1 && sends.iter().sum::<usize>() == n - 1,
                    || format!("n={n} seed={seed}: error sends {sends:?}"),
                )?;
            }
        }
        for n in 2..=4 {
            let e = explore_full(&single_signaller(n), Mode::BlackChannel)?;
            ensure(e.max_error_sends == n - 1, || {
                format!("n={n}: up to {} error sends", e.max_error_sends)
            })?;
        }
        Ok(())
    };
    report(7, "message budget", check());
}

#[test]
fn criterion_8_silence_and_leaks() {
    let check = || -> Outcome {
        let quiet = [
            "ranks 2\nprogram 0: isend 1 5; irecv 1 6; wait; wait\nprogram 1: irecv 0 5; wait; isend 0 6; wait\n",
            "ranks 3\nprogram 0: irecv any 5; irecv any 5; wait; wait\nprogram *: isend 0 5; wait\n",
            "ranks 4\nprogram *: allreduce sum 2; barrier; allreduce band 1\n",
        ];
        for text in quiet {
            let s = parse(text);
            for mode in Mode::ALL {
                for seed in 0..10 {
                    let r =
                        run_scenario(&s, mode, ScheduleSeed(seed)).map_err(|e| e.to_string())?;
                    let st = &r.report.stats;
                    ensure(st.messages["error"] == 0 && st.leak_count == 0, || {
                        format!("{mode} seed={seed}: {st:?} for {text:?}")
                    })?;
                    ensure(
                        r.report
                            .verdict
                            .outcomes
                            .iter()
                            .all(|&o| o == OutcomeKind::Success),
                        || format!("{mode}: {} for {text:?}", r.report.verdict),
                    )?;
                }
            }
        }
        for n in 2..=4 {
            let text = format!(
                "ranks {n}\nprogram 0: signal 3\nprogram *: allreduce sum 1\nexpect leak yes\n"
            );
            let e = explore_full(&text, Mode::BlackChannel)?;
            ensure(e.mismatches.is_empty(), || {
                format!("n={n}: {:?}", e.mismatches)
            })?;
        }
        Ok(())
    };
    report(8, "silence and leaks", check());
}

#[test]
fn criterion_9_determinism() {
    let check = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let text = random_soft_scenario(&mut rng);
            let s = parse(&text);
            for mode in Mode::ALL {
                let seed = ScheduleSeed(rng.gen());
                let a = run_scenario(&s, mode, seed).map_err(|e| e.to_string())?;
                let b = run_scenario(&s, mode, seed).map_err(|e| e.to_string())?;
                ensure(a.trace.render() == b.trace.render(), || {
                    format!("{mode} {seed:?}: traces differ for {text:?}")
                })?;
            }
        }
        for mode in Mode::ALL {
            let key = |rows: Vec<errprop::harness::BenchRow>| -> Vec<(u64, usize, usize)> {
                rows.iter()
                    .map(|r| (r.sim_steps, r.messages, r.signal_sends))
                    .collect()
            };
            let a = key(bench(6, 8, mode).map_err(|e| e.to_string())?);
            let b = key(bench(6, 8, mode).map_err(|e| e.to_string())?);
            ensure(a == b, || format!("{mode}: bench {a:?} vs {b:?}"))?;
        }
        Ok(())
    };
    report(9, "determinism", check());
}
