use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn errprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_errprop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ping_pong_black_channel_exits_zero() {
    let f = scenario("ping-pong.scn");
    let o = errprop(&["run", path(&f), "--mode", "black-channel", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let record: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(record["mode"], "black-channel");
    assert_eq!(record["verdict"]["outcomes"][0], "success");
}

#[test]
fn kill_rank_black_channel_is_rejected() {
    let f = scenario("kill-rank.scn");
    let o = errprop(&["run", path(&f), "--mode", "black-channel", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("hard faults unsupported in black-channel mode"),
        "{err}"
    );
}

#[test]
fn kill_rank_ulfm_corrupts() {
    let f = scenario("kill-rank.scn");
    let o = errprop(&["run", path(&f), "--mode", "ulfm", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let record: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(record["verdict"]["outcomes"][0], "corrupted-comm");
    assert_eq!(record["verdict"]["outcomes"][2], "killed");
}

#[test]
fn every_bundled_scenario_meets_its_expectations() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for entry in std::fs::read_dir(dir).unwrap() {
        let f = entry.unwrap().path();
        for seed in ["0", "7", "123"] {
            let o = errprop(&["run", path(&f), "--seed", seed]);
            assert_eq!(
                o.status.code(),
                Some(0),
                "{}: {}",
                f.display(),
                String::from_utf8_lossy(&o.stderr)
            );
        }
    }
}

#[test]
fn mismatch_exits_one() {
    let dir = std::env::temp_dir().join(format!("errprop-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let f = dir.join("wrong.scn");
    std::fs::write(
        &f,
        "ranks 2\nprogram 0: signal 4\nprogram *: barrier\nexpect all success\n",
    )
    .unwrap();
    let o = errprop(&["run", path(&f), "--mode", "black-channel"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mismatch"));
}

#[test]
fn parse_error_exits_two() {
    let dir = std::env::temp_dir().join(format!("errprop-cli-bad-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let f = dir.join("bad.scn");
    std::fs::write(&f, "ranks 2\nprogram 0: frobnicate\n").unwrap();
    let o = errprop(&["run", path(&f)]);
    assert_eq!(o.status.code(), Some(2));
    let o = errprop(&["run", "/definitely/not/here.scn"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn trace_is_written_and_reproducible() {
    let dir = std::env::temp_dir().join(format!("errprop-cli-trace-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let f = scenario("single-signal.scn");
    let dump = |name: &str| {
        let t = dir.join(name);
        let o = errprop(&["run", path(&f), "--seed", "42", "--trace", path(&t)]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(&t).unwrap()
    };
    let a = dump("a.trace");
    assert!(!a.is_empty());
    assert_eq!(a, dump("b.trace"));
}

fn csv(args: &[&str]) -> Vec<Vec<String>> {
    let o = errprop(args);
    assert_eq!(o.status.code(), Some(0));
    stdout(&o)
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn bench_rows_and_summary() {
    let rows = csv(&["bench", "--ranks", "2", "--iters", "3"]);
    assert_eq!(rows.len(), 5);
    assert_eq!(
        rows[0],
        [
            "iter",
            "mode",
            "ranks",
            "sim_steps",
            "messages",
            "signal_sends",
            "wall_ns"
        ]
    );
    assert_eq!(rows[4][0], "summary");
    let steps: Vec<u64> = rows[1..4].iter().map(|r| r[3].parse().unwrap()).collect();
    let mut sorted = steps.clone();
    sorted.sort();
    assert_eq!(
        rows[4][3],
        format!("{}/{}/{}", sorted[0], sorted[1], sorted[2])
    );
}

#[test]
fn bench_eight_ranks_sends_seven_notices() {
    let rows = csv(&[
        "bench",
        "--ranks",
        "8",
        "--iters",
        "4",
        "--mode",
        "black-channel",
    ]);
    for r in &rows[1..5] {
        assert_eq!(r[5], "7");
    }
}

#[test]
fn bench_step_counts_repeat() {
    let args = ["bench", "--ranks", "5", "--iters", "6", "--mode", "ulfm"];
    let strip = |rows: Vec<Vec<String>>| -> Vec<Vec<String>> {
        rows.into_iter()
            .map(|mut r| {
                r.pop();
                r
            })
            .collect()
    };
    assert_eq!(strip(csv(&args)), strip(csv(&args)));
}

#[test]
fn explore_reports_coverage() {
    let f = scenario("single-signal.scn");
    let o = errprop(&["explore", path(&f), "--mode", "black-channel"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let last: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(last["coverage"], "full");
    assert_eq!(last["verdicts"], 1);

    let f = scenario("kill-rank.scn");
    let o = errprop(&["explore", path(&f), "--max-executions", "10"]);
    let out = stdout(&o);
    let last: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(last["coverage"], "partial");
}
