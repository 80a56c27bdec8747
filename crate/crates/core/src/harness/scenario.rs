//! Scenario definitions and their line-oriented text form.
//!
//! ```text
//! name single-signaller
//! ranks 4
//! mode both                       # black-channel | ulfm | both
//! 0 2 kill                        # fault lines, see FaultScript
//! program 0: signal 42
//! program *: irecv 0 1; wait      # every rank without its own program
//! expect all propagated
//! expect report 0:42
//! ```
//!
//! Steps: `isend <dest> <tag>`, `irecv <src|any> <tag>`, `wait` (oldest
//! outstanding future), `allreduce <sum|max|band> <value>`, `barrier`,
//! `signal <code>`, `unwind`, `delay <k>`, `catch`, `shrink`. Steps after
//! `catch` only run once an earlier step produced an error outcome.
//!
//! Expectations: `expect all <outcome>`, `expect rank <r> <outcome>`,
//! `expect report <r:c,...|none>`, `expect deadlocked <yes|no>`,
//! `expect leak <yes|no>`, `expect shrink-size <k>`,
//! `expect err-sends <rank> <k>`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::verdict::OutcomeKind;
use crate::protocol::{ErrorCode, ErrorReport, Mode, ReduceOp};
use crate::transport::{FaultScript, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Isend {
        dest: usize,
        tag: Tag,
    },
    Irecv {
        source: Option<usize>,
        tag: Tag,
    },
    Wait,
    Allreduce {
        op: ReduceOp,
        value: u64,
    },
    Barrier,
    Signal(ErrorCode),
    /// Leave the communicator's scope while unwinding.
    Unwind,
    /// Yield to other ranks `k` times.
    Delay(u32),
    Catch,
    Shrink,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Isend { dest, tag } => write!(f, "isend {dest} {tag}"),
            Step::Irecv {
                source: Some(s),
                tag,
            } => write!(f, "irecv {s} {tag}"),
            Step::Irecv { source: None, tag } => write!(f, "irecv any {tag}"),
            Step::Wait => f.write_str("wait"),
            Step::Allreduce { op, value } => {
                let op = match op {
                    ReduceOp::Sum => "sum",
                    ReduceOp::Max => "max",
                    ReduceOp::Band => "band",
                };
                write!(f, "allreduce {op} {value}")
            }
            Step::Barrier => f.write_str("barrier"),
            Step::Signal(c) => write!(f, "signal {c}"),
            Step::Unwind => f.write_str("unwind"),
            Step::Delay(k) => write!(f, "delay {k}"),
            Step::Catch => f.write_str("catch"),
            Step::Shrink => f.write_str("shrink"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expectation {
    All(OutcomeKind),
    Rank(usize, OutcomeKind),
    /// `None` asserts that no rank holds a report.
    Report(Option<ErrorReport>),
    Deadlocked(bool),
    Leak(bool),
    ShrinkSize(usize),
    ErrorSends {
        rank: usize,
        count: usize,
    },
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let yn = |b: bool| if b { "yes" } else { "no" };
        match self {
            Expectation::All(o) => write!(f, "all {o}"),
            Expectation::Rank(r, o) => write!(f, "rank {r} {o}"),
            Expectation::Report(Some(r)) => write!(f, "report {r}"),
            Expectation::Report(None) => f.write_str("report none"),
            Expectation::Deadlocked(b) => write!(f, "deadlocked {}", yn(*b)),
            Expectation::Leak(b) => write!(f, "leak {}", yn(*b)),
            Expectation::ShrinkSize(k) => write!(f, "shrink-size {k}"),
            Expectation::ErrorSends { rank, count } => write!(f, "err-sends {rank} {count}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub n: usize,
    pub programs: Vec<Vec<Step>>,
    pub faults: FaultScript,
    pub modes: Vec<Mode>,
    pub expectations: Vec<Expectation>,
}

impl Scenario {
    /// `n` ranks with empty programs, runnable in both modes.
    pub fn new(name: impl Into<String>, n: usize) -> Self {
        Scenario {
            name: name.into(),
            n,
            programs: vec![Vec::new(); n],
            faults: FaultScript::default(),
            modes: Mode::ALL.to_vec(),
            expectations: Vec::new(),
        }
    }

    pub fn program(mut self, rank: usize, steps: impl IntoIterator<Item = Step>) -> Self {
        self.programs[rank] = steps.into_iter().collect();
        self
    }

    /// Sets the same program on every rank not in `except`.
    pub fn others(mut self, except: &[usize], steps: impl IntoIterator<Item = Step>) -> Self {
        let steps: Vec<Step> = steps.into_iter().collect();
        for r in 0..self.n {
            if !except.contains(&r) {
                self.programs[r] = steps.clone();
            }
        }
        self
    }

    pub fn faults(mut self, faults: FaultScript) -> Self {
        self.faults = faults;
        self
    }

    pub fn modes(mut self, modes: &[Mode]) -> Self {
        self.modes = modes.to_vec();
        self
    }

    pub fn expect(mut self, e: Expectation) -> Self {
        self.expectations.push(e);
        self
    }

    /// Checks rank references and that every `wait` has a future to consume.
    pub fn validate(&self) -> Result<(), String> {
        if self.n == 0 {
            return Err("a scenario needs at least one rank".into());
        }
        if self.programs.len() != self.n {
            return Err("program count differs from rank count".into());
        }
        for (r, prog) in self.programs.iter().enumerate() {
            let mut outstanding = 0usize;
            let mut caught = false;
            for step in prog {
                match *step {
                    Step::Isend { dest, .. } if dest >= self.n => {
                        return Err(format!("program {r}: isend to rank {dest} out of range"))
                    }
                    Step::Irecv {
                        source: Some(s), ..
                    } if s >= self.n => {
                        return Err(format!("program {r}: irecv from rank {s} out of range"))
                    }
                    Step::Isend { .. } | Step::Irecv { .. } => outstanding += 1,
                    Step::Wait if !caught => {
                        outstanding = outstanding.checked_sub(1).ok_or_else(|| {
                            format!("program {r}: wait without an outstanding future")
                        })?;
                    }
                    Step::Catch if caught => return Err(format!("program {r}: second catch")),
                    Step::Catch => caught = true,
                    _ => {}
                }
            }
        }
        for e in self.faults.events() {
            if e.rank.index() >= self.n {
                return Err(format!("fault on rank {} out of range", e.rank));
            }
        }
        for e in &self.expectations {
            match e {
                Expectation::Rank(r, _) | Expectation::ErrorSends { rank: r, .. }
                    if *r >= self.n =>
                {
                    return Err(format!("expectation on rank {r} out of range"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn parse_step(text: &str, line: usize) -> Result<Step, ScenarioError> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let num = |i: usize| -> Result<u64, ScenarioError> {
        let t = toks
            .get(i)
            .ok_or_else(|| err(line, format!("`{text}`: missing argument")))?;
        t.parse()
            .map_err(|_| err(line, format!("`{text}`: invalid number `{t}`")))
    };
    let arity = |k: usize| -> Result<(), ScenarioError> {
        if toks.len() != k + 1 {
            return Err(err(line, format!("`{text}`: expected {k} argument(s)")));
        }
        Ok(())
    };
    let step = match toks.first().copied() {
        Some("isend") => {
            arity(2)?;
            Step::Isend {
                dest: num(1)? as usize,
                tag: num(2)?,
            }
        }
        Some("irecv") => {
            arity(2)?;
            let source = if toks[1] == "any" {
                None
            } else {
                Some(num(1)? as usize)
            };
            Step::Irecv {
                source,
                tag: num(2)?,
            }
        }
        Some("wait") => {
            arity(0)?;
            Step::Wait
        }
        Some("allreduce") => {
            arity(2)?;
            Step::Allreduce {
                op: toks[1].parse().map_err(|e: String| err(line, e))?,
                value: num(2)?,
            }
        }
        Some("barrier") => {
            arity(0)?;
            Step::Barrier
        }
        Some("signal") => {
            arity(1)?;
            let code = toks[1]
                .parse::<i64>()
                .map_err(|_| err(line, format!("invalid code `{}`", toks[1])))?;
            Step::Signal(ErrorCode::new(code).map_err(|e| err(line, e.to_string()))?)
        }
        Some("unwind") => {
            arity(0)?;
            Step::Unwind
        }
        Some("delay") => {
            arity(1)?;
            Step::Delay(num(1)? as u32)
        }
        Some("catch") => {
            arity(0)?;
            Step::Catch
        }
        Some("shrink") => {
            arity(0)?;
            Step::Shrink
        }
        Some(other) => return Err(err(line, format!("unknown step `{other}`"))),
        None => return Err(err(line, "empty step")),
    };
    Ok(step)
}

fn parse_yes_no(t: &str, line: usize) -> Result<bool, ScenarioError> {
    match t {
        "yes" | "true" => Ok(true),
        "no" | "false" => Ok(false),
        other => Err(err(line, format!("expected yes or no, got `{other}`"))),
    }
}

fn parse_expectation(rest: &str, line: usize) -> Result<Expectation, ScenarioError> {
    let toks: Vec<&str> = rest.split_whitespace().collect();
    let outcome = |t: &str| t.parse::<OutcomeKind>().map_err(|e| err(line, e));
    let index = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| err(line, format!("invalid number `{t}`")))
    };
    match toks.as_slice() {
        ["all", o] => Ok(Expectation::All(outcome(o)?)),
        ["rank", r, o] => Ok(Expectation::Rank(index(r)?, outcome(o)?)),
        ["report", "none"] => Ok(Expectation::Report(None)),
        ["report", r] => Ok(Expectation::Report(Some(
            r.parse().map_err(|e: String| err(line, e))?,
        ))),
        ["deadlocked", b] => Ok(Expectation::Deadlocked(parse_yes_no(b, line)?)),
        ["leak", b] => Ok(Expectation::Leak(parse_yes_no(b, line)?)),
        ["shrink-size", k] => Ok(Expectation::ShrinkSize(index(k)?)),
        ["err-sends", r, k] => Ok(Expectation::ErrorSends {
            rank: index(r)?,
            count: index(k)?,
        }),
        _ => Err(err(line, format!("unknown expectation `{rest}`"))),
    }
}

impl FromStr for Scenario {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut name = None;
        let mut n = None;
        let mut modes = Mode::ALL.to_vec();
        let mut fault_events = Vec::new();
        let mut explicit: Vec<(usize, usize, Vec<Step>)> = Vec::new();
        let mut default_program: Option<Vec<Step>> = None;
        let mut expectations = Vec::new();

        for (i, raw) in s.lines().enumerate() {
            let line = i + 1;
            let text = raw.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            let (head, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
            let rest = rest.trim();
            match head {
                "name" => name = Some(rest.to_string()),
                "ranks" => {
                    let v: usize = rest
                        .parse()
                        .map_err(|_| err(line, format!("invalid rank count `{rest}`")))?;
                    n = Some(v);
                }
                "mode" => {
                    modes = match rest {
                        "both" => Mode::ALL.to_vec(),
                        m => vec![m.parse().map_err(|e: String| err(line, e))?],
                    }
                }
                "program" => {
                    let (who, body) = rest
                        .split_once(':')
                        .ok_or_else(|| err(line, "expected `program <rank>: <steps>`"))?;
                    let steps = body
                        .split(';')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(|t| parse_step(t, line))
                        .collect::<Result<Vec<_>, _>>()?;
                    match who.trim() {
                        "*" => default_program = Some(steps),
                        r => {
                            let r: usize = r
                                .parse()
                                .map_err(|_| err(line, format!("invalid rank `{r}`")))?;
                            explicit.push((line, r, steps));
                        }
                    }
                }
                "expect" => expectations.push(parse_expectation(rest, line)?),
                h if h.starts_with(|c: char| c.is_ascii_digit()) => {
                    fault_events.push(
                        FaultScript::parse_line(text, line)
                            .map_err(|e| err(line, e.to_string()))?,
                    );
                }
                other => return Err(err(line, format!("unknown directive `{other}`"))),
            }
        }

        let n = n.ok_or_else(|| err(0, "missing `ranks` line"))?;
        let mut programs = vec![default_program.unwrap_or_default(); n];
        for (line, r, steps) in explicit {
            if r >= n {
                return Err(err(line, format!("program for rank {r} out of range")));
            }
            programs[r] = steps;
        }
        let scenario = Scenario {
            name: name.unwrap_or_else(|| "unnamed".into()),
            n,
            programs,
            faults: FaultScript::new(fault_events),
            modes,
            expectations,
        };
        scenario.validate().map_err(|m| err(0, m))?;
        Ok(scenario)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name {}", self.name)?;
        writeln!(f, "ranks {}", self.n)?;
        match self.modes.as_slice() {
            [m] => writeln!(f, "mode {m}")?,
            _ => writeln!(f, "mode both")?,
        }
        write!(f, "{}", self.faults)?;
        for (r, prog) in self.programs.iter().enumerate() {
            let steps: Vec<String> = prog.iter().map(Step::to_string).collect();
            writeln!(f, "program {r}: {}", steps.join("; "))?;
        }
        for e in &self.expectations {
            writeln!(f, "expect {e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
name sample
ranks 3
mode ulfm
0 2 kill
program *: irecv 0 1; wait; catch; shrink
program 0: barrier; allreduce band 1; delay 2; signal 42
expect all corrupted-comm
expect report none
expect shrink-size 2
";

    #[test]
    fn parses_and_round_trips() {
        let s: Scenario = SAMPLE.parse().unwrap();
        assert_eq!(s.n, 3);
        assert_eq!(s.modes, vec![Mode::Ulfm]);
        assert_eq!(s.programs[1], s.programs[2]);
        assert_eq!(s.programs[1][3], Step::Shrink);
        assert_eq!(
            s.programs[0][1],
            Step::Allreduce {
                op: ReduceOp::Band,
                value: 1
            }
        );
        assert!(s.faults.has_kills());
        let again: Scenario = s.to_string().parse().unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn reports_line_numbers() {
        let e = "ranks 2\nprogram 0: jump".parse::<Scenario>().unwrap_err();
        assert_eq!(e.line, 2);
        let e = "ranks 2\nprogram 0: signal 0"
            .parse::<Scenario>()
            .unwrap_err();
        assert_eq!(e.line, 2);
        let e = "ranks 2\nprogram 5: wait".parse::<Scenario>().unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn rejects_wait_without_future() {
        assert!("ranks 1\nprogram 0: wait".parse::<Scenario>().is_err());
        assert!("ranks 1\nprogram 0: isend 0 1; wait; catch; wait"
            .parse::<Scenario>()
            .is_ok());
    }
}
