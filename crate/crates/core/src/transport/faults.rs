//! Declarative fault schedules.
//!
//! One event per line:
//!
//! ```text
//! <time> <rank> kill
//! <time> <rank> drop <src>-><dst> tag=<t>
//! <time> <rank> delay <src>-><dst> tag=<t> by=<dt>
//! ```
//!
//! Times are simulated steps. `drop` and `delay` apply to the first message
//! matching the pattern that is posted at or after `time`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::{RankId, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MessagePattern {
    pub src: RankId,
    pub dst: RankId,
    pub tag: Tag,
}

impl fmt::Display for MessagePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{} tag={}", self.src, self.dst, self.tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultAction {
    Kill,
    Drop(MessagePattern),
    Delay(MessagePattern, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultEvent {
    pub time: u64,
    pub rank: RankId,
    pub action: FaultAction,
}

impl fmt::Display for FaultEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.action {
            FaultAction::Kill => write!(f, "{} {} kill", self.time, self.rank),
            FaultAction::Drop(p) => write!(f, "{} {} drop {p}", self.time, self.rank),
            FaultAction::Delay(p, by) => write!(f, "{} {} delay {p} by={by}", self.time, self.rank),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FaultParseError {
    #[error("line {line}: expected `<time> <rank> <action> ...`")]
    Shape { line: usize },
    #[error("line {line}: invalid number `{token}`")]
    Number { line: usize, token: String },
    #[error("line {line}: unknown fault action `{action}`")]
    Action { line: usize, action: String },
    #[error("line {line}: malformed message pattern `{token}`")]
    Pattern { line: usize, token: String },
}

/// Time-ordered list of injected faults.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultScript {
    events: Vec<FaultEvent>,
}

impl FaultScript {
    /// Builds a script, ordering events by time (stable for equal times).
    pub fn new(mut events: Vec<FaultEvent>) -> Self {
        events.sort_by_key(|e| e.time);
        FaultScript { events }
    }

    pub fn kill(time: u64, rank: RankId) -> FaultEvent {
        FaultEvent {
            time,
            rank,
            action: FaultAction::Kill,
        }
    }

    pub fn events(&self) -> &[FaultEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn has_kills(&self) -> bool {
        self.events
            .iter()
            .any(|e| matches!(e.action, FaultAction::Kill))
    }

    /// Parses one fault line; `line` is only used for error messages.
    pub fn parse_line(text: &str, line: usize) -> Result<FaultEvent, FaultParseError> {
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(FaultParseError::Shape { line });
        }
        let num = |t: &str| {
            t.parse::<u64>().map_err(|_| FaultParseError::Number {
                line,
                token: t.to_string(),
            })
        };
        let time = num(toks[0])?;
        let rank = RankId(num(toks[1])? as u32);
        let action = match (toks[2], toks.len()) {
            ("kill", 3) => FaultAction::Kill,
            ("drop", 5) => FaultAction::Drop(parse_pattern(toks[3], toks[4], line)?),
            ("delay", 6) => {
                let pat = parse_pattern(toks[3], toks[4], line)?;
                let by = toks[5]
                    .strip_prefix("by=")
                    .ok_or_else(|| FaultParseError::Pattern {
                        line,
                        token: toks[5].to_string(),
                    })?;
                FaultAction::Delay(pat, num(by)?)
            }
            ("kill" | "drop" | "delay", _) => return Err(FaultParseError::Shape { line }),
            (other, _) => {
                return Err(FaultParseError::Action {
                    line,
                    action: other.to_string(),
                })
            }
        };
        Ok(FaultEvent { time, rank, action })
    }
}

fn parse_pattern(route: &str, tag: &str, line: usize) -> Result<MessagePattern, FaultParseError> {
    let bad = || FaultParseError::Pattern {
        line,
        token: format!("{route} {tag}"),
    };
    let (src, dst) = route.split_once("->").ok_or_else(bad)?;
    let tag = tag.strip_prefix("tag=").ok_or_else(bad)?;
    Ok(MessagePattern {
        src: RankId(src.parse().map_err(|_| bad())?),
        dst: RankId(dst.parse().map_err(|_| bad())?),
        tag: tag.parse().map_err(|_| bad())?,
    })
}

impl FromStr for FaultScript {
    type Err = FaultParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut events = Vec::new();
        for (i, raw) in s.lines().enumerate() {
            let text = raw.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            events.push(FaultScript::parse_line(text, i + 1)?);
        }
        Ok(FaultScript::new(events))
    }
}

impl fmt::Display for FaultScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.events {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_three_actions() {
        let s: FaultScript = "5 1 drop 0->1 tag=7\n0 2 kill\n3 0 delay 0->2 tag=1 by=4\n"
            .parse()
            .unwrap();
        let ev = s.events();
        assert_eq!(ev.len(), 3);
        assert_eq!(ev[0], FaultScript::kill(0, RankId(2)));
        assert_eq!(ev[1].time, 3);
        assert!(matches!(ev[1].action, FaultAction::Delay(p, 4) if p.dst == RankId(2)));
        assert!(matches!(ev[2].action, FaultAction::Drop(p) if p.tag == 7));
        // Display writes the same grammar back.
        let again: FaultScript = s.to_string().parse().unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(
            "1 0 explode".parse::<FaultScript>(),
            Err(FaultParseError::Action {
                line: 1,
                action: "explode".into()
            })
        );
        assert!(matches!(
            "x 0 kill".parse::<FaultScript>(),
            Err(FaultParseError::Number { .. })
        ));
        assert!(matches!(
            "1 0 drop 0-1 tag=3".parse::<FaultScript>(),
            Err(FaultParseError::Pattern { .. })
        ));
        assert!(matches!(
            "1 0 kill now".parse::<FaultScript>(),
            Err(FaultParseError::Shape { .. })
        ));
    }
}
