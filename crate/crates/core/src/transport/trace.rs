//! Replayable event log of one simulated execution.

use std::fmt::{self, Write as _};

use super::sim::MsgId;
use super::{ChannelId, ChannelRole, RankId, RequestId, RequestState, Source, Tag};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelInfo {
    pub id: ChannelId,
    pub role: ChannelRole,
    pub parent: Option<ChannelId>,
    pub group: Vec<RankId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Alloc {
        channel: ChannelId,
        role: ChannelRole,
        members: usize,
    },
    PostSend {
        rank: RankId,
        req: RequestId,
        dest: RankId,
        channel: ChannelId,
        tag: Tag,
        bytes: usize,
        sync: bool,
    },
    PostRecv {
        rank: RankId,
        req: RequestId,
        source: Source,
        channel: ChannelId,
        tag: Tag,
    },
    /// Revocation notice emitted by the transport on behalf of `src`.
    Notice {
        msg: MsgId,
        dst: RankId,
        channel: ChannelId,
        origin: RankId,
    },
    Deliver {
        msg: MsgId,
        dst: RankId,
        channel: ChannelId,
        tag: Tag,
        matched: Option<RequestId>,
    },
    /// A receive matched an already-delivered message when it was posted.
    Match {
        req: RequestId,
        msg: MsgId,
    },
    State {
        req: RequestId,
        state: RequestState,
    },
    Cancel {
        rank: RankId,
        req: RequestId,
        ok: bool,
    },
    Test {
        rank: RankId,
        req: RequestId,
        state: RequestState,
    },
    WaitAny {
        rank: RankId,
        index: usize,
    },
    Yield {
        rank: RankId,
    },
    Dropped {
        msg: MsgId,
        dst: RankId,
        tag: Tag,
    },
    Delayed {
        msg: MsgId,
        until: u64,
    },
    Discard {
        msg: MsgId,
        dst: RankId,
        reason: &'static str,
    },
    Kill {
        rank: RankId,
    },
    Revoke {
        rank: RankId,
        channel: ChannelId,
        origin: RankId,
    },
    Leak {
        rank: RankId,
        count: usize,
    },
    Done {
        rank: RankId,
        outcome: String,
    },
    Idle {
        until: u64,
    },
    Deadlock {
        blocked: Vec<RankId>,
    },
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub step: u64,
    pub event: TraceEvent,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ", self.step)?;
        match &self.event {
            TraceEvent::Alloc {
                channel,
                role,
                members,
            } => write!(f, "alloc channel={channel} role={role} members={members}"),
            TraceEvent::PostSend {
                rank,
                req,
                dest,
                channel,
                tag,
                bytes,
                sync,
            } => write!(
                f,
                "send rank={rank} req={req} dest={dest} channel={channel} tag={tag} bytes={bytes} mode={}",
                if *sync { "sync" } else { "standard" }
            ),
            TraceEvent::PostRecv {
                rank,
                req,
                source,
                channel,
                tag,
            } => write!(
                f,
                "recv rank={rank} req={req} source={source} channel={channel} tag={tag}"
            ),
            TraceEvent::Notice {
                msg,
                dst,
                channel,
                origin,
            } => write!(
                f,
                "notice msg={msg} dst={dst} channel={channel} origin={origin}"
            ),
            TraceEvent::Deliver {
                msg,
                dst,
                channel,
                tag,
                matched,
            } => {
                write!(f, "deliver msg={msg} dst={dst} channel={channel} tag={tag} ")?;
                match matched {
                    Some(r) => write!(f, "matched={r}"),
                    None => f.write_str("matched=none"),
                }
            }
            TraceEvent::Match { req, msg } => write!(f, "match req={req} msg={msg}"),
            TraceEvent::State { req, state } => write!(f, "state req={req} state={state}"),
            TraceEvent::Cancel { rank, req, ok } => {
                write!(f, "cancel rank={rank} req={req} ok={ok}")
            }
            TraceEvent::Test { rank, req, state } => {
                write!(f, "test rank={rank} req={req} state={state}")
            }
            TraceEvent::WaitAny { rank, index } => write!(f, "waitany rank={rank} index={index}"),
            TraceEvent::Yield { rank } => write!(f, "yield rank={rank}"),
            TraceEvent::Dropped { msg, dst, tag } => {
                write!(f, "fault-drop msg={msg} dst={dst} tag={tag}")
            }
            TraceEvent::Delayed { msg, until } => write!(f, "fault-delay msg={msg} until={until}"),
            TraceEvent::Discard { msg, dst, reason } => {
                write!(f, "discard msg={msg} dst={dst} reason={reason}")
            }
            TraceEvent::Kill { rank } => write!(f, "fault-kill rank={rank}"),
            TraceEvent::Revoke {
                rank,
                channel,
                origin,
            } => write!(f, "revoke rank={rank} channel={channel} origin={origin}"),
            TraceEvent::Leak { rank, count } => write!(f, "leak rank={rank} count={count}"),
            TraceEvent::Done { rank, outcome } => write!(f, "done rank={rank} outcome={outcome}"),
            TraceEvent::Idle { until } => write!(f, "idle until={until}"),
            TraceEvent::Deadlock { blocked } => {
                f.write_str("deadlock blocked=")?;
                let list: Vec<String> = blocked.iter().map(|r| r.to_string()).collect();
                f.write_str(&list.join(","))
            }
            TraceEvent::StepLimit => f.write_str("step-limit"),
        }
    }
}

/// How a rank's logical thread ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankEnd<O> {
    Finished(O),
    Killed,
    /// Still blocked when the run stopped.
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Termination {
    /// Every live rank finished its program.
    Completed,
    /// Nothing could ever happen again while some live rank was blocked.
    Deadlocked,
    StepLimit,
    /// Explorer only: every enabled event was in the sleep set.
    Pruned,
    /// Explorer only: the depth budget was exhausted.
    Truncated,
}

#[derive(Debug, Clone)]
pub struct Trace<O> {
    pub records: Vec<TraceRecord>,
    pub ends: Vec<RankEnd<O>>,
    pub termination: Termination,
    pub steps: u64,
    pub channels: Vec<ChannelInfo>,
    pub leak_count: u64,
    /// Digest of the final state: per-rank observation histories and
    /// per-tag arrival orders. Equal for runs that differ only in the order
    /// of independent events.
    pub fingerprint: u128,
    pub(crate) footprints: Vec<super::sim::Footprint>,
}

impl<O> Trace<O> {
    pub fn deadlocked(&self) -> bool {
        self.termination == Termination::Deadlocked
    }

    /// Newline-delimited `<step> <event-kind> <fields...>` records.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{r}");
        }
        out
    }

    pub fn channel(&self, id: ChannelId) -> Option<&ChannelInfo> {
        self.channels.iter().find(|c| c.id == id)
    }

    pub fn role_of(&self, id: ChannelId) -> Option<ChannelRole> {
        self.channel(id).map(|c| c.role)
    }

    /// Number of user-visible sends plus transport notices posted on
    /// channels with the given role.
    pub fn messages_on(&self, role: ChannelRole) -> usize {
        self.records
            .iter()
            .filter(|r| match &r.event {
                TraceEvent::PostSend { channel, .. } | TraceEvent::Notice { channel, .. } => {
                    self.role_of(*channel) == Some(role)
                }
                _ => false,
            })
            .count()
    }

    pub fn total_messages(&self) -> usize {
        self.records
            .iter()
            .filter(|r| {
                matches!(
                    r.event,
                    TraceEvent::PostSend { .. } | TraceEvent::Notice { .. }
                )
            })
            .count()
    }

    /// Sends posted by `rank` on channels of `role` with tag `tag`.
    pub fn sends_from(&self, rank: RankId, role: ChannelRole, tag: Tag) -> usize {
        self.records
            .iter()
            .filter(|r| match &r.event {
                TraceEvent::PostSend {
                    rank: src,
                    channel,
                    tag: t,
                    ..
                } => *src == rank && *t == tag && self.role_of(*channel) == Some(role),
                _ => false,
            })
            .count()
    }

    pub fn kill_step(&self, rank: RankId) -> Option<u64> {
        self.records.iter().find_map(|r| match r.event {
            TraceEvent::Kill { rank: k } if k == rank => Some(r.step),
            _ => None,
        })
    }
}
