//! Non-blocking point-to-point substrate and its deterministic simulator.
//!
//! The [`Transport`] trait is the only thing the protocol layers depend on.
//! [`Simulation`] is the flagship implementation: every rank program is an
//! `async` task driven by a single-threaded cooperative scheduler, so that
//! a run is a pure function of the program set, the [`FaultScript`] and the
//! schedule choices.

mod explore;
mod faults;
mod sim;
mod trace;

use std::fmt;
use std::future::Future;

use serde::{Deserialize, Serialize};

pub use explore::{explore, ExploreBudget, ExploreStats};
pub use faults::{FaultAction, FaultEvent, FaultParseError, FaultScript, MessagePattern};
pub use sim::{
    EventKey, MsgId, ScheduleSeed, SimConfig, SimEndpoint, Simulation, CONTROL_CHANNEL_KEY,
    NOTICE_KIND, NOTICE_TAG,
};
pub use trace::{ChannelInfo, RankEnd, Termination, Trace, TraceEvent, TraceRecord};

/// Dense index of a participant, `0 <= value < size`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct RankId(pub u32);

impl RankId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for RankId {
    fn from(v: usize) -> Self {
        RankId(u32::try_from(v).expect("rank index exceeds u32"))
    }
}

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An isolated matching namespace. Messages posted on one channel are only
/// ever matched by receives posted on the same channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelId(pub u32);

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

pub type Tag = u64;

/// Receive source selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Any,
    Rank(RankId),
}

impl Source {
    pub fn matches(self, src: RankId) -> bool {
        match self {
            Source::Any => true,
            Source::Rank(r) => r == src,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Any => f.write_str("any"),
            Source::Rank(r) => write!(f, "{r}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendMode {
    /// Completes as soon as the payload is buffered.
    Standard,
    /// Completes only once a matching receive has consumed the message.
    Synchronous,
}

/// Opaque request handle, unique within one transport instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub(crate) u32);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

/// Failure classes a request can terminate with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportErrorKind {
    /// The peer of a point-to-point operation is dead.
    ProcFailed,
    /// An any-source receive cannot complete safely because a potential
    /// sender is dead.
    ProcFailedPending,
    /// The channel was revoked.
    Revoked,
    /// The matched payload exceeded the receive capacity.
    Truncated,
}

impl TransportErrorKind {
    /// Numeric code carried by `TransportError` outcomes.
    pub fn code(self) -> i32 {
        match self {
            TransportErrorKind::ProcFailed => 101,
            TransportErrorKind::ProcFailedPending => 102,
            TransportErrorKind::Revoked => 103,
            TransportErrorKind::Truncated => 15,
        }
    }

    pub fn is_hard_fault(self) -> bool {
        matches!(
            self,
            TransportErrorKind::ProcFailed | TransportErrorKind::ProcFailedPending
        )
    }
}

impl fmt::Display for TransportErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportErrorKind::ProcFailed => "proc-failed",
            TransportErrorKind::ProcFailedPending => "proc-failed-pending",
            TransportErrorKind::Revoked => "revoked",
            TransportErrorKind::Truncated => "truncated",
        })
    }
}

/// Request lifecycle: `Pending` followed by exactly one terminal state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RequestState {
    Pending,
    Complete,
    Cancelled,
    Errored(TransportErrorKind),
}

impl RequestState {
    pub fn is_terminal(self) -> bool {
        !matches!(self, RequestState::Pending)
    }
}

impl fmt::Display for RequestState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RequestState::Pending => f.write_str("pending"),
            RequestState::Complete => f.write_str("complete"),
            RequestState::Cancelled => f.write_str("cancelled"),
            RequestState::Errored(k) => write!(f, "errored({k})"),
        }
    }
}

/// Data of a completed receive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub source: RankId,
    pub tag: Tag,
    pub payload: Vec<u8>,
}

/// What a channel is used for; only relevant for accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelRole {
    World,
    Data,
    Error,
    Control,
}

impl fmt::Display for ChannelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelRole::World => "world",
            ChannelRole::Data => "data",
            ChannelRole::Error => "error",
            ChannelRole::Control => "control",
        })
    }
}

/// Non-blocking point-to-point operations as seen from one rank.
///
/// Posting is immediate and never blocks. The `async` methods are the only
/// points where a rank observes request state; an implementation is free to
/// reschedule other ranks there. [`Transport::state`] and
/// [`Transport::take_completion`] must only be used on requests already
/// observed terminal through one of those methods.
///
/// All methods of one handle are called from its rank's logical thread.
#[allow(async_fn_in_trait)]
pub trait Transport: Clone {
    fn rank(&self) -> RankId;
    fn size(&self) -> usize;
    /// Whether dead peers are reported as request errors.
    fn liveness_detection(&self) -> bool;
    fn world_channel(&self) -> ChannelId;

    /// Returns the channel registered under `(parent, key)`, allocating it
    /// on first use. Every rank of `group` asking with the same key gets the
    /// same channel.
    fn derive_channel(
        &self,
        parent: ChannelId,
        key: u64,
        group: &[RankId],
        role: ChannelRole,
    ) -> ChannelId;

    fn post_send(
        &self,
        dest: RankId,
        channel: ChannelId,
        tag: Tag,
        payload: Vec<u8>,
        mode: SendMode,
    ) -> RequestId;

    fn post_recv(&self, source: Source, channel: ChannelId, tag: Tag, capacity: usize)
        -> RequestId;

    /// Flags a request as internal to a collective operation; cancelling it
    /// afterwards is a programming error.
    fn mark_collective(&self, req: RequestId);

    /// Returns `true` if the request was pending and unmatched and is now
    /// cancelled, `false` if it had already terminated.
    async fn cancel(&self, req: RequestId) -> bool;

    async fn test(&self, req: RequestId) -> RequestState;

    /// Blocks until at least one request is terminal and returns the lowest
    /// such index.
    async fn wait_any(&self, reqs: &[RequestId]) -> usize;

    /// Gives other ranks a chance to run.
    async fn yield_now(&self);

    fn state(&self, req: RequestId) -> RequestState;

    fn take_completion(&self, req: RequestId) -> Option<Completion>;

    /// Records requests deliberately abandoned while still pending.
    fn record_leak(&self, reqs: &[RequestId]);

    /// Revokes `channel` locally and starts propagating the revocation to
    /// every member of the channel group. Idempotent.
    fn revoke(&self, channel: ChannelId);

    async fn is_revoked(&self, channel: ChannelId) -> bool;
}

/// Process-level runtime bookkeeping (initialisation and the single live
/// instance per rank context).
pub trait Runtime {
    fn is_initialized(&self) -> bool;
    fn initialize(&self);
    fn finalize(&self);
    /// Returns `false` if an instance is already live on this rank.
    fn claim_instance(&self) -> bool;
    fn release_instance(&self);
}

/// Waits until every request in `reqs` is terminal, observing them in
/// order so that the order in which they complete is not observed.
pub async fn wait_all<T: Transport>(t: &T, reqs: &[RequestId]) {
    for &q in reqs {
        t.wait_any(&[q]).await;
    }
}

/// Convenience for programs that want to box heterogeneous rank bodies.
pub type LocalBoxFuture<O> = std::pin::Pin<Box<dyn Future<Output = O>>>;
