//! User-facing communicators, futures and the error-propagation protocol.
//!
//! Errors are not raised but returned as [`WaitOutcome`] variants from
//! [`Communicator::wait`], [`Communicator::signal_error`] and
//! [`Communicator::exit_scope`].

pub mod collectives;
mod comm;
mod resolve;
pub mod wire;

use std::cell::Cell;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::{ChannelRole, RankId, Runtime, Transport, TransportErrorKind};

pub use collectives::ReduceOp;
pub use comm::{CommFuture, CommState, Communicator};
pub use resolve::{determine_failed, FailedRanksError};

pub(crate) mod comm_internals {
    pub(crate) use super::comm::SHRINK_KEY;
    pub(crate) use super::resolve::ProtocolCtx;
}

/// Which protocol a communicator runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Error notices on a duplicate channel; soft faults only.
    BlackChannel,
    /// Revoke, agree and shrink over a transport with liveness detection.
    Ulfm,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::BlackChannel, Mode::Ulfm];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::BlackChannel => "black-channel",
            Mode::Ulfm => "ulfm",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "black-channel" => Ok(Mode::BlackChannel),
            "ulfm" => Ok(Mode::Ulfm),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// A user error code, `1 ..= i32::MAX`. Zero is reserved as the empty slot
/// of the resolution arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct ErrorCode(i32);

impl ErrorCode {
    /// Code carried by an unwinding scope exit.
    pub const UNWIND: ErrorCode = ErrorCode(i32::MAX);

    pub fn new(value: i64) -> Result<Self, ProtocolError> {
        match i32::try_from(value) {
            Ok(v) if v >= 1 => Ok(ErrorCode(v)),
            _ => Err(ProtocolError::InvalidCode(value)),
        }
    }

    pub fn get(self) -> i32 {
        self.0
    }
}

impl TryFrom<i64> for ErrorCode {
    type Error = ProtocolError;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        ErrorCode::new(v)
    }
}

impl From<ErrorCode> for i64 {
    fn from(c: ErrorCode) -> i64 {
        i64::from(c.0)
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Failed ranks with their codes, sorted by rank, ranks unique.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ErrorReport {
    entries: Vec<(u32, ErrorCode)>,
}

impl ErrorReport {
    /// Sorts the entries; fails on an empty list or duplicate ranks.
    pub fn new(mut entries: Vec<(u32, ErrorCode)>) -> Result<Self, FailedRanksError> {
        if entries.is_empty() {
            return Err(FailedRanksError::Empty);
        }
        entries.sort_by_key(|e| e.0);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(FailedRanksError::DuplicateRank(w[0].0));
        }
        Ok(ErrorReport { entries })
    }

    pub fn entries(&self) -> &[(u32, ErrorCode)] {
        &self.entries
    }

    pub fn ranks(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn code_of(&self, rank: u32) -> Option<ErrorCode> {
        self.entries.iter().find(|e| e.0 == rank).map(|e| e.1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Renames ranks through `map` (index = old rank).
    pub(crate) fn remap(self, map: &[usize]) -> Self {
        let entries = self
            .entries
            .into_iter()
            .map(|(r, c)| (map[r as usize] as u32, c))
            .collect();
        ErrorReport::new(entries).expect("rank renaming must stay injective")
    }
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (r, c)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{r}:{c}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for ErrorReport {
    type Err = String;

    /// Parses `rank:code,rank:code`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut entries = Vec::new();
        for part in s.split(',') {
            let (r, c) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| format!("expected rank:code, got `{part}`"))?;
            let r: u32 = r.parse().map_err(|_| format!("bad rank `{r}`"))?;
            let c: i64 = c.parse().map_err(|_| format!("bad code `{c}`"))?;
            entries.push((r, ErrorCode::new(c).map_err(|e| e.to_string())?));
        }
        ErrorReport::new(entries).map_err(|e| e.to_string())
    }
}

/// Data of a successfully received message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Received {
    /// Sender, as a rank of the communicator.
    pub source: usize,
    pub payload: Vec<u8>,
}

/// Result of waiting on a future or taking part in an error episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WaitOutcome {
    /// The operation completed; receives carry their data.
    Success(Option<Received>),
    /// One or more ranks signalled errors.
    Propagated(ErrorReport),
    /// Some rank left its scope while unwinding or died; the communicator
    /// must be abandoned.
    CorruptedComm,
    /// A transport failure that is neither propagation nor corruption.
    TransportError(TransportErrorKind),
}

impl WaitOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, WaitOutcome::Success(_))
    }

    pub fn report(&self) -> Option<&ErrorReport> {
        match self {
            WaitOutcome::Propagated(r) => Some(r),
            _ => None,
        }
    }
}

impl fmt::Display for WaitOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WaitOutcome::Success(_) => f.write_str("success"),
            WaitOutcome::Propagated(r) => write!(f, "propagated[{r}]"),
            WaitOutcome::CorruptedComm => f.write_str("corrupted-comm"),
            WaitOutcome::TransportError(k) => write!(f, "transport-error({})", k.code()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("error code {0} outside 1..=2147483647")]
    InvalidCode(i64),
    #[error("an instance is already live on this rank")]
    InstanceAlreadyLive,
    #[error("tag {0} lies in the reserved protocol range")]
    ReservedTag(u64),
    #[error("rank {rank} outside communicator of size {size}")]
    RankOutOfRange { rank: usize, size: usize },
    #[error("communicator is {0} and cannot be used for this operation")]
    Unusable(CommState),
    #[error("operation requires {0} mode")]
    WrongMode(Mode),
}

/// Per-rank owner of the runtime lifecycle. At most one is live per rank.
pub struct Instance<T: Transport + Runtime> {
    t: T,
    owns_runtime: bool,
    dup_seq: Cell<u64>,
}

impl<T: Transport + Runtime> Instance<T> {
    /// Initialises the runtime unless a host already did.
    pub fn acquire(t: T) -> Result<Self, ProtocolError> {
        if !t.claim_instance() {
            return Err(ProtocolError::InstanceAlreadyLive);
        }
        let owns_runtime = !t.is_initialized();
        if owns_runtime {
            t.initialize();
        }
        Ok(Instance {
            t,
            owns_runtime,
            dup_seq: Cell::new(0),
        })
    }

    pub fn owns_runtime(&self) -> bool {
        self.owns_runtime
    }

    pub fn rank(&self) -> usize {
        self.t.rank().index()
    }

    pub fn size(&self) -> usize {
        self.t.size()
    }

    pub fn transport(&self) -> &T {
        &self.t
    }

    /// Duplicates the world group into a fresh communicator. Collective.
    pub fn duplicate_world(&self, mode: Mode) -> Communicator<T> {
        let seq = self.dup_seq.get();
        self.dup_seq.set(seq + 1);
        let group: Vec<RankId> = (0..self.t.size()).map(RankId::from).collect();
        let world = self.t.world_channel();
        let data = self
            .t
            .derive_channel(world, comm::DUP_KEY + seq, &group, ChannelRole::Data);
        Communicator::create(self.t.clone(), mode, group, data)
    }
}

impl<T: Transport + Runtime> Drop for Instance<T> {
    fn drop(&mut self) {
        if self.owns_runtime {
            self.t.finalize();
        }
        self.t.release_instance();
    }
}

impl<T: Transport + Runtime> fmt::Debug for Instance<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Instance")
            .field("rank", &self.t.rank())
            .field("owns_runtime", &self.owns_runtime)
            .finish()
    }
}
