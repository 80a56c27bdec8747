//! Communicators and futures.

use std::fmt;

use super::collectives::{
    allreduce_plan, barrier_plan, first_error, CollectiveCtx, Interrupt, PhaseWaiter, ReduceOp,
};
use super::resolve::ProtocolCtx;
use super::wire::{self, Codec, ERR_TAG, PROTOCOL_TAG_BASE};
use super::{ErrorCode, Mode, ProtocolError, Received, WaitOutcome};
use crate::transport::{
    ChannelId, ChannelRole, RankId, RequestId, RequestState, SendMode, Source, Tag, Transport,
};
use crate::ulfm::LocalReason;

pub(crate) const ERR_KEY: u64 = 1;
pub(crate) const DUP_KEY: u64 = 0x1000;
pub(crate) const SHRINK_KEY: u64 = 0x1_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CommState {
    Healthy,
    /// An error episode is being resolved (black-channel mode).
    Erroring,
    /// Revocation observed, episode being resolved (ulfm mode).
    Revoked,
    /// Scope exited or episode resolved; only the cached outcome remains.
    Closed,
}

impl fmt::Display for CommState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommState::Healthy => "healthy",
            CommState::Erroring => "erroring",
            CommState::Revoked => "revoked",
            CommState::Closed => "closed",
        })
    }
}

/// A pending non-blocking point-to-point operation. Consumed by
/// [`Communicator::wait`].
#[derive(Debug)]
#[must_use = "a future must be waited on"]
pub struct CommFuture {
    req: RequestId,
    channel: ChannelId,
}

impl CommFuture {
    pub fn request(&self) -> RequestId {
        self.req
    }
}

/// One rank's handle on a communicator. Not clonable; use
/// [`Communicator::duplicate`].
pub struct Communicator<T: Transport> {
    pub(crate) t: T,
    pub(crate) mode: Mode,
    pub(crate) group: Vec<RankId>,
    pub(crate) me: usize,
    pub(crate) data: ChannelId,
    pub(crate) err: Option<ChannelId>,
    pub(crate) err_recv: Option<RequestId>,
    pub(crate) state: CommState,
    pub(crate) outcome: Option<WaitOutcome>,
    dup_seq: u64,
    coll_seq: u64,
    pub(crate) agree_seq: u64,
    pub(crate) shrink_seq: u64,
}

impl<T: Transport> fmt::Debug for Communicator<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Communicator")
            .field("mode", &self.mode)
            .field("rank", &self.me)
            .field("size", &self.group.len())
            .field("data", &self.data)
            .field("err", &self.err)
            .field("state", &self.state)
            .finish()
    }
}

/// Phase waiter that also watches for error notices or revocation.
struct GuardWaiter<'a, T> {
    t: &'a T,
    err_recv: Option<RequestId>,
}

impl<T: Transport> PhaseWaiter for GuardWaiter<'_, T> {
    async fn wait_phase(&mut self, reqs: &[RequestId]) -> Result<(), Interrupt> {
        match self.err_recv {
            Some(er) => {
                for &q in reqs {
                    if self.t.wait_any(&[q, er]).await == 1 {
                        return Err(Interrupt::ErrorNotice);
                    }
                }
            }
            None => crate::transport::wait_all(self.t, reqs).await,
        }
        first_error(self.t, reqs)
    }
}

impl<T: Transport> Communicator<T> {
    pub(crate) fn create(t: T, mode: Mode, group: Vec<RankId>, data: ChannelId) -> Self {
        let me = group
            .iter()
            .position(|&r| r == t.rank())
            .expect("caller is not a member of the group");
        let (err, err_recv) = match mode {
            Mode::BlackChannel => {
                let err = t.derive_channel(data, ERR_KEY, &group, ChannelRole::Error);
                let recv = t.post_recv(Source::Any, err, ERR_TAG, 8);
                (Some(err), Some(recv))
            }
            Mode::Ulfm => {
                assert!(
                    t.liveness_detection(),
                    "ulfm mode needs a transport with liveness detection"
                );
                (None, None)
            }
        };
        Communicator {
            t,
            mode,
            group,
            me,
            data,
            err,
            err_recv,
            state: CommState::Healthy,
            outcome: None,
            dup_seq: 0,
            coll_seq: 0,
            agree_seq: 0,
            shrink_seq: 0,
        }
    }

    pub fn rank(&self) -> usize {
        self.me
    }

    pub fn size(&self) -> usize {
        self.group.len()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn state(&self) -> CommState {
        self.state
    }

    pub fn transport(&self) -> &T {
        &self.t
    }

    /// Members as transport ranks, indexed by communicator rank.
    pub fn group(&self) -> &[RankId] {
        &self.group
    }

    pub fn data_channel(&self) -> ChannelId {
        self.data
    }

    pub fn error_channel(&self) -> Option<ChannelId> {
        self.err
    }

    /// The pending error receive (black-channel mode, healthy state only).
    pub fn error_receive(&self) -> Option<RequestId> {
        self.err_recv
    }

    fn usable(&self) -> Result<(), ProtocolError> {
        match self.state {
            CommState::Healthy => Ok(()),
            s => Err(ProtocolError::Unusable(s)),
        }
    }

    fn peer(&self, rank: usize) -> Result<RankId, ProtocolError> {
        self.group
            .get(rank)
            .copied()
            .ok_or(ProtocolError::RankOutOfRange {
                rank,
                size: self.size(),
            })
    }

    fn check_tag(tag: Tag) -> Result<(), ProtocolError> {
        if tag >= PROTOCOL_TAG_BASE {
            return Err(ProtocolError::ReservedTag(tag));
        }
        Ok(())
    }

    /// New communicator over the same group with fresh channels. Collective.
    pub fn duplicate(&mut self) -> Result<Communicator<T>, ProtocolError> {
        self.usable()?;
        let key = DUP_KEY + self.dup_seq;
        self.dup_seq += 1;
        let data = self
            .t
            .derive_channel(self.data, key, &self.group, ChannelRole::Data);
        Ok(Communicator::create(
            self.t.clone(),
            self.mode,
            self.group.clone(),
            data,
        ))
    }

    pub fn isend(
        &mut self,
        dest: usize,
        tag: Tag,
        payload: Vec<u8>,
    ) -> Result<CommFuture, ProtocolError> {
        self.usable()?;
        Self::check_tag(tag)?;
        let dest = self.peer(dest)?;
        let req = self
            .t
            .post_send(dest, self.data, tag, payload, SendMode::Standard);
        Ok(CommFuture {
            req,
            channel: self.data,
        })
    }

    /// `source` of `None` receives from any rank.
    pub fn irecv(
        &mut self,
        source: Option<usize>,
        tag: Tag,
        capacity: usize,
    ) -> Result<CommFuture, ProtocolError> {
        self.usable()?;
        Self::check_tag(tag)?;
        let source = match source {
            Some(s) => Source::Rank(self.peer(s)?),
            None => Source::Any,
        };
        let req = self.t.post_recv(source, self.data, tag, capacity);
        Ok(CommFuture {
            req,
            channel: self.data,
        })
    }

    fn user_outcome(&self, req: RequestId) -> WaitOutcome {
        match self.t.state(req) {
            RequestState::Complete => {
                let received = self.t.take_completion(req).map(|c| Received {
                    source: self
                        .group
                        .iter()
                        .position(|&r| r == c.source)
                        .expect("message from outside the group"),
                    payload: c.payload,
                });
                WaitOutcome::Success(received)
            }
            RequestState::Errored(k) => WaitOutcome::TransportError(k),
            RequestState::Cancelled => WaitOutcome::Success(None),
            RequestState::Pending => unreachable!("outcome of a pending request"),
        }
    }

    pub(crate) fn close(&mut self, outcome: WaitOutcome) -> WaitOutcome {
        self.state = CommState::Closed;
        self.err_recv = None;
        self.outcome = Some(outcome.clone());
        outcome
    }

    /// Completes the future, or reports the error episode that interrupted it.
    pub async fn wait(&mut self, fut: CommFuture) -> WaitOutcome {
        assert_eq!(
            fut.channel, self.data,
            "future waited on a communicator it does not belong to"
        );
        if let Some(o) = self.outcome.clone() {
            self.t.cancel(fut.req).await;
            return o;
        }
        match self.mode {
            Mode::BlackChannel => {
                let er = self
                    .err_recv
                    .expect("healthy communicator without error receive");
                if self.t.wait_any(&[fut.req, er]).await == 0 {
                    if self.t.test(er).await == RequestState::Pending {
                        return self.user_outcome(fut.req);
                    }
                } else {
                    self.t.cancel(fut.req).await;
                }
                self.join_episode().await
            }
            Mode::Ulfm => {
                self.t.wait_any(&[fut.req]).await;
                match self.t.state(fut.req) {
                    RequestState::Errored(k) if k.is_hard_fault() => {
                        self.t.revoke(self.data);
                        self.on_revoked(LocalReason::HardFault).await
                    }
                    RequestState::Errored(crate::transport::TransportErrorKind::Revoked) => {
                        self.on_revoked(LocalReason::Unaffected).await
                    }
                    _ => self.user_outcome(fut.req),
                }
            }
        }
    }

    /// Propagates `code` to every rank and returns the resolved episode
    /// outcome, which always carries this rank's own entry or corruption.
    pub async fn signal_error(&mut self, code: ErrorCode) -> WaitOutcome {
        if let Some(o) = self.outcome.clone() {
            return o;
        }
        match self.mode {
            Mode::BlackChannel => self.signal_black_channel(code, true).await,
            Mode::Ulfm => {
                self.t.revoke(self.data);
                self.on_revoked(LocalReason::Signalled(code)).await
            }
        }
    }

    /// Leaves the communicator's scope. When `unwinding`, every rank is
    /// driven to [`WaitOutcome::CorruptedComm`]. A clean exit that finds an
    /// error episode under way joins it.
    pub async fn exit_scope(mut self, unwinding: bool) -> WaitOutcome {
        if let Some(o) = self.outcome.clone() {
            return o;
        }
        match (self.mode, unwinding) {
            (Mode::BlackChannel, true) => self.signal_black_channel(ErrorCode::UNWIND, false).await,
            (Mode::Ulfm, true) => {
                self.t.revoke(self.data);
                self.on_revoked(LocalReason::Corrupt).await
            }
            (Mode::BlackChannel, false) => {
                let er = self
                    .err_recv
                    .expect("healthy communicator without error receive");
                if self.t.cancel(er).await {
                    self.close(WaitOutcome::Success(None))
                } else {
                    self.join_episode().await
                }
            }
            (Mode::Ulfm, false) => {
                if self.t.is_revoked(self.data).await {
                    self.on_revoked(LocalReason::Unaffected).await
                } else {
                    self.close(WaitOutcome::Success(None))
                }
            }
        }
    }

    /// Reduction over all ranks. Internal requests are never cancelled: if
    /// an episode interrupts the collective they are abandoned and counted
    /// as leaked.
    pub async fn allreduce(
        &mut self,
        op: ReduceOp,
        values: &[u64],
    ) -> Result<Vec<u64>, WaitOutcome> {
        let plan = allreduce_plan(self.me, self.size());
        self.user_collective(&plan, values.to_vec(), op).await
    }

    pub async fn barrier(&mut self) -> WaitOutcome {
        let plan = barrier_plan(self.me, self.size());
        match self.user_collective(&plan, Vec::new(), ReduceOp::Sum).await {
            Ok(_) => WaitOutcome::Success(None),
            Err(o) => o,
        }
    }

    async fn user_collective(
        &mut self,
        plan: &[super::collectives::Phase],
        values: Vec<u64>,
        op: ReduceOp,
    ) -> Result<Vec<u64>, WaitOutcome> {
        if let Some(o) = self.outcome.clone() {
            return Err(o);
        }
        let seq = self.coll_seq;
        self.coll_seq += 1;
        let ctx = CollectiveCtx {
            t: &self.t,
            group: &self.group,
            channel: self.data,
            tag_base: wire::user_collective_tag(seq),
            codec: Codec::U64s,
            user: true,
        };
        let mut waiter = GuardWaiter {
            t: &self.t,
            err_recv: self.err_recv,
        };
        let result = ctx.run(plan, values, op, &mut waiter).await;
        let interrupt = match result {
            Ok(v) => match self.err_recv {
                Some(er) if self.t.test(er).await != RequestState::Pending => {
                    Interrupt::ErrorNotice
                }
                _ => return Ok(v),
            },
            Err(i) => i,
        };
        Err(match interrupt {
            Interrupt::ErrorNotice => self.join_episode().await,
            Interrupt::Revoked => self.on_revoked(LocalReason::Unaffected).await,
            Interrupt::HardFault => {
                self.t.revoke(self.data);
                self.on_revoked(LocalReason::HardFault).await
            }
            Interrupt::Transport(k) => WaitOutcome::TransportError(k),
        })
    }

    /// Black-channel signalling; `healthy` is this rank's corruption vote.
    async fn signal_black_channel(&mut self, code: ErrorCode, healthy: bool) -> WaitOutcome {
        self.state = CommState::Erroring;
        let err = self
            .err
            .expect("black-channel communicator without error channel");
        let payload = wire::encode_u64s(&[code.get() as u64]);
        let sends: Vec<RequestId> = (0..self.size())
            .filter(|&p| p != self.me)
            .map(|p| {
                self.t.post_send(
                    self.group[p],
                    err,
                    ERR_TAG,
                    payload.clone(),
                    SendMode::Synchronous,
                )
            })
            .collect();
        let er = self
            .err_recv
            .take()
            .expect("healthy communicator without error receive");
        let already_notified = !self.t.cancel(er).await;
        let mut cleanup = sends.clone();
        if !already_notified && !sends.is_empty() {
            // Another rank may be signalling at the same time and waiting
            // for our receive, so keep listening while our sends drain.
            let detector = self.t.post_recv(Source::Any, err, ERR_TAG, 8);
            for &s in &sends {
                if self.t.wait_any(&[detector, s]).await == 0 {
                    break;
                }
            }
            cleanup.push(detector);
        }
        self.resolve_episode(Some(code), !healthy, &cleanup).await
    }

    /// Entered after an error notice was received.
    async fn join_episode(&mut self) -> WaitOutcome {
        self.state = CommState::Erroring;
        self.err_recv = None;
        self.resolve_episode(None, false, &[]).await
    }

    async fn resolve_episode(
        &mut self,
        failed: Option<ErrorCode>,
        corrupt: bool,
        cleanup: &[RequestId],
    ) -> WaitOutcome {
        let ctx = ProtocolCtx {
            t: &self.t,
            group: &self.group,
            channel: self
                .err
                .expect("black-channel communicator without error channel"),
            me: self.me,
        };
        ctx.barrier()
            .await
            .expect("error-channel barrier failed in black-channel mode");
        // Sends still pending here went to ranks notified by someone else.
        for &q in cleanup {
            self.t.cancel(q).await;
        }
        let healthy = ctx
            .vote(!corrupt)
            .await
            .expect("corruption vote failed in black-channel mode");
        let outcome = if healthy {
            match ctx.determine_failed(failed).await {
                Ok(report) => WaitOutcome::Propagated(report),
                Err(e) => panic!("{e}"),
            }
        } else {
            WaitOutcome::CorruptedComm
        };
        self.close(outcome)
    }
}
