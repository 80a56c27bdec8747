//! Revoke, agree and shrink emulated over the transport, and the episode
//! path of communicators in [`Mode::Ulfm`].
//!
//! Revocation itself is a transport primitive ([`Transport::revoke`]): the
//! simulator floods notices on the channel's control plane and errors every
//! pending and future operation on the revoked channel. Agreement and shrink
//! run as round-based exchanges on the same control plane, which is never
//! revoked.

use std::collections::BTreeSet;

use crate::protocol::comm_internals::{ProtocolCtx, SHRINK_KEY};
use crate::protocol::wire::{agree_tag, AgreeMsg, KIND_AGREE, KIND_SHRINK};
use crate::protocol::{Communicator, ErrorCode, Mode, ProtocolError, WaitOutcome};
use crate::transport::{
    wait_all, ChannelRole, RankId, RequestState, SendMode, Source, Transport, CONTROL_CHANNEL_KEY,
};

/// Why this rank entered the post-revocation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LocalReason {
    /// Observed a remote revocation.
    Unaffected,
    Signalled(ErrorCode),
    /// Scope exit during unwinding.
    Corrupt,
    /// Saw a dead peer.
    HardFault,
}

/// Result of one agreement among survivors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Agreement {
    /// Bitwise AND of the contributions.
    pub value: u64,
    /// Members known dead, as transport ranks.
    pub dead: BTreeSet<RankId>,
}

impl<T: Transport> Communicator<T> {
    fn require_ulfm(&self) -> Result<(), ProtocolError> {
        if self.mode != Mode::Ulfm {
            return Err(ProtocolError::WrongMode(Mode::Ulfm));
        }
        Ok(())
    }

    /// Marks the communicator revoked on every member. Idempotent.
    pub fn revoke(&mut self) -> Result<(), ProtocolError> {
        self.require_ulfm()?;
        self.t.revoke(self.data);
        Ok(())
    }

    /// Fault-tolerant AND over the contributions of the live members.
    /// Works on revoked communicators.
    pub async fn agree(&mut self, value: u64) -> Result<Agreement, ProtocolError> {
        self.require_ulfm()?;
        let seq = self.agree_seq;
        self.agree_seq += 1;
        Ok(self.agree_rounds(KIND_AGREE, seq, value).await)
    }

    /// Collective among survivors: a new communicator over the live members
    /// in their original order, with fresh channels.
    pub async fn shrink(&mut self) -> Result<Communicator<T>, ProtocolError> {
        self.require_ulfm()?;
        let seq = self.shrink_seq;
        self.shrink_seq += 1;
        let agreed = self.agree_rounds(KIND_SHRINK, seq, 1).await;
        let survivors: Vec<RankId> = self
            .group
            .iter()
            .copied()
            .filter(|r| !agreed.dead.contains(r))
            .collect();
        let data =
            self.t
                .derive_channel(self.data, SHRINK_KEY + seq, &survivors, ChannelRole::Data);
        Ok(Communicator::create(
            self.t.clone(),
            Mode::Ulfm,
            survivors,
            data,
        ))
    }

    /// Rounds of all-to-all exchange among members not known dead. A round
    /// in which nobody new was found dead and every received dead set equals
    /// the local one is stable; all live members then see the same messages
    /// and decide identically in that round.
    async fn agree_rounds(&mut self, kind: u8, seq: u64, value: u64) -> Agreement {
        let ctrl = self.t.derive_channel(
            self.data,
            CONTROL_CHANNEL_KEY,
            &self.group,
            ChannelRole::Control,
        );
        let me = self.group[self.me];
        let mut dead: BTreeSet<RankId> = BTreeSet::new();
        let mut acc = value;
        for round in 0u32.. {
            let start: Vec<RankId> = dead.iter().copied().collect();
            let peers: Vec<RankId> = self
                .group
                .iter()
                .copied()
                .filter(|&r| r != me && !dead.contains(&r))
                .collect();
            let tag = agree_tag(kind, seq, round);
            let msg = AgreeMsg {
                kind,
                seq,
                round,
                value: acc,
                dead: start.clone(),
            }
            .encode();
            for &p in &peers {
                self.t
                    .post_send(p, ctrl, tag, msg.clone(), SendMode::Standard);
            }
            let recvs: Vec<_> = peers
                .iter()
                .map(|&p| {
                    self.t.post_recv(
                        Source::Rank(p),
                        ctrl,
                        tag,
                        AgreeMsg::capacity(self.group.len()),
                    )
                })
                .collect();
            wait_all(&self.t, &recvs).await;
            let mut stable = true;
            for (&p, &q) in peers.iter().zip(&recvs) {
                match self.t.state(q) {
                    RequestState::Complete => {
                        let c = self.t.take_completion(q).expect("agreement payload");
                        let m = AgreeMsg::decode(&c.payload).expect("malformed agreement message");
                        debug_assert_eq!((m.kind, m.seq, m.round), (kind, seq, round));
                        acc &= m.value;
                        if m.dead != start {
                            stable = false;
                        }
                        dead.extend(m.dead);
                    }
                    RequestState::Errored(k) if k.is_hard_fault() => {
                        dead.insert(p);
                        stable = false;
                    }
                    other => panic!("agreement receive from {p} ended {other}"),
                }
            }
            if stable {
                return Agreement { value: acc, dead };
            }
        }
        unreachable!("agreement rounds exhausted")
    }

    /// The post-revocation path: agree on corruption, then either report it
    /// or shrink and resolve the failed ranks on the fresh communicator.
    pub(crate) async fn on_revoked(&mut self, reason: LocalReason) -> WaitOutcome {
        self.state = crate::protocol::CommState::Revoked;
        let healthy = matches!(reason, LocalReason::Unaffected | LocalReason::Signalled(_));
        let seq = self.agree_seq;
        self.agree_seq += 1;
        let agreed = self.agree_rounds(KIND_AGREE, seq, u64::from(healthy)).await;
        // A death seen by anyone counts as corruption, even if the rank that
        // observed it contributed before noticing.
        if agreed.value == 0 || !agreed.dead.is_empty() {
            return self.close(WaitOutcome::CorruptedComm);
        }
        let shrunk = self.shrink().await.expect("ulfm mode checked above");
        let failed = match reason {
            LocalReason::Signalled(code) => Some(code),
            _ => None,
        };
        let ctx = ProtocolCtx {
            t: &shrunk.t,
            group: &shrunk.group,
            channel: shrunk.data,
            me: shrunk.me,
        };
        let outcome = match ctx.determine_failed(failed).await {
            Ok(report) => {
                let back: Vec<usize> = shrunk
                    .group
                    .iter()
                    .map(|r| self.group.iter().position(|x| x == r).expect("survivor"))
                    .collect();
                WaitOutcome::Propagated(report.remap(&back))
            }
            Err(crate::protocol::FailedRanksError::Interrupted) => WaitOutcome::CorruptedComm,
            Err(e) => panic!("{e}"),
        };
        self.close(outcome)
    }
}
