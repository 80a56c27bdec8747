//! Episode resolution: barrier, corruption vote and failed-rank discovery.

use thiserror::Error;

use super::collectives::{
    allreduce_plan, barrier_plan, bcast_plan, scan_plan, CollectiveCtx, Interrupt, PlainWaiter,
    ReduceOp,
};
use super::wire::{Codec, BARRIER_TAG, BCAST_TAG, MAX_TAG, SCAN_TAG, VOTE_TAG};
use super::{ErrorCode, ErrorReport};
use crate::transport::{ChannelId, RankId, Transport};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FailedRanksError {
    #[error("no failed ranks given")]
    Empty,
    #[error("rank {0} listed twice")]
    DuplicateRank(u32),
    #[error("protocol violation: resolution entered with no failed rank")]
    NoFailedRanks,
    #[error("resolution interrupted by a transport failure")]
    Interrupted,
}

/// Group-wide protocol context: one rank's view of a channel that only the
/// protocol uses at the time.
pub(crate) struct ProtocolCtx<'a, T> {
    pub t: &'a T,
    pub group: &'a [RankId],
    pub channel: ChannelId,
    pub me: usize,
}

impl<T: Transport> ProtocolCtx<'_, T> {
    fn collective(&self, tag_base: u64, codec: Codec) -> CollectiveCtx<'_, T> {
        CollectiveCtx {
            t: self.t,
            group: self.group,
            channel: self.channel,
            tag_base,
            codec,
            user: false,
        }
    }

    pub async fn barrier(&self) -> Result<(), Interrupt> {
        let plan = barrier_plan(self.me, self.group.len());
        self.collective(BARRIER_TAG, Codec::U64s)
            .run(&plan, Vec::new(), ReduceOp::Sum, &mut PlainWaiter(self.t))
            .await
            .map(|_| ())
    }

    /// Bitwise AND of one-byte healthy flags; `true` means nobody is corrupt.
    pub async fn vote(&self, healthy: bool) -> Result<bool, Interrupt> {
        let plan = allreduce_plan(self.me, self.group.len());
        let out = self
            .collective(VOTE_TAG, Codec::Vote)
            .run(
                &plan,
                vec![u64::from(healthy)],
                ReduceOp::Band,
                &mut PlainWaiter(self.t),
            )
            .await?;
        Ok(out[0] == 1)
    }

    pub async fn determine_failed(
        &self,
        failed: Option<ErrorCode>,
    ) -> Result<ErrorReport, FailedRanksError> {
        let n = self.group.len();
        let mut w = PlainWaiter(self.t);
        let interrupted = |_| FailedRanksError::Interrupted;

        let indicator = vec![u64::from(failed.is_some())];
        let scan = self
            .collective(SCAN_TAG, Codec::U64s)
            .run(&scan_plan(self.me, n), indicator, ReduceOp::Sum, &mut w)
            .await
            .map_err(interrupted)?[0];

        let count = self
            .collective(BCAST_TAG, Codec::U64s)
            .run(
                &bcast_plan(self.me, n, n - 1),
                vec![scan],
                ReduceOp::Sum,
                &mut w,
            )
            .await
            .map_err(interrupted)?[0] as usize;
        if count == 0 {
            return Err(FailedRanksError::NoFailedRanks);
        }

        // ranks[0..k] followed by codes[0..k], zero-initialised.
        let mut slots = vec![0u64; 2 * count];
        if let Some(code) = failed {
            let index = scan as usize - 1;
            slots[index] = self.me as u64;
            slots[count + index] = code.get() as u64;
        }
        let merged = self
            .collective(MAX_TAG, Codec::U64s)
            .run(&allreduce_plan(self.me, n), slots, ReduceOp::Max, &mut w)
            .await
            .map_err(interrupted)?;

        let entries = (0..count)
            .map(|i| {
                let code = ErrorCode::new(merged[count + i] as i64)
                    .map_err(|_| FailedRanksError::NoFailedRanks)?;
                Ok((merged[i] as u32, code))
            })
            .collect::<Result<Vec<_>, FailedRanksError>>()?;
        ErrorReport::new(entries)
    }
}

/// Discovers every failed rank and its code by message passing over
/// `channel`, which no other traffic may use concurrently.
///
/// `me` indexes `group`; `failed` is this rank's own code if it failed.
/// Ranks in the report are group indices.
pub async fn determine_failed<T: Transport>(
    t: &T,
    group: &[RankId],
    channel: ChannelId,
    me: usize,
    failed: Option<ErrorCode>,
) -> Result<ErrorReport, FailedRanksError> {
    ProtocolCtx {
        t,
        group,
        channel,
        me,
    }
    .determine_failed(failed)
    .await
}
