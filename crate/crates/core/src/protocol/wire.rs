//! Byte encodings and tag layout of protocol traffic.
//!
//! | traffic | channel | tag | payload |
//! |---|---|---|---|
//! | error notice | error | [`ERR_TAG`] | code, 8-byte big-endian unsigned |
//! | corruption vote | error or data | [`VOTE_TAG`] + round | 1 byte, 0 or 1 |
//! | barrier, scan, bcast, max | error or data | see constants | 8-byte big-endian elements |
//! | agree / shrink round | control | [`agree_tag`] | [`AgreeMsg`] |
//!
//! User point-to-point tags must be below [`PROTOCOL_TAG_BASE`].

use crate::transport::{RankId, Tag};

pub const ERR_TAG: Tag = 0;
pub const PROTOCOL_TAG_BASE: Tag = 1 << 48;
pub const BARRIER_TAG: Tag = PROTOCOL_TAG_BASE + 0x100;
pub const VOTE_TAG: Tag = PROTOCOL_TAG_BASE + 0x200;
pub const SCAN_TAG: Tag = PROTOCOL_TAG_BASE + 0x300;
pub const BCAST_TAG: Tag = PROTOCOL_TAG_BASE + 0x400;
pub const MAX_TAG: Tag = PROTOCOL_TAG_BASE + 0x500;
/// User collectives take `USER_COLLECTIVE_BASE + seq * 256 + step`.
pub const USER_COLLECTIVE_BASE: Tag = 1 << 52;
const AGREE_TAG_BASE: Tag = 1 << 56;

/// Control-plane message kinds. Kind 1 is the transport's revocation notice.
pub const KIND_AGREE: u8 = 2;
pub const KIND_SHRINK: u8 = 3;

pub fn user_collective_tag(seq: u64) -> Tag {
    USER_COLLECTIVE_BASE + (seq % (1 << 40)) * 256
}

pub fn agree_tag(kind: u8, seq: u64, round: u32) -> Tag {
    AGREE_TAG_BASE
        | (Tag::from(kind) << 48)
        | ((seq & 0xff_ffff) << 20)
        | Tag::from(round & 0xf_ffff)
}

pub fn encode_u64s(values: &[u64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_be_bytes()).collect()
}

pub fn decode_u64s(bytes: &[u8]) -> Option<Vec<u64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| u64::from_be_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    )
}

/// Element encoding of a collective's payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    /// 8-byte big-endian unsigned integers.
    U64s,
    /// A single byte holding 0 or 1.
    Vote,
}

impl Codec {
    pub fn encode(self, values: &[u64]) -> Vec<u8> {
        match self {
            Codec::U64s => encode_u64s(values),
            Codec::Vote => vec![u8::from(values.first().is_some_and(|&v| v != 0))],
        }
    }

    pub fn decode(self, bytes: &[u8]) -> Option<Vec<u64>> {
        match self {
            Codec::U64s => decode_u64s(bytes),
            Codec::Vote => match bytes {
                [b @ (0 | 1)] => Some(vec![u64::from(*b)]),
                _ => None,
            },
        }
    }

    pub fn capacity(self, elements: usize) -> usize {
        match self {
            Codec::U64s => elements * 8,
            Codec::Vote => 1,
        }
    }
}

/// One round message of the survivor agreement:
/// `[kind u8][seq u64][round u32][value u64][ndead u32][dead u32 ...]`,
/// all big-endian. Dead ranks are world ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgreeMsg {
    pub kind: u8,
    pub seq: u64,
    pub round: u32,
    pub value: u64,
    pub dead: Vec<RankId>,
}

impl AgreeMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(25 + 4 * self.dead.len());
        out.push(self.kind);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&self.value.to_be_bytes());
        out.extend_from_slice(&(self.dead.len() as u32).to_be_bytes());
        for r in &self.dead {
            out.extend_from_slice(&r.0.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<AgreeMsg> {
        let (&kind, rest) = bytes.split_first()?;
        let (seq, rest) = rest.split_first_chunk::<8>()?;
        let (round, rest) = rest.split_first_chunk::<4>()?;
        let (value, rest) = rest.split_first_chunk::<8>()?;
        let (ndead, mut rest) = rest.split_first_chunk::<4>()?;
        let ndead = u32::from_be_bytes(*ndead) as usize;
        let mut dead = Vec::with_capacity(ndead);
        for _ in 0..ndead {
            let (r, tail) = rest.split_first_chunk::<4>()?;
            dead.push(RankId(u32::from_be_bytes(*r)));
            rest = tail;
        }
        if !rest.is_empty() {
            return None;
        }
        Some(AgreeMsg {
            kind,
            seq: u64::from_be_bytes(*seq),
            round: u32::from_be_bytes(*round),
            value: u64::from_be_bytes(*value),
            dead,
        })
    }

    /// Upper bound on the encoded size for a group of `n` ranks.
    pub fn capacity(n: usize) -> usize {
        25 + 4 * n
    }
}
