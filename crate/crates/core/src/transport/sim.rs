//! Deterministic in-process transport with fault injection.
//!
//! Two kinds of scheduler events exist: delivering the head message of a
//! link `(src, dst, channel, tag)`, and stepping a rank, i.e. performing the
//! observation it is suspended on (test, cancel, wait-any, yield) and then
//! running its program up to the next observation. Posting is immediate and
//! happens inside steps. Every choice between enabled events is made by a
//! chooser: a seeded PRNG for single runs, or the explorer.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::future::Future;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::faults::{FaultAction, FaultEvent, FaultScript, MessagePattern};
use super::trace::{ChannelInfo, RankEnd, Termination, Trace, TraceEvent, TraceRecord};
use super::{
    ChannelId, ChannelRole, Completion, LocalBoxFuture, RankId, RequestId, RequestState, Runtime,
    SendMode, Source, Tag, Transport, TransportErrorKind,
};

/// Key under which a channel's hidden control plane is derived.
pub const CONTROL_CHANNEL_KEY: u64 = u64::MAX;
/// Tag of transport-generated revocation notices on a control plane.
pub const NOTICE_TAG: Tag = u64::MAX;
/// Control-plane message kind of a revocation notice.
pub const NOTICE_KIND: u8 = 1;

/// Stable message identity: the sender and its per-rank post counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MsgId {
    pub src: RankId,
    pub seq: u32,
}

impl fmt::Display for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}.{}", self.src, self.seq)
    }
}

/// A schedulable event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKey {
    Deliver(MsgId),
    Step(RankId),
}

/// Selects one deterministic interleaving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ScheduleSeed(pub u64);

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub ranks: usize,
    /// Report dead peers as request errors (needed for hard-fault handling).
    pub liveness: bool,
    pub faults: FaultScript,
    pub max_steps: u64,
    /// Pretend a host harness already initialised the runtime.
    pub preinitialized: bool,
}

impl SimConfig {
    pub fn new(ranks: usize) -> Self {
        SimConfig {
            ranks,
            liveness: false,
            faults: FaultScript::default(),
            max_steps: 1_000_000,
            preinitialized: false,
        }
    }

    pub fn with_liveness(mut self, on: bool) -> Self {
        self.liveness = on;
        self
    }

    pub fn with_faults(mut self, faults: FaultScript) -> Self {
        self.faults = faults;
        self
    }

    pub fn with_max_steps(mut self, steps: u64) -> Self {
        self.max_steps = steps;
        self
    }

    pub fn preinitialized(mut self, yes: bool) -> Self {
        self.preinitialized = yes;
        self
    }
}

type LinkKey = (RankId, RankId, ChannelId, Tag);

/// Sequential entity an event belongs to: a rank's program, or a link whose
/// messages are delivered in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) enum Actor {
    Rank(RankId),
    Link(LinkKey),
}

/// Shared state an event reads or writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum Obj {
    /// Lifecycle state of a request.
    Req(RequestId),
    /// Arrival order of messages at `(dst, channel, tag)`. Only deliveries
    /// whose message is taken by a wildcard receive write it.
    Arrive(RankId, ChannelId, Tag),
    /// Whether a rank has revoked a channel.
    Revoked(RankId, ChannelId),
}

/// What one executed event touched, for race detection.
#[derive(Debug, Clone)]
pub(crate) struct Footprint {
    pub key: EventKey,
    pub actor: Actor,
    /// Index of the event that posted the delivered message.
    pub creator: Option<usize>,
    /// `(object, is_write)` pairs.
    pub access: Vec<(Obj, bool)>,
    /// A wait-any that could only have returned because this request
    /// completed; the completing event cannot be reordered after it.
    pub enabled_by: Option<RequestId>,
}

#[derive(Debug, Clone)]
struct Envelope {
    id: MsgId,
    src: RankId,
    dst: RankId,
    channel: ChannelId,
    tag: Tag,
    payload: Vec<u8>,
    /// `(revoked channel, origin)` for revocation notices.
    notice: Option<(ChannelId, RankId)>,
    send_req: Option<RequestId>,
    sync: bool,
    ready_at: u64,
}

#[derive(Debug, Clone)]
enum ReqKind {
    Send {
        dest: RankId,
        channel: ChannelId,
        msg: Option<MsgId>,
    },
    Recv {
        source: Source,
        channel: ChannelId,
        tag: Tag,
        capacity: usize,
    },
}

#[derive(Debug, Clone)]
struct Request {
    owner: RankId,
    /// Position among the owner's requests.
    seq: u32,
    kind: ReqKind,
    state: RequestState,
    completion: Option<Completion>,
    collective: bool,
}

impl Request {
    fn channel(&self) -> ChannelId {
        match self.kind {
            ReqKind::Send { channel, .. } | ReqKind::Recv { channel, .. } => channel,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum PendingOp {
    Test(RequestId),
    Cancel(RequestId),
    WaitAny(Vec<RequestId>),
    Yield,
    TestRevoked(ChannelId),
}

impl PendingOp {
    fn observed(&self) -> &[RequestId] {
        match self {
            PendingOp::Test(q) | PendingOp::Cancel(q) => std::slice::from_ref(q),
            PendingOp::WaitAny(qs) => qs,
            PendingOp::Yield | PendingOp::TestRevoked(_) => &[],
        }
    }
}

#[derive(Debug, Clone, Hash)]
pub(crate) enum OpResult {
    State(RequestState),
    Cancelled(bool),
    Index(usize),
    Unit,
    Flag(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Running,
    Done,
    Killed,
}

#[derive(Debug)]
struct RankSlot {
    status: Status,
    pending: Option<PendingOp>,
    result: Option<OpResult>,
    send_seq: u32,
    req_seq: u32,
    initialized: bool,
    instance_live: bool,
}

pub(crate) struct Core {
    n: usize,
    liveness: bool,
    clock: u64,
    max_steps: u64,
    requests: Vec<Request>,
    links: BTreeMap<LinkKey, VecDeque<Envelope>>,
    msg_link: BTreeMap<MsgId, LinkKey>,
    unexpected: Vec<Vec<Envelope>>,
    posted: Vec<Vec<RequestId>>,
    pending_sync: Vec<RequestId>,
    ranks: Vec<RankSlot>,
    channels: Vec<ChannelInfo>,
    registry: BTreeMap<(ChannelId, u64), ChannelId>,
    revoked: BTreeSet<(RankId, ChannelId)>,
    faults: Vec<FaultEvent>,
    fault_used: Vec<bool>,
    dead: Vec<bool>,
    any_dead: bool,
    trace: Vec<TraceRecord>,
    leaks: u64,
    reduction_ok: bool,
    /// Per-rank digest of observation results.
    history: Vec<u64>,
    /// Order-insensitive digest of which message each receive matched and
    /// which channels each rank revoked.
    effects: u64,
    allocations: u64,
    footprints: Option<Vec<Footprint>>,
    msg_creator: HashMap<MsgId, usize>,
    msg_delivery: HashMap<MsgId, usize>,
}

fn digest(value: impl Hash) -> u64 {
    let mut h = DefaultHasher::new();
    value.hash(&mut h);
    h.finish()
}

impl Core {
    fn new(cfg: &SimConfig) -> Self {
        let n = cfg.ranks;
        assert!(n > 0, "a simulation needs at least one rank");
        let ranks = (0..n)
            .map(|_| RankSlot {
                status: Status::Running,
                pending: None,
                result: None,
                send_seq: 0,
                req_seq: 0,
                initialized: cfg.preinitialized,
                instance_live: false,
            })
            .collect();
        let mut core = Core {
            n,
            liveness: cfg.liveness,
            clock: 0,
            max_steps: cfg.max_steps,
            requests: Vec::new(),
            links: BTreeMap::new(),
            msg_link: BTreeMap::new(),
            unexpected: vec![Vec::new(); n],
            posted: vec![Vec::new(); n],
            pending_sync: Vec::new(),
            ranks,
            channels: Vec::new(),
            registry: BTreeMap::new(),
            revoked: BTreeSet::new(),
            faults: cfg.faults.events().to_vec(),
            fault_used: vec![false; cfg.faults.events().len()],
            dead: vec![false; n],
            any_dead: false,
            trace: Vec::new(),
            leaks: 0,
            reduction_ok: cfg.faults.is_empty(),
            history: vec![0; n],
            allocations: 0,
            effects: 0,
            footprints: None,
            msg_creator: HashMap::new(),
            msg_delivery: HashMap::new(),
        };
        let all: Vec<RankId> = (0..n).map(RankId::from).collect();
        core.alloc_channel(None, all, ChannelRole::World);
        core
    }

    fn record(&mut self, event: TraceEvent) {
        self.trace.push(TraceRecord {
            step: self.clock,
            event,
        });
    }

    fn alloc_channel(
        &mut self,
        parent: Option<ChannelId>,
        group: Vec<RankId>,
        role: ChannelRole,
    ) -> ChannelId {
        let id = ChannelId(self.channels.len() as u32);
        self.record(TraceEvent::Alloc {
            channel: id,
            role,
            members: group.len(),
        });
        self.channels.push(ChannelInfo {
            id,
            role,
            parent,
            group,
        });
        id
    }

    fn derive_channel(
        &mut self,
        parent: ChannelId,
        key: u64,
        group: &[RankId],
        role: ChannelRole,
    ) -> ChannelId {
        if let Some(&c) = self.registry.get(&(parent, key)) {
            let info = &self.channels[c.0 as usize];
            assert!(
                info.group == group && info.role == role,
                "mismatched channel derivation for {parent}/{key}: {:?} vs {:?}",
                info.group,
                group
            );
            return c;
        }
        let c = self.alloc_channel(Some(parent), group.to_vec(), role);
        self.registry.insert((parent, key), c);
        self.allocations = digest((self.allocations, parent, key));
        c
    }

    fn control_of(&mut self, channel: ChannelId) -> ChannelId {
        let group = self.channels[channel.0 as usize].group.clone();
        self.derive_channel(channel, CONTROL_CHANNEL_KEY, &group, ChannelRole::Control)
    }

    fn group(&self, channel: ChannelId) -> &[RankId] {
        &self.channels[channel.0 as usize].group
    }

    fn is_revoked(&self, rank: RankId, channel: ChannelId) -> bool {
        self.revoked.contains(&(rank, channel))
    }

    fn is_dead(&self, rank: RankId) -> bool {
        self.dead[rank.index()]
    }

    fn req(&self, q: RequestId) -> &Request {
        &self.requests[q.0 as usize]
    }

    fn touch(&mut self, obj: Obj, write: bool) {
        if let Some(fp) = self.footprints.as_mut().and_then(|f| f.last_mut()) {
            fp.access.push((obj, write));
        }
    }

    fn begin_event(&mut self, key: EventKey) {
        let Some(fps) = self.footprints.as_mut() else {
            return;
        };
        let (actor, creator) = match key {
            EventKey::Step(r) => (Actor::Rank(r), None),
            EventKey::Deliver(m) => (
                Actor::Link(self.msg_link[&m]),
                self.msg_creator.get(&m).copied(),
            ),
        };
        fps.push(Footprint {
            key,
            actor,
            creator,
            access: Vec::new(),
            enabled_by: None,
        });
    }

    fn set_state(&mut self, q: RequestId, state: RequestState) {
        let r = &mut self.requests[q.0 as usize];
        if r.state.is_terminal() {
            return;
        }
        r.state = state;
        self.touch(Obj::Req(q), true);
        self.record(TraceEvent::State { req: q, state });
    }

    fn new_request(&mut self, owner: RankId, kind: ReqKind) -> RequestId {
        let id = RequestId(self.requests.len() as u32);
        let slot = &mut self.ranks[owner.index()];
        let seq = slot.req_seq;
        slot.req_seq += 1;
        self.requests.push(Request {
            owner,
            seq,
            kind,
            state: RequestState::Pending,
            completion: None,
            collective: false,
        });
        id
    }

    fn next_msg_id(&mut self, src: RankId) -> MsgId {
        let slot = &mut self.ranks[src.index()];
        let id = MsgId {
            src,
            seq: slot.send_seq,
        };
        slot.send_seq += 1;
        id
    }

    /// Consumes the first unused drop/delay rule matching the message.
    fn take_rule(&mut self, src: RankId, dst: RankId, tag: Tag) -> Option<FaultAction> {
        let clock = self.clock;
        let hit = self.faults.iter().enumerate().position(|(i, ev)| {
            let pat = match ev.action {
                FaultAction::Drop(p) | FaultAction::Delay(p, _) => p,
                FaultAction::Kill => return false,
            };
            !self.fault_used[i] && ev.time <= clock && pat == MessagePattern { src, dst, tag }
        })?;
        self.fault_used[hit] = true;
        Some(self.faults[hit].action)
    }

    fn push_envelope(&mut self, env: Envelope) {
        if let Some(i) = self
            .footprints
            .as_ref()
            .and_then(|f| f.len().checked_sub(1))
        {
            self.msg_creator.insert(env.id, i);
        }
        let key = (env.src, env.dst, env.channel, env.tag);
        self.msg_link.insert(env.id, key);
        self.links.entry(key).or_default().push_back(env);
    }

    fn post_send(
        &mut self,
        rank: RankId,
        dest: RankId,
        channel: ChannelId,
        tag: Tag,
        payload: Vec<u8>,
        mode: SendMode,
    ) -> RequestId {
        assert!(dest.index() < self.n, "send to rank {dest} out of range");
        let sync = mode == SendMode::Synchronous;
        let q = self.new_request(
            rank,
            ReqKind::Send {
                dest,
                channel,
                msg: None,
            },
        );
        self.record(TraceEvent::PostSend {
            rank,
            req: q,
            dest,
            channel,
            tag,
            bytes: payload.len(),
            sync,
        });
        if self.liveness && self.is_dead(dest) {
            self.set_state(q, RequestState::Errored(TransportErrorKind::ProcFailed));
            return q;
        }
        self.touch(Obj::Revoked(rank, channel), false);
        if self.is_revoked(rank, channel) {
            self.set_state(q, RequestState::Errored(TransportErrorKind::Revoked));
            return q;
        }
        let id = self.next_msg_id(rank);
        if let ReqKind::Send { msg, .. } = &mut self.requests[q.0 as usize].kind {
            *msg = Some(id);
        }
        let mut ready_at = self.clock;
        match self.take_rule(rank, dest, tag) {
            Some(FaultAction::Drop(_)) => {
                self.record(TraceEvent::Dropped {
                    msg: id,
                    dst: dest,
                    tag,
                });
                if !sync {
                    self.set_state(q, RequestState::Complete);
                }
                return q;
            }
            Some(FaultAction::Delay(_, by)) => {
                ready_at += by;
                self.record(TraceEvent::Delayed {
                    msg: id,
                    until: ready_at,
                });
            }
            _ => {}
        }
        self.push_envelope(Envelope {
            id,
            src: rank,
            dst: dest,
            channel,
            tag,
            payload,
            notice: None,
            send_req: Some(q),
            sync,
            ready_at,
        });
        if sync {
            self.pending_sync.push(q);
        } else {
            self.set_state(q, RequestState::Complete);
        }
        q
    }

    fn recv_matches(&self, q: RequestId, env: &Envelope) -> bool {
        match self.req(q).kind {
            ReqKind::Recv {
                source,
                channel,
                tag,
                ..
            } => channel == env.channel && tag == env.tag && source.matches(env.src),
            ReqKind::Send { .. } => false,
        }
    }

    fn complete_recv(&mut self, q: RequestId, env: Envelope) {
        let r = &self.requests[q.0 as usize];
        self.effects ^= digest(("match", r.owner, r.seq, env.id));
        // A delivery depends on revocation only if its message is consumed:
        // one left in the unexpected queue is discarded by a later revocation
        // exactly as if it had arrived after it.
        if let (Some(fps), Some(&i)) = (self.footprints.as_mut(), self.msg_delivery.get(&env.id)) {
            fps[i]
                .access
                .push((Obj::Revoked(env.dst, env.channel), false));
            if let ReqKind::Recv {
                source: Source::Any,
                ..
            } = r.kind
            {
                fps[i]
                    .access
                    .push((Obj::Arrive(env.dst, env.channel, env.tag), true));
            }
        }
        let capacity = match self.req(q).kind {
            ReqKind::Recv { capacity, .. } => capacity,
            ReqKind::Send { .. } => unreachable!("matched a send request"),
        };
        if env.payload.len() > capacity {
            self.set_state(q, RequestState::Errored(TransportErrorKind::Truncated));
        } else {
            self.requests[q.0 as usize].completion = Some(Completion {
                source: env.src,
                tag: env.tag,
                payload: env.payload,
            });
            self.set_state(q, RequestState::Complete);
        }
        if env.sync {
            if let Some(s) = env.send_req {
                self.set_state(s, RequestState::Complete);
            }
        }
    }

    fn post_recv(
        &mut self,
        rank: RankId,
        source: Source,
        channel: ChannelId,
        tag: Tag,
        capacity: usize,
    ) -> RequestId {
        if let Source::Rank(s) = source {
            assert!(s.index() < self.n, "receive from rank {s} out of range");
        }
        let q = self.new_request(
            rank,
            ReqKind::Recv {
                source,
                channel,
                tag,
                capacity,
            },
        );
        self.record(TraceEvent::PostRecv {
            rank,
            req: q,
            source,
            channel,
            tag,
        });
        self.touch(Obj::Revoked(rank, channel), false);
        if self.is_revoked(rank, channel) {
            self.set_state(q, RequestState::Errored(TransportErrorKind::Revoked));
            return q;
        }
        if source == Source::Any {
            self.touch(Obj::Arrive(rank, channel, tag), false);
        }
        let hit = self.unexpected[rank.index()]
            .iter()
            .position(|e| e.channel == channel && e.tag == tag && source.matches(e.src));
        match hit {
            Some(pos) => {
                let env = self.unexpected[rank.index()].remove(pos);
                self.record(TraceEvent::Match {
                    req: q,
                    msg: env.id,
                });
                self.complete_recv(q, env);
            }
            None => self.posted[rank.index()].push(q),
        }
        q
    }

    fn deliver(&mut self, m: MsgId) {
        let key = self
            .msg_link
            .remove(&m)
            .expect("delivering an unknown message");
        let queue = self.links.get_mut(&key).expect("link vanished");
        let env = queue.pop_front().expect("empty link");
        debug_assert_eq!(env.id, m, "only link heads are deliverable");
        if queue.is_empty() {
            self.links.remove(&key);
        }
        let dst = env.dst;
        if let (true, Some(s)) = (env.sync, env.send_req) {
            self.touch(Obj::Req(s), false);
        }
        match env.notice {
            Some((channel, _)) => self.touch(Obj::Revoked(dst, channel), false),
            None => {
                self.touch(Obj::Arrive(dst, env.channel, env.tag), false);
                if let Some(fps) = self.footprints.as_ref() {
                    self.msg_delivery.insert(env.id, fps.len() - 1);
                }
            }
        }
        if self.is_dead(dst) {
            self.record(TraceEvent::Discard {
                msg: env.id,
                dst,
                reason: "dead",
            });
            return;
        }
        if let Some((channel, origin)) = env.notice {
            self.record(TraceEvent::Deliver {
                msg: env.id,
                dst,
                channel: env.channel,
                tag: env.tag,
                matched: None,
            });
            self.revoke_local(dst, channel, origin);
            return;
        }
        if self.is_revoked(dst, env.channel) {
            self.touch(Obj::Revoked(dst, env.channel), false);
            self.record(TraceEvent::Discard {
                msg: env.id,
                dst,
                reason: "revoked",
            });
            return;
        }
        let hit = self.posted[dst.index()]
            .iter()
            .position(|&q| self.recv_matches(q, &env));
        match hit {
            Some(pos) => {
                let q = self.posted[dst.index()].remove(pos);
                self.record(TraceEvent::Deliver {
                    msg: env.id,
                    dst,
                    channel: env.channel,
                    tag: env.tag,
                    matched: Some(q),
                });
                self.complete_recv(q, env);
            }
            None => {
                self.record(TraceEvent::Deliver {
                    msg: env.id,
                    dst,
                    channel: env.channel,
                    tag: env.tag,
                    matched: None,
                });
                self.unexpected[dst.index()].push(env);
            }
        }
    }

    /// Fingerprint of what the ranks observed: rank programs are
    /// deterministic given their observation results, matches and
    /// revocations.
    fn state_key(&self) -> u128 {
        let part = |salt: u8| digest((&self.history, self.effects, self.allocations, salt));
        (u128::from(part(1)) << 64) | u128::from(part(2))
    }

    fn cancel(&mut self, rank: RankId, q: RequestId) -> bool {
        let req = self.req(q);
        assert_eq!(req.owner, rank, "rank {rank} cancels foreign request {q}");
        assert!(
            !req.collective,
            "cancelling {q}: it is erroneous to cancel a request of a nonblocking collective operation"
        );
        let ok = if req.state.is_terminal() {
            false
        } else {
            match req.kind.clone() {
                ReqKind::Recv { .. } => {
                    self.posted[rank.index()].retain(|&p| p != q);
                    true
                }
                ReqKind::Send { dest, msg, .. } => {
                    if let Some(m) = msg {
                        if let Some(key) = self.msg_link.remove(&m) {
                            let queue = self.links.get_mut(&key).expect("link vanished");
                            queue.retain(|e| e.id != m);
                            if queue.is_empty() {
                                self.links.remove(&key);
                            }
                        } else {
                            self.unexpected[dest.index()].retain(|e| e.id != m);
                        }
                    }
                    self.pending_sync.retain(|&p| p != q);
                    true
                }
            }
        };
        self.record(TraceEvent::Cancel { rank, req: q, ok });
        if ok {
            self.set_state(q, RequestState::Cancelled);
        }
        ok
    }

    /// Revokes `channel` at `rank`. The origin of a revocation sends a notice
    /// to every peer; notices already sent are delivered even if the origin
    /// dies, so receivers do not forward them.
    fn revoke_local(&mut self, rank: RankId, channel: ChannelId, origin: RankId) {
        if !self.revoked.insert((rank, channel)) {
            return;
        }
        self.effects ^= digest(("revoke", rank, channel));
        self.touch(Obj::Revoked(rank, channel), true);
        self.record(TraceEvent::Revoke {
            rank,
            channel,
            origin,
        });
        let (hit, keep): (Vec<RequestId>, Vec<RequestId>) =
            std::mem::take(&mut self.posted[rank.index()])
                .into_iter()
                .partition(|&q| self.req(q).channel() == channel);
        self.posted[rank.index()] = keep;
        for q in hit {
            self.set_state(q, RequestState::Errored(TransportErrorKind::Revoked));
        }
        let sends: Vec<RequestId> = self
            .pending_sync
            .iter()
            .copied()
            .filter(|&q| {
                let r = self.req(q);
                r.owner == rank && r.channel() == channel && !r.state.is_terminal()
            })
            .collect();
        for q in sends {
            self.set_state(q, RequestState::Errored(TransportErrorKind::Revoked));
        }
        let (gone, stay): (Vec<Envelope>, Vec<Envelope>) =
            std::mem::take(&mut self.unexpected[rank.index()])
                .into_iter()
                .partition(|e| e.channel == channel);
        self.unexpected[rank.index()] = stay;
        for e in gone {
            self.record(TraceEvent::Discard {
                msg: e.id,
                dst: rank,
                reason: "revoked",
            });
        }
        if origin != rank {
            return;
        }
        let control = self.control_of(channel);
        let peers: Vec<RankId> = self
            .group(channel)
            .iter()
            .copied()
            .filter(|&p| p != rank)
            .collect();
        for peer in peers {
            if self.liveness && self.is_dead(peer) {
                continue;
            }
            let id = self.next_msg_id(rank);
            let mut payload = vec![NOTICE_KIND];
            payload.extend_from_slice(&origin.0.to_be_bytes());
            payload.extend_from_slice(&channel.0.to_be_bytes());
            self.record(TraceEvent::Notice {
                msg: id,
                dst: peer,
                channel: control,
                origin,
            });
            self.push_envelope(Envelope {
                id,
                src: rank,
                dst: peer,
                channel: control,
                tag: NOTICE_TAG,
                payload,
                notice: Some((channel, origin)),
                send_req: None,
                sync: false,
                ready_at: self.clock,
            });
        }
    }

    fn exec_op(&mut self, rank: RankId, op: PendingOp) -> OpResult {
        match op {
            PendingOp::Test(q) | PendingOp::Cancel(q) => self.touch(Obj::Req(q), false),
            PendingOp::TestRevoked(c) => self.touch(Obj::Revoked(rank, c), false),
            _ => {}
        }
        match op {
            PendingOp::Test(q) => {
                let state = self.req(q).state;
                self.record(TraceEvent::Test {
                    rank,
                    req: q,
                    state,
                });
                OpResult::State(state)
            }
            PendingOp::Cancel(q) => OpResult::Cancelled(self.cancel(rank, q)),
            PendingOp::WaitAny(qs) => {
                let index = qs
                    .iter()
                    .position(|&q| self.req(q).state.is_terminal())
                    .expect("wait-any stepped while nothing was terminal");
                for &q in &qs[..=index] {
                    self.touch(Obj::Req(q), false);
                }
                let terminal = qs
                    .iter()
                    .filter(|&&q| self.req(q).state.is_terminal())
                    .count();
                if terminal == 1 {
                    if let Some(fp) = self.footprints.as_mut().and_then(|f| f.last_mut()) {
                        fp.enabled_by = Some(qs[index]);
                    }
                }
                self.record(TraceEvent::WaitAny { rank, index });
                OpResult::Index(index)
            }
            PendingOp::Yield => {
                self.record(TraceEvent::Yield { rank });
                OpResult::Unit
            }
            PendingOp::TestRevoked(c) => OpResult::Flag(self.is_revoked(rank, c)),
        }
    }

    fn op_enabled(&self, op: &PendingOp) -> bool {
        match op {
            PendingOp::WaitAny(qs) => qs.iter().any(|&q| self.req(q).state.is_terminal()),
            _ => true,
        }
    }

    fn enabled(&self) -> Vec<EventKey> {
        let mut out = Vec::new();
        for queue in self.links.values() {
            if let Some(head) = queue.front() {
                if head.ready_at <= self.clock {
                    out.push(EventKey::Deliver(head.id));
                }
            }
        }
        for (i, slot) in self.ranks.iter().enumerate() {
            if slot.status == Status::Running {
                if let Some(op) = &slot.pending {
                    if self.op_enabled(op) {
                        out.push(EventKey::Step(RankId::from(i)));
                    }
                }
            }
        }
        out
    }

    /// Earliest future time at which something new can happen.
    fn next_timed_event(&self) -> Option<u64> {
        let kills = self
            .faults
            .iter()
            .zip(&self.fault_used)
            .filter(|(e, used)| !**used && matches!(e.action, FaultAction::Kill))
            .map(|(e, _)| e.time);
        let delayed = self
            .links
            .values()
            .filter_map(|q| q.front())
            .map(|e| e.ready_at);
        kills.chain(delayed).filter(|&t| t > self.clock).min()
    }

    /// Applies due kills and returns the killed ranks.
    fn fire_kills(&mut self) -> Vec<RankId> {
        let mut killed = Vec::new();
        for i in 0..self.faults.len() {
            let ev = self.faults[i];
            if self.fault_used[i] || ev.time > self.clock || ev.action != FaultAction::Kill {
                continue;
            }
            self.fault_used[i] = true;
            if self.is_dead(ev.rank) || ev.rank.index() >= self.n {
                continue;
            }
            self.dead[ev.rank.index()] = true;
            self.any_dead = true;
            let slot = &mut self.ranks[ev.rank.index()];
            slot.status = Status::Killed;
            slot.pending = None;
            slot.result = None;
            self.record(TraceEvent::Kill { rank: ev.rank });
            killed.push(ev.rank);
        }
        killed
    }

    /// Liveness detection: fail requests that can no longer complete because
    /// of a dead peer.
    fn detect_failures(&mut self) {
        if !self.liveness || !self.any_dead {
            return;
        }
        for d in 0..self.n {
            if self.dead[d] {
                continue;
            }
            let posted = std::mem::take(&mut self.posted[d]);
            let mut keep = Vec::with_capacity(posted.len());
            let mut failed = Vec::new();
            for q in posted {
                let verdict = match self.req(q).kind {
                    ReqKind::Recv {
                        source: Source::Rank(s),
                        channel,
                        tag,
                        ..
                    } if self.is_dead(s) => {
                        let in_flight = self
                            .links
                            .get(&(s, RankId::from(d), channel, tag))
                            .is_some_and(|l| !l.is_empty());
                        (!in_flight).then_some(TransportErrorKind::ProcFailed)
                    }
                    ReqKind::Recv {
                        source: Source::Any,
                        channel,
                        ..
                    } if self.group(channel).iter().any(|&r| self.is_dead(r)) => {
                        Some(TransportErrorKind::ProcFailedPending)
                    }
                    _ => None,
                };
                match verdict {
                    Some(kind) => failed.push((q, kind)),
                    None => keep.push(q),
                }
            }
            self.posted[d] = keep;
            for (q, kind) in failed {
                self.set_state(q, RequestState::Errored(kind));
            }
        }
        let sends: Vec<RequestId> = self
            .pending_sync
            .iter()
            .copied()
            .filter(|&q| {
                let r = self.req(q);
                !r.state.is_terminal()
                    && !self.is_dead(r.owner)
                    && matches!(r.kind, ReqKind::Send { dest, .. } if self.is_dead(dest))
            })
            .collect();
        for q in sends {
            self.set_state(q, RequestState::Errored(TransportErrorKind::ProcFailed));
        }
        self.pending_sync
            .retain(|&q| !self.requests[q.0 as usize].state.is_terminal());
    }

    fn envelope(&self, m: MsgId) -> &Envelope {
        let key = self.msg_link[&m];
        self.links[&key]
            .iter()
            .find(|e| e.id == m)
            .expect("message not in its link")
    }

    fn observed(&self, rank: RankId) -> &[RequestId] {
        self.ranks[rank.index()]
            .pending
            .as_ref()
            .map_or(&[], |op| op.observed())
    }

    fn notice_effective(&self, e: &Envelope) -> bool {
        match e.notice {
            Some((channel, _)) => !self.is_dead(e.dst) && !self.is_revoked(e.dst, channel),
            None => false,
        }
    }

    /// Whether stepping `y` may complete a synchronous send that `x` is
    /// currently observing (by posting a receive for it).
    fn step_touches_sync_of(&self, x: RankId, y: RankId) -> bool {
        let watched = self.observed(x);
        self.unexpected[y.index()]
            .iter()
            .any(|e| e.src == x && e.sync && e.send_req.is_some_and(|s| watched.contains(&s)))
    }

    fn delivery_affects(&self, m: MsgId, r: RankId) -> bool {
        let e = self.envelope(m);
        if e.dst == r {
            if e.notice.is_some() {
                return self.notice_effective(e);
            }
            if self.is_dead(r) || self.is_revoked(r, e.channel) {
                return false;
            }
            return self.posted[r.index()]
                .iter()
                .find(|&&q| self.recv_matches(q, e))
                .is_some_and(|&q| self.completion_changes_result(r, q));
        }
        if e.src == r && e.sync {
            return e
                .send_req
                .is_some_and(|s| self.completion_changes_result(r, s));
        }
        false
    }

    /// Whether completing `q` before `r`'s pending observation would change
    /// what it returns. A wait-any already decided by a lower index is not
    /// affected by later completions.
    fn completion_changes_result(&self, r: RankId, q: RequestId) -> bool {
        match self.ranks[r.index()].pending.as_ref() {
            Some(PendingOp::WaitAny(qs)) => match qs.iter().position(|&x| x == q) {
                Some(j) => qs[..j].iter().all(|&x| !self.req(x).state.is_terminal()),
                None => false,
            },
            Some(op) => op.observed().contains(&q),
            None => false,
        }
    }

    /// Conservative independence of two enabled events in the current state.
    pub(crate) fn independent(&self, a: EventKey, b: EventKey) -> bool {
        if !self.reduction_ok || a == b {
            return false;
        }
        match (a, b) {
            (EventKey::Step(x), EventKey::Step(y)) => {
                !self.step_touches_sync_of(x, y) && !self.step_touches_sync_of(y, x)
            }
            (EventKey::Deliver(m1), EventKey::Deliver(m2)) => {
                let (e1, e2) = (self.envelope(m1), self.envelope(m2));
                if e1.dst != e2.dst {
                    return true;
                }
                if self.notice_effective(e1) || self.notice_effective(e2) {
                    return false;
                }
                !(e1.channel == e2.channel && e1.tag == e2.tag)
            }
            (EventKey::Deliver(m), EventKey::Step(r))
            | (EventKey::Step(r), EventKey::Deliver(m)) => !self.delivery_affects(m, r),
        }
    }
}

pub(crate) enum Choice {
    Take(usize),
    Stop(Termination),
}

pub(crate) struct ChoiceContext<'a> {
    core: &'a Core,
    pub enabled: &'a [EventKey],
}

impl ChoiceContext<'_> {
    pub fn independent(&self, a: EventKey, b: EventKey) -> bool {
        self.core.independent(a, b)
    }

    /// Whether independence and footprints are tracked for this run.
    pub fn reducible(&self) -> bool {
        self.core.reduction_ok
    }
}

pub(crate) trait Chooser {
    fn choose(&mut self, ctx: &ChoiceContext<'_>) -> Choice;

    fn wants_footprints(&self) -> bool {
        false
    }
}

struct SeededChooser(ChaCha8Rng);

impl Chooser for SeededChooser {
    fn choose(&mut self, ctx: &ChoiceContext<'_>) -> Choice {
        Choice::Take(self.0.gen_range(0..ctx.enabled.len()))
    }
}

/// One rank's handle onto a [`Simulation`].
#[derive(Clone)]
pub struct SimEndpoint {
    core: Rc<RefCell<Core>>,
    rank: RankId,
}

impl fmt::Debug for SimEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimEndpoint")
            .field("rank", &self.rank)
            .finish()
    }
}

struct Observe {
    core: Rc<RefCell<Core>>,
    rank: RankId,
    op: Option<PendingOp>,
}

impl Future for Observe {
    type Output = OpResult;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<OpResult> {
        let this = self.get_mut();
        let mut core = this.core.borrow_mut();
        let slot = &mut core.ranks[this.rank.index()];
        if let Some(op) = this.op.take() {
            assert!(slot.pending.is_none(), "rank already suspended");
            slot.pending = Some(op);
            return Poll::Pending;
        }
        match slot.result.take() {
            Some(r) => Poll::Ready(r),
            None => Poll::Pending,
        }
    }
}

impl SimEndpoint {
    fn observe(&self, op: PendingOp) -> Observe {
        Observe {
            core: Rc::clone(&self.core),
            rank: self.rank,
            op: Some(op),
        }
    }

    fn check_owner(&self, q: RequestId) {
        let owner = self.core.borrow().req(q).owner;
        assert_eq!(
            owner, self.rank,
            "rank {} used foreign request {q}",
            self.rank
        );
    }

    /// Current simulated time; for instrumentation only.
    pub fn now(&self) -> u64 {
        self.core.borrow().clock
    }
}

impl Transport for SimEndpoint {
    fn rank(&self) -> RankId {
        self.rank
    }

    fn size(&self) -> usize {
        self.core.borrow().n
    }

    fn liveness_detection(&self) -> bool {
        self.core.borrow().liveness
    }

    fn world_channel(&self) -> ChannelId {
        ChannelId(0)
    }

    fn derive_channel(
        &self,
        parent: ChannelId,
        key: u64,
        group: &[RankId],
        role: ChannelRole,
    ) -> ChannelId {
        self.core
            .borrow_mut()
            .derive_channel(parent, key, group, role)
    }

    fn post_send(
        &self,
        dest: RankId,
        channel: ChannelId,
        tag: Tag,
        payload: Vec<u8>,
        mode: SendMode,
    ) -> RequestId {
        self.core
            .borrow_mut()
            .post_send(self.rank, dest, channel, tag, payload, mode)
    }

    fn post_recv(
        &self,
        source: Source,
        channel: ChannelId,
        tag: Tag,
        capacity: usize,
    ) -> RequestId {
        self.core
            .borrow_mut()
            .post_recv(self.rank, source, channel, tag, capacity)
    }

    fn mark_collective(&self, req: RequestId) {
        self.check_owner(req);
        self.core.borrow_mut().requests[req.0 as usize].collective = true;
    }

    async fn cancel(&self, req: RequestId) -> bool {
        self.check_owner(req);
        match self.observe(PendingOp::Cancel(req)).await {
            OpResult::Cancelled(ok) => ok,
            other => unreachable!("cancel resumed with {other:?}"),
        }
    }

    async fn test(&self, req: RequestId) -> RequestState {
        self.check_owner(req);
        match self.observe(PendingOp::Test(req)).await {
            OpResult::State(s) => s,
            other => unreachable!("test resumed with {other:?}"),
        }
    }

    async fn wait_any(&self, reqs: &[RequestId]) -> usize {
        assert!(!reqs.is_empty(), "wait_any needs at least one request");
        for &q in reqs {
            self.check_owner(q);
        }
        match self.observe(PendingOp::WaitAny(reqs.to_vec())).await {
            OpResult::Index(i) => i,
            other => unreachable!("wait_any resumed with {other:?}"),
        }
    }

    async fn yield_now(&self) {
        match self.observe(PendingOp::Yield).await {
            OpResult::Unit => {}
            other => unreachable!("yield resumed with {other:?}"),
        }
    }

    fn state(&self, req: RequestId) -> RequestState {
        self.core.borrow().req(req).state
    }

    fn take_completion(&self, req: RequestId) -> Option<Completion> {
        self.check_owner(req);
        self.core.borrow_mut().requests[req.0 as usize]
            .completion
            .take()
    }

    fn record_leak(&self, reqs: &[RequestId]) {
        let mut core = self.core.borrow_mut();
        let count = reqs
            .iter()
            .filter(|&&q| !core.req(q).state.is_terminal())
            .count();
        if count > 0 {
            core.leaks += count as u64;
            core.record(TraceEvent::Leak {
                rank: self.rank,
                count,
            });
        }
    }

    fn revoke(&self, channel: ChannelId) {
        self.core
            .borrow_mut()
            .revoke_local(self.rank, channel, self.rank);
    }

    async fn is_revoked(&self, channel: ChannelId) -> bool {
        match self.observe(PendingOp::TestRevoked(channel)).await {
            OpResult::Flag(b) => b,
            other => unreachable!("revocation test resumed with {other:?}"),
        }
    }
}

impl Runtime for SimEndpoint {
    fn is_initialized(&self) -> bool {
        self.core.borrow().ranks[self.rank.index()].initialized
    }

    fn initialize(&self) {
        self.core.borrow_mut().ranks[self.rank.index()].initialized = true;
    }

    fn finalize(&self) {
        self.core.borrow_mut().ranks[self.rank.index()].initialized = false;
    }

    fn claim_instance(&self) -> bool {
        let mut core = self.core.borrow_mut();
        let slot = &mut core.ranks[self.rank.index()];
        !std::mem::replace(&mut slot.instance_live, true)
    }

    fn release_instance(&self) {
        self.core.borrow_mut().ranks[self.rank.index()].instance_live = false;
    }
}

/// A set of rank programs over one simulated transport.
pub struct Simulation<O> {
    core: Rc<RefCell<Core>>,
    programs: Vec<Option<LocalBoxFuture<O>>>,
    ends: Vec<Option<RankEnd<O>>>,
}

impl<O: fmt::Display + 'static> Simulation<O> {
    pub fn new(config: SimConfig) -> Self {
        let n = config.ranks;
        Simulation {
            core: Rc::new(RefCell::new(Core::new(&config))),
            programs: (0..n).map(|_| None).collect(),
            ends: (0..n).map(|_| None).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.programs.len()
    }

    pub fn endpoint(&self, rank: RankId) -> SimEndpoint {
        assert!(rank.index() < self.size());
        SimEndpoint {
            core: Rc::clone(&self.core),
            rank,
        }
    }

    pub fn spawn<F, Fut>(&mut self, rank: RankId, body: F)
    where
        F: FnOnce(SimEndpoint) -> Fut,
        Fut: Future<Output = O> + 'static,
    {
        let ep = self.endpoint(rank);
        self.programs[rank.index()] = Some(Box::pin(body(ep)));
    }

    /// Spawns `body` on every rank.
    pub fn spawn_all<F, Fut>(&mut self, mut body: F)
    where
        F: FnMut(SimEndpoint) -> Fut,
        Fut: Future<Output = O> + 'static,
    {
        for r in 0..self.size() {
            self.spawn(RankId::from(r), &mut body);
        }
    }

    /// Runs to completion, deadlock or step limit under one seeded schedule.
    pub fn run(self, seed: ScheduleSeed) -> Trace<O> {
        let mut chooser = SeededChooser(ChaCha8Rng::seed_from_u64(seed.0));
        self.drive(&mut chooser)
    }

    fn poll_rank(&mut self, r: usize) {
        let Some(fut) = self.programs[r].as_mut() else {
            return;
        };
        let mut cx = Context::from_waker(Waker::noop());
        match fut.as_mut().poll(&mut cx) {
            Poll::Ready(out) => {
                self.programs[r] = None;
                let mut core = self.core.borrow_mut();
                core.ranks[r].status = Status::Done;
                core.record(TraceEvent::Done {
                    rank: RankId::from(r),
                    outcome: out.to_string(),
                });
                self.ends[r] = Some(RankEnd::Finished(out));
            }
            Poll::Pending => {
                assert!(
                    self.core.borrow().ranks[r].pending.is_some(),
                    "rank {r} suspended outside a transport operation"
                );
            }
        }
    }

    fn fire_kills(&mut self) {
        let killed = self.core.borrow_mut().fire_kills();
        for r in killed {
            // Dropped outside the core borrow: destructors may touch the transport.
            let fut = self.programs[r.index()].take();
            drop(fut);
            self.ends[r.index()] = Some(RankEnd::Killed);
        }
        self.core.borrow_mut().detect_failures();
    }

    fn all_finished(&self) -> bool {
        self.core
            .borrow()
            .ranks
            .iter()
            .all(|s| s.status != Status::Running)
    }

    pub(crate) fn drive(mut self, chooser: &mut dyn Chooser) -> Trace<O> {
        for (r, p) in self.programs.iter().enumerate() {
            assert!(p.is_some(), "rank {r} has no program");
        }
        {
            let mut core = self.core.borrow_mut();
            if chooser.wants_footprints() && core.reduction_ok {
                core.footprints = Some(Vec::new());
            }
        }
        self.fire_kills();
        for r in 0..self.size() {
            if self.core.borrow().ranks[r].status == Status::Running {
                self.poll_rank(r);
            }
        }
        self.core.borrow_mut().detect_failures();

        let termination = loop {
            self.fire_kills();
            if self.all_finished() {
                break Termination::Completed;
            }
            let clock = self.core.borrow().clock;
            if clock >= self.core.borrow().max_steps {
                self.core.borrow_mut().record(TraceEvent::StepLimit);
                break Termination::StepLimit;
            }
            let enabled = self.core.borrow().enabled();
            if enabled.is_empty() {
                let mut core = self.core.borrow_mut();
                if let Some(t) = core.next_timed_event() {
                    core.record(TraceEvent::Idle { until: t });
                    core.clock = t;
                    continue;
                }
                let blocked: Vec<RankId> = core
                    .ranks
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.status == Status::Running)
                    .map(|(i, _)| RankId::from(i))
                    .collect();
                core.record(TraceEvent::Deadlock { blocked });
                break Termination::Deadlocked;
            }
            let choice = {
                let core = self.core.borrow();
                let ctx = ChoiceContext {
                    core: &core,
                    enabled: &enabled,
                };
                chooser.choose(&ctx)
            };
            match choice {
                Choice::Stop(t) => break t,
                Choice::Take(i) => match enabled[i] {
                    EventKey::Deliver(m) => {
                        let mut core = self.core.borrow_mut();
                        core.begin_event(enabled[i]);
                        core.deliver(m);
                    }
                    EventKey::Step(r) => {
                        {
                            let mut core = self.core.borrow_mut();
                            core.begin_event(enabled[i]);
                            let op = core.ranks[r.index()]
                                .pending
                                .take()
                                .expect("stepped rank has no pending op");
                            let res = core.exec_op(r, op);
                            let h = &mut core.history[r.index()];
                            *h = digest((*h, &res));
                            core.ranks[r.index()].result = Some(res);
                        }
                        self.poll_rank(r.index());
                    }
                },
            }
            let mut core = self.core.borrow_mut();
            core.detect_failures();
            core.clock += 1;
        };

        // Drop unfinished programs before tearing down the core.
        let programs = std::mem::take(&mut self.programs);
        drop(programs);
        let ends = self
            .ends
            .into_iter()
            .map(|e| e.unwrap_or(RankEnd::Blocked))
            .collect();
        // An endpoint may outlive its program, so take rather than unwrap.
        let mut core = self.core.borrow_mut();
        let records = std::mem::take(&mut core.trace);
        let channels = std::mem::take(&mut core.channels);
        let (steps, leak_count) = (core.clock, core.leaks);
        let fingerprint = core.state_key();
        let footprints = core.footprints.take().unwrap_or_default();
        drop(core);
        Trace {
            records,
            ends,
            termination,
            steps,
            channels,
            leak_count,
            fingerprint,
            footprints,
        }
    }
}
