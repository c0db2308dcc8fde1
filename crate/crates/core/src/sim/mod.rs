//! Simulated verbs-style transport.
//!
//! Machines own registered memory regions; queue pairs connect two machines
//! and carry four kinds of work request: two-sided SEND/RECV and one-sided
//! WRITE/READ that touch the target's memory without notifying the target
//! application. Completions are generated only for signaled requests and for
//! consumed RECVs. The device enforces the one hard hardware limit the
//! transmitter protocol exists to respect: at most `u_max` consecutive
//! unsignaled posts per queue pair. Exceeding it is a fault, and the fault
//! counter is the oracle the transmitter stress tests assert against.
//!
//! Two delivery disciplines:
//!
//! * immediate (default): a post applies its memory effect before returning,
//!   so single-threaded runs are fully deterministic;
//! * deferred: posts queue per side and a pump (or the background engine
//!   thread) applies them later. Source buffers are only read at apply time,
//!   which is what gives buffer-recycling stress tests teeth.
//!
//! Test hook: `split_writes` breaks every unsignaled WRITE into a visible
//! prefix and a withheld suffix. The suffix lands before any later operation
//! on the same queue pair applies, before any completion is generated there,
//! or when a pump finds the side idle, preserving per-pair FIFO while
//! exposing torn intermediate states to the receiver. This is how the
//! record-framing protocol gets exercised against partial placement.

mod bytes;
pub mod stream;

pub use bytes::ByteStore;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

pub type MachineId = u32;
pub type RegionId = u32;
pub type QpId = u32;
pub type ZoneId = u32;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub machines: u32,
    pub zones_per_machine: u32,
    /// Registered-bytes cap per machine; None = unlimited.
    pub registration_cap: Option<u64>,
    /// Cap on sends queued at a peer that has no posted RECV.
    pub send_backlog_cap: usize,
    /// Queue posts for `pump`/engine instead of applying inline.
    pub deferred: bool,
    /// Split every unsignaled WRITE at a seeded random point.
    pub split_writes: Option<u64>,
    pub cost: CostModel,
}

impl SimConfig {
    pub fn new(machines: u32) -> SimConfig {
        SimConfig {
            machines,
            zones_per_machine: 1,
            registration_cap: None,
            send_backlog_cap: 1024,
            deferred: false,
            split_writes: None,
            cost: CostModel::free(),
        }
    }
}

/// Fixed per-operation overheads, modelling doorbell and completion costs of
/// a real NIC. Zero for unit tests; benchmarks use `nic_like` so that relative
/// throughput of the send/write/aggregated paths keeps realistic proportions.
#[derive(Debug, Clone, Copy)]
pub struct CostModel {
    pub post_ns: u64,
    pub completion_ns: u64,
    pub match_ns: u64,
}

impl CostModel {
    pub fn free() -> CostModel {
        CostModel { post_ns: 0, completion_ns: 0, match_ns: 0 }
    }

    pub fn nic_like() -> CostModel {
        CostModel { post_ns: 150, completion_ns: 100, match_ns: 100 }
    }
}

fn spin_ns(ns: u64) {
    if ns == 0 {
        return;
    }
    let t0 = Instant::now();
    while (Instant::now() - t0) < Duration::from_nanos(ns) {
        std::hint::spin_loop();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalSpan {
    pub region: RegionId,
    pub offset: u64,
    pub len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemoteSpan {
    pub region: RegionId,
    pub offset: u64,
}

#[derive(Debug, Clone, Copy)]
pub enum WorkOp {
    Send { local: LocalSpan },
    Recv { local: LocalSpan },
    Write { local: LocalSpan, remote: RemoteSpan },
    Read { local: LocalSpan, remote: RemoteSpan },
    /// Completion marker with no memory effect; lets a flush force a signaled
    /// completion without touching data paths.
    Nop,
}

#[derive(Debug, Clone, Copy)]
pub struct WorkRequest {
    pub op: WorkOp,
    pub signaled: bool,
    pub user_tag: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionKind {
    Send,
    Recv { len: u32 },
    Write,
    Read,
    Nop,
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionEntry {
    pub qp: QpId,
    pub user_tag: u64,
    pub kind: CompletionKind,
}

/// Multi-consumer completion queue; each entry is delivered exactly once.
pub struct CompletionQueue {
    entries: Mutex<std::collections::VecDeque<CompletionEntry>>,
    completion_ns: u64,
}

impl CompletionQueue {
    fn new(completion_ns: u64) -> Arc<CompletionQueue> {
        Arc::new(CompletionQueue { entries: Mutex::new(Default::default()), completion_ns })
    }

    fn push(&self, e: CompletionEntry) {
        spin_ns(self.completion_ns);
        self.entries.lock().unwrap().push_back(e);
    }

    pub fn poll(&self, max: usize) -> Vec<CompletionEntry> {
        let mut q = self.entries.lock().unwrap();
        let n = max.min(q.len());
        q.drain(..n).collect()
    }

    pub fn poll_one(&self) -> Option<CompletionEntry> {
        self.entries.lock().unwrap().pop_front()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Region {
    pub id: RegionId,
    pub machine: MachineId,
    pub zone: ZoneId,
    store: ByteStore,
}

impl Region {
    pub fn len(&self) -> u64 {
        self.store.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn store(&self) -> &ByteStore {
        &self.store
    }

    fn check(&self, offset: u64, len: u64) -> Result<()> {
        if offset + len > self.len() {
            return Err(Error::OutOfRange { region: self.id, offset, len, cap: self.len() });
        }
        Ok(())
    }
}

pub struct Machine {
    pub id: MachineId,
    zones: u32,
    regions: RwLock<HashMap<RegionId, Arc<Region>>>,
    registered_bytes: AtomicU64,
    cap: Option<u64>,
    next_region: Arc<AtomicU32>,
    counters: Arc<Counters>,
}

impl Machine {
    /// Register a zeroed memory region of `len` bytes in `zone`.
    pub fn register(&self, zone: ZoneId, len: u64) -> Result<Arc<Region>> {
        if zone >= self.zones {
            return Err(Error::UnknownZone { machine: self.id, zone });
        }
        if let Some(cap) = self.cap {
            let prev = self.registered_bytes.fetch_add(len, Ordering::Relaxed);
            if prev + len > cap {
                self.registered_bytes.fetch_sub(len, Ordering::Relaxed);
                return Err(Error::RegistrationCap { machine: self.id });
            }
        } else {
            self.registered_bytes.fetch_add(len, Ordering::Relaxed);
        }
        let id = self.next_region.fetch_add(1, Ordering::Relaxed);
        let region = Arc::new(Region {
            id,
            machine: self.id,
            zone,
            store: ByteStore::new(len as usize),
        });
        self.regions.write().unwrap().insert(id, region.clone());
        self.counters.registrations.fetch_add(1, Ordering::Relaxed);
        self.counters.registered_bytes.fetch_add(len, Ordering::Relaxed);
        Ok(region)
    }

    pub fn region(&self, id: RegionId) -> Option<Arc<Region>> {
        self.regions.read().unwrap().get(&id).cloned()
    }

    pub fn zones(&self) -> u32 {
        self.zones
    }

    fn resolve(&self, id: RegionId, offset: u64, len: u64) -> Result<Arc<Region>> {
        let r = self.region(id).ok_or(Error::OutOfRange {
            region: id,
            offset,
            len,
            cap: 0,
        })?;
        r.check(offset, len)?;
        Ok(r)
    }
}

#[derive(Default)]
pub struct Counters {
    pub registrations: AtomicU64,
    pub registered_bytes: AtomicU64,
    pub overflow_faults: AtomicU64,
    pub backlog_rejects: AtomicU64,
    pub splits_applied: AtomicU64,
    pub recv_truncations: AtomicU64,
}

struct PostedRecv {
    region: Arc<Region>,
    offset: u64,
    len: u32,
    user_tag: u64,
}

struct InboundSend {
    bytes: Vec<u8>,
    sender_side: usize,
    signaled: bool,
    user_tag: u64,
}

struct PendingTail {
    region: Arc<Region>,
    offset: u64,
    bytes: Vec<u8>,
}

struct SendState {
    unsignaled_streak: u32,
    pending_tail: Option<PendingTail>,
    deferred: std::collections::VecDeque<WorkRequest>,
}

struct QpSide {
    id: QpId,
    sq: Mutex<SendState>,
    rq: Mutex<std::collections::VecDeque<PostedRecv>>,
    inbound: Mutex<std::collections::VecDeque<InboundSend>>,
    send_cq: Arc<CompletionQueue>,
    recv_cq: Arc<CompletionQueue>,
    posted_send: AtomicU64,
    posted_write: AtomicU64,
    posted_read: AtomicU64,
    posted_nop: AtomicU64,
    signaled_completions: AtomicU64,
}

struct QpPair {
    machines: [MachineId; 2],
    u_max: u32,
    sides: [QpSide; 2],
    sim: Arc<SimInner>,
}

struct SimInner {
    cfg: SimConfig,
    machines: Vec<Arc<Machine>>,
    counters: Arc<Counters>,
    next_qp: AtomicU32,
    split_state: AtomicU64,
    qps: Mutex<Vec<Weak<QpPair>>>,
}

impl SimInner {
    fn machine(&self, id: MachineId) -> Result<&Arc<Machine>> {
        self.machines
            .get(id as usize)
            .ok_or(Error::Config(format!("no machine {}", id)))
    }

    fn split_point(&self, len: u32) -> Option<u32> {
        self.cfg.split_writes?;
        // Word granularity: placement is increasing-address-order at 8-byte
        // resolution, so aligned 64-bit fields are never torn. Splitting
        // needs at least one word on each side.
        if len < 16 {
            return None;
        }
        let words = (len / 8) as u64;
        // xorshift64*; seeded once, shared across queue pairs
        let mut s = self.split_state.load(Ordering::Relaxed);
        loop {
            let mut x = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
            x ^= x >> 30;
            x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            x ^= x >> 27;
            match self.split_state.compare_exchange_weak(
                s,
                s.wrapping_add(1),
                Ordering::Relaxed,
                Ordering::Relaxed,
            ) {
                Ok(_) => return Some(8 * (1 + (x % (words - 1))) as u32),
                Err(v) => s = v,
            }
        }
    }
}

/// One endpoint of a connected queue-pair. Cloneable; posting is serialized by
/// the device and safe from any thread.
#[derive(Clone)]
pub struct QueuePair {
    pair: Arc<QpPair>,
    side: usize,
}

impl QueuePair {
    pub fn id(&self) -> QpId {
        self.pair.sides[self.side].id
    }

    pub fn peer_id(&self) -> QpId {
        self.pair.sides[1 - self.side].id
    }

    pub fn u_max(&self) -> u32 {
        self.pair.u_max
    }

    pub fn local_machine(&self) -> MachineId {
        self.pair.machines[self.side]
    }

    pub fn peer_machine(&self) -> MachineId {
        self.pair.machines[1 - self.side]
    }

    pub fn send_cq(&self) -> &Arc<CompletionQueue> {
        &self.pair.sides[self.side].send_cq
    }

    pub fn recv_cq(&self) -> &Arc<CompletionQueue> {
        &self.pair.sides[self.side].recv_cq
    }

    pub fn sends_posted(&self) -> u64 {
        self.pair.sides[self.side].posted_send.load(Ordering::Relaxed)
    }

    pub fn writes_posted(&self) -> u64 {
        self.pair.sides[self.side].posted_write.load(Ordering::Relaxed)
    }

    pub fn reads_posted(&self) -> u64 {
        self.pair.sides[self.side].posted_read.load(Ordering::Relaxed)
    }

    pub fn signaled_completions(&self) -> u64 {
        self.pair.sides[self.side].signaled_completions.load(Ordering::Relaxed)
    }

    pub fn post(&self, wr: WorkRequest) -> Result<()> {
        let pair = &*self.pair;
        let me = &pair.sides[self.side];
        spin_ns(pair.sim.cfg.cost.post_ns);

        // RECV has its own queue and no signaling discipline: a completion is
        // always generated when the buffer is consumed.
        if let WorkOp::Recv { local } = wr.op {
            let region = pair.sim.machine(pair.machines[self.side])?.resolve(
                local.region,
                local.offset,
                local.len as u64,
            )?;
            let mut rq = me.rq.lock().unwrap();
            rq.push_back(PostedRecv {
                region,
                offset: local.offset,
                len: local.len,
                user_tag: wr.user_tag,
            });
            drop(rq);
            Self::match_inbound(pair, self.side);
            return Ok(());
        }

        // Validate spans up front so deferred posts fail at the call site.
        match wr.op {
            WorkOp::Send { local } | WorkOp::Write { local, .. } | WorkOp::Read { local, .. } => {
                pair.sim.machine(pair.machines[self.side])?.resolve(
                    local.region,
                    local.offset,
                    local.len as u64,
                )?;
            }
            _ => {}
        }
        if let WorkOp::Write { local, remote } | WorkOp::Read { local, remote } = wr.op {
            pair.sim.machine(pair.machines[1 - self.side])?.resolve(
                remote.region,
                remote.offset,
                local.len as u64,
            )?;
        }
        if let WorkOp::Send { local } = wr.op {
            let backlog = pair.sides[1 - self.side].inbound.lock().unwrap().len();
            if backlog >= pair.sim.cfg.send_backlog_cap {
                pair.sim.counters.backlog_rejects.fetch_add(1, Ordering::Relaxed);
                return Err(Error::SendBacklog { qp: me.id });
            }
            let _ = local;
        }

        let mut sq = me.sq.lock().unwrap();

        // Device-limit oracle: consecutive unsignaled posts are bounded by
        // u_max; a signaled post resets the streak.
        if wr.signaled {
            sq.unsignaled_streak = 0;
        } else {
            if sq.unsignaled_streak + 1 > pair.u_max {
                pair.sim.counters.overflow_faults.fetch_add(1, Ordering::Relaxed);
                return Err(Error::QpOverflow {
                    qp: me.id,
                    streak: sq.unsignaled_streak + 1,
                    u_max: pair.u_max,
                });
            }
            sq.unsignaled_streak += 1;
        }

        match wr.op {
            WorkOp::Send { .. } => me.posted_send.fetch_add(1, Ordering::Relaxed),
            WorkOp::Write { .. } => me.posted_write.fetch_add(1, Ordering::Relaxed),
            WorkOp::Read { .. } => me.posted_read.fetch_add(1, Ordering::Relaxed),
            WorkOp::Nop => me.posted_nop.fetch_add(1, Ordering::Relaxed),
            WorkOp::Recv { .. } => unreachable!(),
        };

        if pair.sim.cfg.deferred {
            sq.deferred.push_back(wr);
            return Ok(());
        }
        Self::apply(pair, self.side, &mut sq, &wr)
    }

    /// Apply one send-queue work request. Caller holds the side's sq lock.
    fn apply(pair: &QpPair, side: usize, sq: &mut SendState, wr: &WorkRequest) -> Result<()> {
        let me = &pair.sides[side];
        // FIFO: anything we held back must land before a later op applies.
        Self::settle_locked(sq);

        match wr.op {
            WorkOp::Write { local, remote } => {
                let src = pair.sim.machine(pair.machines[side])?.resolve(
                    local.region,
                    local.offset,
                    local.len as u64,
                )?;
                let dst = pair.sim.machine(pair.machines[1 - side])?.resolve(
                    remote.region,
                    remote.offset,
                    local.len as u64,
                )?;
                let bytes = src.store.to_vec(local.offset as usize, local.len as usize);
                match pair.sim.split_point(local.len) {
                    Some(h) if !wr.signaled => {
                        dst.store.write(remote.offset as usize, &bytes[..h as usize]);
                        sq.pending_tail = Some(PendingTail {
                            region: dst,
                            offset: remote.offset + h as u64,
                            bytes: bytes[h as usize..].to_vec(),
                        });
                        pair.sim.counters.splits_applied.fetch_add(1, Ordering::Relaxed);
                    }
                    _ => dst.store.write(remote.offset as usize, &bytes),
                }
            }
            WorkOp::Read { local, remote } => {
                let dst = pair.sim.machine(pair.machines[side])?.resolve(
                    local.region,
                    local.offset,
                    local.len as u64,
                )?;
                let src = pair.sim.machine(pair.machines[1 - side])?.resolve(
                    remote.region,
                    remote.offset,
                    local.len as u64,
                )?;
                let bytes = src.store.to_vec(remote.offset as usize, local.len as usize);
                dst.store.write(local.offset as usize, &bytes);
            }
            WorkOp::Send { local } => {
                let src = pair.sim.machine(pair.machines[side])?.resolve(
                    local.region,
                    local.offset,
                    local.len as u64,
                )?;
                let bytes = src.store.to_vec(local.offset as usize, local.len as usize);
                pair.sides[1 - side].inbound.lock().unwrap().push_back(InboundSend {
                    bytes,
                    sender_side: side,
                    signaled: wr.signaled,
                    user_tag: wr.user_tag,
                });
                Self::match_inbound(pair, 1 - side);
                // SEND completion is generated at the match, like a delivery ack.
                if wr.signaled {
                    Self::settle_locked(sq);
                }
                return Ok(());
            }
            WorkOp::Nop => {}
            WorkOp::Recv { .. } => unreachable!(),
        }

        if wr.signaled {
            // A completion certifies placement of this and every earlier op.
            Self::settle_locked(sq);
            me.send_cq.push(CompletionEntry {
                qp: me.id,
                user_tag: wr.user_tag,
                kind: match wr.op {
                    WorkOp::Write { .. } => CompletionKind::Write,
                    WorkOp::Read { .. } => CompletionKind::Read,
                    _ => CompletionKind::Nop,
                },
            });
            me.signaled_completions.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    fn settle_locked(sq: &mut SendState) {
        if let Some(tail) = sq.pending_tail.take() {
            tail.region.store.write(tail.offset as usize, &tail.bytes);
        }
    }

    /// Match queued inbound sends against posted RECVs at `side`.
    fn match_inbound(pair: &QpPair, side: usize) {
        let me = &pair.sides[side];
        loop {
            let mut rq = me.rq.lock().unwrap();
            let mut inbound = me.inbound.lock().unwrap();
            if rq.is_empty() || inbound.is_empty() {
                return;
            }
            let recv = rq.pop_front().unwrap();
            let send = inbound.pop_front().unwrap();
            drop(inbound);
            drop(rq);
            spin_ns(pair.sim.cfg.cost.match_ns);

            let mut len = send.bytes.len() as u32;
            if len > recv.len {
                pair.sim.counters.recv_truncations.fetch_add(1, Ordering::Relaxed);
                debug_assert!(false, "send of {} bytes into recv buffer of {}", len, recv.len);
                len = recv.len;
            }
            recv.region
                .store
                .write(recv.offset as usize, &send.bytes[..len as usize]);
            me.recv_cq.push(CompletionEntry {
                qp: me.id,
                user_tag: recv.user_tag,
                kind: CompletionKind::Recv { len },
            });
            if send.signaled {
                let sender = &pair.sides[send.sender_side];
                sender.send_cq.push(CompletionEntry {
                    qp: sender.id,
                    user_tag: send.user_tag,
                    kind: CompletionKind::Send,
                });
                sender.signaled_completions.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Apply up to `max` deferred ops on this side. Returns ops applied.
    fn pump_side(pair: &QpPair, side: usize, max: usize) -> usize {
        let me = &pair.sides[side];
        let mut done = 0;
        while done < max {
            let mut sq = me.sq.lock().unwrap();
            let Some(wr) = sq.deferred.pop_front() else {
                // idle side: the device finishes any withheld suffix, the way
                // real DMA completes once the queue quiesces
                Self::settle_locked(&mut sq);
                break;
            };
            // Spans were validated at post time; apply cannot fail.
            Self::apply(pair, side, &mut sq, &wr).expect("validated op failed at apply");
            done += 1;
        }
        done
    }

    /// Force any withheld write suffix on this side to land.
    pub fn settle(&self) {
        let mut sq = self.pair.sides[self.side].sq.lock().unwrap();
        Self::settle_locked(&mut sq);
    }
}

/// Anything that accepts work requests and reports completions. The
/// transmitter drives a `Port`; the simulated device and the TCP stream
/// backend both implement it.
pub trait Port: Send + Sync + 'static {
    fn post(&self, wr: WorkRequest) -> Result<()>;
    fn send_cq(&self) -> &Arc<CompletionQueue>;
    fn u_max(&self) -> u32;
}

impl Port for QueuePair {
    fn post(&self, wr: WorkRequest) -> Result<()> {
        QueuePair::post(self, wr)
    }

    fn send_cq(&self) -> &Arc<CompletionQueue> {
        QueuePair::send_cq(self)
    }

    fn u_max(&self) -> u32 {
        QueuePair::u_max(self)
    }
}

pub struct Simulation {
    inner: Arc<SimInner>,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Simulation {
        let counters = Arc::new(Counters::default());
        let next_region = Arc::new(AtomicU32::new(0));
        let machines = (0..cfg.machines)
            .map(|id| {
                Arc::new(Machine {
                    id,
                    zones: cfg.zones_per_machine,
                    regions: RwLock::new(HashMap::new()),
                    registered_bytes: AtomicU64::new(0),
                    cap: cfg.registration_cap,
                    next_region: next_region.clone(),
                    counters: counters.clone(),
                })
            })
            .collect();
        let split_seed = cfg.split_writes.unwrap_or(0);
        Simulation {
            inner: Arc::new(SimInner {
                cfg,
                machines,
                counters,
                next_qp: AtomicU32::new(0),
                split_state: AtomicU64::new(split_seed),
                qps: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn machine(&self, id: MachineId) -> Arc<Machine> {
        self.inner.machines[id as usize].clone()
    }

    pub fn machines(&self) -> u32 {
        self.inner.machines.len() as u32
    }

    pub fn counters(&self) -> &Counters {
        &self.inner.counters
    }

    /// Connect machines `a` and `b` with a new queue pair; returns the two
    /// endpoints. `a == b` forms a loopback pair.
    pub fn connect(&self, a: MachineId, b: MachineId, u_max: u32) -> Result<(QueuePair, QueuePair)> {
        self.inner.machine(a)?;
        self.inner.machine(b)?;
        let cost = self.inner.cfg.cost;
        let mk_side = |id: QpId| QpSide {
            id,
            sq: Mutex::new(SendState {
                unsignaled_streak: 0,
                pending_tail: None,
                deferred: Default::default(),
            }),
            rq: Mutex::new(Default::default()),
            inbound: Mutex::new(Default::default()),
            send_cq: CompletionQueue::new(cost.completion_ns),
            recv_cq: CompletionQueue::new(cost.completion_ns),
            posted_send: AtomicU64::new(0),
            posted_write: AtomicU64::new(0),
            posted_read: AtomicU64::new(0),
            posted_nop: AtomicU64::new(0),
            signaled_completions: AtomicU64::new(0),
        };
        let id0 = self.inner.next_qp.fetch_add(2, Ordering::Relaxed);
        let pair = Arc::new(QpPair {
            machines: [a, b],
            u_max,
            sides: [mk_side(id0), mk_side(id0 + 1)],
            sim: self.inner.clone(),
        });
        self.inner.qps.lock().unwrap().push(Arc::downgrade(&pair));
        Ok((
            QueuePair { pair: pair.clone(), side: 0 },
            QueuePair { pair, side: 1 },
        ))
    }

    /// Deferred mode: apply queued ops across all queue pairs. Returns the
    /// number applied.
    pub fn pump(&self) -> usize {
        let pairs: Vec<Arc<QpPair>> = {
            let mut qps = self.inner.qps.lock().unwrap();
            qps.retain(|w| w.strong_count() > 0);
            qps.iter().filter_map(|w| w.upgrade()).collect()
        };
        let mut total = 0;
        for p in &pairs {
            total += QueuePair::pump_side(p, 0, 8);
            total += QueuePair::pump_side(p, 1, 8);
        }
        total
    }

    /// Land every withheld split suffix (test hook).
    pub fn settle_all(&self) {
        let pairs: Vec<Arc<QpPair>> = self
            .inner
            .qps
            .lock()
            .unwrap()
            .iter()
            .filter_map(|w| w.upgrade())
            .collect();
        for p in &pairs {
            for side in 0..2 {
                let mut sq = p.sides[side].sq.lock().unwrap();
                QueuePair::settle_locked(&mut sq);
            }
        }
    }

    /// Background pump for deferred mode, with optional per-batch jitter to
    /// shake out recycling races. The engine stops when the handle drops.
    pub fn start_engine(&self, jitter_ns: u64, seed: u64) -> EngineHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let sim = Simulation { inner: self.inner.clone() };
        let thread = std::thread::spawn(move || {
            let mut rng = seed | 1;
            while !stop2.load(Ordering::Relaxed) {
                let n = sim.pump();
                if jitter_ns > 0 {
                    rng ^= rng << 13;
                    rng ^= rng >> 7;
                    rng ^= rng << 17;
                    spin_ns(rng % jitter_ns);
                }
                if n == 0 {
                    std::thread::yield_now();
                }
            }
            // Drain what is left so shutdown never strands posted ops.
            while sim.pump() > 0 {}
        });
        EngineHandle { stop, thread: Some(thread) }
    }
}

impl Clone for Simulation {
    fn clone(&self) -> Self {
        Simulation { inner: self.inner.clone() }
    }
}

pub struct EngineHandle {
    stop: Arc<AtomicBool>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Drop for EngineHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim2() -> Simulation {
        Simulation::new(SimConfig::new(2))
    }

    fn span(r: &Region, offset: u64, len: u32) -> LocalSpan {
        LocalSpan { region: r.id, offset, len }
    }

    #[test]
    fn write_is_one_sided_and_invisible_to_target() {
        let sim = sim2();
        let src = sim.machine(0).register(0, 4096).unwrap();
        let dst = sim.machine(1).register(0, 4096).unwrap();
        let (qa, qb) = sim.connect(0, 1, 64).unwrap();

        src.store().write(16, b"hello remote");
        qa.post(WorkRequest {
            op: WorkOp::Write {
                local: span(&src, 16, 12),
                remote: RemoteSpan { region: dst.id, offset: 100 },
            },
            signaled: false,
            user_tag: 7,
        })
        .unwrap();

        assert_eq!(dst.store().to_vec(100, 12), b"hello remote");
        // No completion or callback surfaces at the target application.
        assert!(qb.send_cq().is_empty());
        assert!(qb.recv_cq().is_empty());
        assert!(qa.send_cq().is_empty()); // unsignaled: nothing at the poster either
    }

    #[test]
    fn read_pulls_remote_bytes() {
        let sim = sim2();
        let local = sim.machine(0).register(0, 256).unwrap();
        let remote = sim.machine(1).register(0, 256).unwrap();
        let (qa, _qb) = sim.connect(0, 1, 64).unwrap();
        remote.store().write(32, &[9u8; 16]);

        qa.post(WorkRequest {
            op: WorkOp::Read {
                local: span(&local, 0, 16),
                remote: RemoteSpan { region: remote.id, offset: 32 },
            },
            signaled: true,
            user_tag: 3,
        })
        .unwrap();

        assert_eq!(local.store().to_vec(0, 16), vec![9u8; 16]);
        let cqes = qa.send_cq().poll(8);
        assert_eq!(cqes.len(), 1);
        assert_eq!(cqes[0].user_tag, 3);
        assert_eq!(cqes[0].kind, CompletionKind::Read);
    }

    #[test]
    fn send_matches_posted_recv_in_fifo_order() {
        let sim = sim2();
        let src = sim.machine(0).register(0, 256).unwrap();
        let dst = sim.machine(1).register(0, 256).unwrap();
        let (qa, qb) = sim.connect(0, 1, 64).unwrap();

        for (i, tag) in [(0u64, 100u64), (64, 101)] {
            qb.post(WorkRequest {
                op: WorkOp::Recv { local: span(&dst, i, 64) },
                signaled: false,
                user_tag: tag,
            })
            .unwrap();
        }
        src.store().write(0, b"first");
        qa.post(WorkRequest {
            op: WorkOp::Send { local: span(&src, 0, 5) },
            signaled: false,
            user_tag: 1,
        })
        .unwrap();
        src.store().write(8, b"second");
        qa.post(WorkRequest {
            op: WorkOp::Send { local: span(&src, 8, 6) },
            signaled: false,
            user_tag: 2,
        })
        .unwrap();

        let cqes = qb.recv_cq().poll(8);
        assert_eq!(cqes.len(), 2);
        assert_eq!(cqes[0].user_tag, 100);
        assert_eq!(cqes[0].kind, CompletionKind::Recv { len: 5 });
        assert_eq!(cqes[1].user_tag, 101);
        assert_eq!(dst.store().to_vec(0, 5), b"first");
        assert_eq!(dst.store().to_vec(64, 6), b"second");
    }

    #[test]
    fn send_queues_until_recv_posted() {
        let sim = sim2();
        let src = sim.machine(0).register(0, 256).unwrap();
        let dst = sim.machine(1).register(0, 256).unwrap();
        let (qa, qb) = sim.connect(0, 1, 64).unwrap();

        src.store().write(0, b"wait");
        qa.post(WorkRequest {
            op: WorkOp::Send { local: span(&src, 0, 4) },
            signaled: true,
            user_tag: 11,
        })
        .unwrap();
        assert!(qb.recv_cq().is_empty());
        assert!(qa.send_cq().is_empty()); // delivery ack only on match

        qb.post(WorkRequest {
            op: WorkOp::Recv { local: span(&dst, 0, 16) },
            signaled: false,
            user_tag: 50,
        })
        .unwrap();
        assert_eq!(qb.recv_cq().poll(8).len(), 1);
        let acks = qa.send_cq().poll(8);
        assert_eq!(acks.len(), 1);
        assert_eq!(acks[0].kind, CompletionKind::Send);
        assert_eq!(dst.store().to_vec(0, 4), b"wait");
    }

    #[test]
    fn unsignaled_overflow_faults_exactly_past_u_max() {
        let sim = sim2();
        let src = sim.machine(0).register(0, 256).unwrap();
        let dst = sim.machine(1).register(0, 256).unwrap();
        let (qa, _qb) = sim.connect(0, 1, 4).unwrap();

        let wr = |signaled| WorkRequest {
            op: WorkOp::Write {
                local: span(&src, 0, 8),
                remote: RemoteSpan { region: dst.id, offset: 0 },
            },
            signaled,
            user_tag: 0,
        };
        for _ in 0..4 {
            qa.post(wr(false)).unwrap();
        }
        let err = qa.post(wr(false)).unwrap_err();
        assert!(matches!(err, Error::QpOverflow { u_max: 4, .. }), "{err}");
        assert_eq!(sim.counters().overflow_faults.load(Ordering::Relaxed), 1);

        // A signaled post resets the streak and the pair keeps working.
        qa.post(wr(true)).unwrap();
        for _ in 0..4 {
            qa.post(wr(false)).unwrap();
        }
    }

    #[test]
    fn poll_sees_only_signaled_completions() {
        let sim = sim2();
        let src = sim.machine(0).register(0, 256).unwrap();
        let dst = sim.machine(1).register(0, 256).unwrap();
        let (qa, _qb) = sim.connect(0, 1, 64).unwrap();

        let wr = |signaled, tag| WorkRequest {
            op: WorkOp::Write {
                local: span(&src, 0, 8),
                remote: RemoteSpan { region: dst.id, offset: 0 },
            },
            signaled,
            user_tag: tag,
        };
        qa.post(wr(false, 1)).unwrap();
        qa.post(wr(false, 2)).unwrap();
        qa.post(wr(false, 3)).unwrap();
        qa.post(wr(true, 4)).unwrap();
        let cqes = qa.send_cq().poll(16);
        assert_eq!(cqes.len(), 1);
        assert_eq!(cqes[0].user_tag, 4);
    }

    #[test]
    fn registration_cap_is_enforced() {
        let mut cfg = SimConfig::new(1);
        cfg.registration_cap = Some(1 << 20);
        let sim = Simulation::new(cfg);
        let m = sim.machine(0);
        m.register(0, 1 << 19).unwrap();
        m.register(0, 1 << 19).unwrap();
        assert!(matches!(m.register(0, 1), Err(Error::RegistrationCap { machine: 0 })));
        assert!(matches!(m.register(9, 64), Err(Error::UnknownZone { .. })));
    }

    #[test]
    fn split_write_withholds_suffix_until_next_op() {
        let mut cfg = SimConfig::new(2);
        cfg.split_writes = Some(7);
        let sim = Simulation::new(cfg);
        let src = sim.machine(0).register(0, 256).unwrap();
        let dst = sim.machine(1).register(0, 256).unwrap();
        let (qa, _qb) = sim.connect(0, 1, 64).unwrap();

        src.store().write(0, &[0xEE; 32]);
        qa.post(WorkRequest {
            op: WorkOp::Write {
                local: span(&src, 0, 32),
                remote: RemoteSpan { region: dst.id, offset: 0 },
            },
            signaled: false,
            user_tag: 0,
        })
        .unwrap();

        let seen = dst.store().to_vec(0, 32);
        let placed = seen.iter().filter(|&&b| b == 0xEE).count();
        assert!(placed < 32, "split write should withhold a suffix");
        assert!(placed >= 1, "split write should place a prefix");
        // prefix is a contiguous leading run
        assert!(seen[..placed].iter().all(|&b| b == 0xEE));

        // Next op on the pair settles the suffix first (FIFO).
        qa.post(WorkRequest { op: WorkOp::Nop, signaled: true, user_tag: 1 }).unwrap();
        assert_eq!(dst.store().to_vec(0, 32), vec![0xEE; 32]);
    }

    #[test]
    fn deferred_ops_apply_on_pump_and_read_source_at_apply_time() {
        let mut cfg = SimConfig::new(2);
        cfg.deferred = true;
        let sim = Simulation::new(cfg);
        let src = sim.machine(0).register(0, 256).unwrap();
        let dst = sim.machine(1).register(0, 256).unwrap();
        let (qa, _qb) = sim.connect(0, 1, 64).unwrap();

        src.store().write(0, b"AAAA");
        qa.post(WorkRequest {
            op: WorkOp::Write {
                local: span(&src, 0, 4),
                remote: RemoteSpan { region: dst.id, offset: 0 },
            },
            signaled: true,
            user_tag: 9,
        })
        .unwrap();
        assert_eq!(dst.store().to_vec(0, 4), vec![0u8; 4]);
        assert!(qa.send_cq().is_empty());

        // The device reads the source when the op applies, not when posted:
        // overwriting before the pump corrupts the transfer. This is exactly
        // the hazard the transmitter's recycling tags exist to prevent.
        src.store().write(0, b"BBBB");
        assert!(sim.pump() > 0);
        assert_eq!(dst.store().to_vec(0, 4), b"BBBB");
        assert_eq!(qa.send_cq().poll(4).len(), 1);
    }

    #[test]
    fn backlog_cap_rejects_send_posts() {
        let mut cfg = SimConfig::new(2);
        cfg.send_backlog_cap = 2;
        let sim = Simulation::new(cfg);
        let src = sim.machine(0).register(0, 256).unwrap();
        let (qa, _qb) = sim.connect(0, 1, 64).unwrap();
        let wr = WorkRequest {
            op: WorkOp::Send { local: span(&src, 0, 4) },
            signaled: false,
            user_tag: 0,
        };
        qa.post(wr).unwrap();
        qa.post(wr).unwrap();
        assert!(matches!(qa.post(wr), Err(Error::SendBacklog { .. })));
    }
}
