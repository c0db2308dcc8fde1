//! Remote-invocation fabric: thread identity, the function registry,
//! synchronizers, per-process service threads, and the calling primitives.
//!
//! A fixed placement of `machines x processes x threads` is spun up by
//! [`launch`]. Each worker thread gets a [`Worker`] handle carrying its
//! identity and every transport resource it needs:
//!
//! * one shared [`Transmitter`] per destination process (selective signaling
//!   over one queue pair),
//! * a per-destination staging ring for frames and one-sided writes,
//! * lazily built one-sided channels for the write path,
//! * a pool of 8-byte notification cells remote threads write back into.
//!
//! Records travel one of two ways. The send path wraps a record in a small
//! frame (`dest`, `src`, notify locator) and SENDs it to the destination
//! process, where the service thread routes it into the destination worker's
//! inbox; setup-free service records (chunk allocation, synchronizer notices)
//! are handled by the service thread itself. The channel path writes records
//! into sender-managed ring chunks that the destination worker polls
//! directly, no service involvement after setup.

pub mod call;
pub mod queue;
pub mod sync;

pub use call::FID_USER_BASE;
pub use sync::{SyncMode, Synchronizer};

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use crate::aggregator::{AggStats, Aggregator};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::messenger::{
    encode_grow_reply, parse_grow_reply, ChunkLoc, GrowFn, GrowRequest, Polled, ReceiverChannel,
    SenderChannel, REPLY_BLOCK_LEN,
};
use crate::regmem::{CircularAllocator, GeneralAllocator, LinearCircularAllocator, RegBlock, ZoneArena};
use crate::sim::{
    CompletionKind, CostModel, Machine, QueuePair, Region, RegionId, RemoteSpan, SimConfig,
    Simulation, WorkOp, WorkRequest,
};
use crate::transmitter::Transmitter;
use call::{
    encode_record, scan_record, DecodedCall, RecordSpec, Scan, FID_ALLOC_CHUNKS, FID_BCAST,
    FID_BUF_WRITE, FID_CALL_NOTE, FID_CALL_RETURN, FID_FETCH_INVOKE, FID_SYNC_NOTIFY, MIN_RECORD,
};
use queue::Inbox;
use sync::{decode_notify, encode_notify, SyncTable};

/// Frame prepended to every send-path record: destination thread, source
/// thread, and an optional notification-cell offset in the source's cell
/// region.
const FRAME_LEN: usize = 16;
/// `notify_off` value meaning "no consumption notification wanted".
const NO_NOTIFY: u64 = u64::MAX;
/// Notification cells per worker (8 bytes each).
const CELL_COUNT: u32 = 1024;
const CELLS_LEN: u32 = CELL_COUNT * 8;

// ---------------------------------------------------------------- identity

/// Dense global identity of one worker thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadId {
    pub machine: u32,
    /// Global process index (machine-major).
    pub process: u32,
    /// Thread index within the process.
    pub thread: u32,
    /// Dense global id: `process * threads_per_process + thread`.
    pub flat: u32,
}

/// The placement grid. Flat ids are dense `0..total_threads` and the mapping
/// to `(machine, process, thread)` is bijective.
#[derive(Debug, Clone)]
pub struct Topology {
    machines: u32,
    processes_per_machine: u32,
    threads_per_process: u32,
}

impl Topology {
    pub fn from_config(cfg: &Config) -> Topology {
        Topology {
            machines: cfg.machines,
            processes_per_machine: cfg.processes_per_machine,
            threads_per_process: cfg.threads_per_process,
        }
    }

    pub fn total_processes(&self) -> u32 {
        self.machines * self.processes_per_machine
    }

    pub fn total_threads(&self) -> u32 {
        self.total_processes() * self.threads_per_process
    }

    pub fn machine_of(&self, process: u32) -> u32 {
        process / self.processes_per_machine
    }

    pub fn process_of(&self, flat: u32) -> u32 {
        flat / self.threads_per_process
    }

    pub fn thread_of(&self, flat: u32) -> u32 {
        flat % self.threads_per_process
    }

    pub fn flat(&self, process: u32, thread: u32) -> u32 {
        process * self.threads_per_process + thread
    }

    pub fn id(&self, flat: u32) -> ThreadId {
        let process = self.process_of(flat);
        ThreadId {
            machine: self.machine_of(process),
            process,
            thread: self.thread_of(flat),
            flat,
        }
    }
}

// ---------------------------------------------------------------- registry

/// An incoming invocation as the handler sees it.
pub struct CallIn<'a> {
    /// Flat id of the calling thread.
    pub src: u32,
    pub context: &'a [u8],
    pub payload: Option<&'a [u8]>,
}

type ProcFn = Arc<dyn Fn(&mut Worker, &CallIn<'_>) + Send + Sync>;
type FuncFn = Arc<dyn Fn(&mut Worker, &CallIn<'_>) -> Vec<u8> + Send + Sync>;

#[derive(Clone)]
enum Handler {
    Proc(ProcFn),
    Func(FuncFn),
}

/// Application function table. Filled before [`launch`] and identical on
/// every process by construction (one registry instance is shared); read-only
/// afterwards.
#[derive(Default)]
pub struct FunctionRegistry {
    map: HashMap<u64, Handler>,
}

impl FunctionRegistry {
    pub fn new() -> FunctionRegistry {
        FunctionRegistry::default()
    }

    /// Register a procedure (no return value) under `fid`.
    pub fn register<F>(&mut self, fid: u64, f: F) -> Result<()>
    where
        F: Fn(&mut Worker, &CallIn<'_>) + Send + Sync + 'static,
    {
        self.insert(fid, Handler::Proc(Arc::new(f)))
    }

    /// Register a function whose byte result can be shipped back by
    /// [`Worker::call_return`].
    pub fn register_func<F>(&mut self, fid: u64, f: F) -> Result<()>
    where
        F: Fn(&mut Worker, &CallIn<'_>) -> Vec<u8> + Send + Sync + 'static,
    {
        self.insert(fid, Handler::Func(Arc::new(f)))
    }

    fn insert(&mut self, fid: u64, h: Handler) -> Result<()> {
        if fid < FID_USER_BASE {
            return Err(Error::Registry(format!(
                "function ids below {FID_USER_BASE} are reserved, got {fid}"
            )));
        }
        if self.map.contains_key(&fid) {
            return Err(Error::Registry(format!("function id {fid} registered twice")));
        }
        self.map.insert(fid, h);
        Ok(())
    }

    fn get(&self, fid: u64) -> Option<Handler> {
        self.map.get(&fid).cloned()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Which transport carries a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    /// Framed SEND routed by the destination's service thread.
    Send,
    /// One-sided ring channel polled by the destination worker.
    Channel,
}

fn path_code(p: Path) -> u32 {
    match p {
        Path::Send => 0,
        Path::Channel => 1,
    }
}

fn path_from(v: u32) -> Result<Path> {
    match v {
        0 => Ok(Path::Send),
        1 => Ok(Path::Channel),
        other => Err(Error::BadRecord(format!("bad path code {other}"))),
    }
}

// ------------------------------------------------------------- wire codecs

fn rd_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn rd_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

struct Frame {
    dest: u32,
    src: u32,
    notify_off: u64,
}

fn frame_bytes(dest: u32, src: u32, notify_off: u64) -> [u8; FRAME_LEN] {
    let mut b = [0u8; FRAME_LEN];
    b[0..4].copy_from_slice(&dest.to_le_bytes());
    b[4..8].copy_from_slice(&src.to_le_bytes());
    b[8..16].copy_from_slice(&notify_off.to_le_bytes());
    b
}

fn parse_frame(b: &[u8]) -> Option<Frame> {
    if b.len() < FRAME_LEN {
        return None;
    }
    Some(Frame { dest: rd_u32(b, 0), src: rd_u32(b, 4), notify_off: rd_u64(b, 8) })
}

const KIND_SETUP: u32 = 0;
const KIND_GROW: u32 = 1;
const ALLOC_WIRE: usize = 48;

/// Chunk-allocation service request: channel setup or in-band ring growth.
struct AllocReq {
    /// `sender_flat << 32 | receiver_flat`.
    key: u64,
    count: u32,
    kind: u32,
    after_index: u32,
    chunk_len: u32,
    reply_region: RegionId,
    /// Writeback cell region, `u32::MAX` when absent (grows).
    wb_region: RegionId,
    reply_offset: u64,
    wb_offset: u64,
}

impl AllocReq {
    fn encode(&self) -> [u8; ALLOC_WIRE] {
        let mut b = [0u8; ALLOC_WIRE];
        b[0..8].copy_from_slice(&self.key.to_le_bytes());
        b[8..12].copy_from_slice(&self.count.to_le_bytes());
        b[12..16].copy_from_slice(&self.kind.to_le_bytes());
        b[16..20].copy_from_slice(&self.after_index.to_le_bytes());
        b[20..24].copy_from_slice(&self.chunk_len.to_le_bytes());
        b[24..28].copy_from_slice(&self.reply_region.to_le_bytes());
        b[28..32].copy_from_slice(&self.wb_region.to_le_bytes());
        b[32..40].copy_from_slice(&self.reply_offset.to_le_bytes());
        b[40..48].copy_from_slice(&self.wb_offset.to_le_bytes());
        b
    }

    fn decode(b: &[u8]) -> Result<AllocReq> {
        if b.len() < ALLOC_WIRE {
            return Err(Error::BadRecord("short chunk-allocation request".into()));
        }
        Ok(AllocReq {
            key: rd_u64(b, 0),
            count: rd_u32(b, 8),
            kind: rd_u32(b, 12),
            after_index: rd_u32(b, 16),
            chunk_len: rd_u32(b, 20),
            reply_region: rd_u32(b, 24),
            wb_region: rd_u32(b, 28),
            reply_offset: rd_u64(b, 32),
            wb_offset: rd_u64(b, 40),
        })
    }
}

// Wrapper records carry the application function id plus routing metadata in
// a fixed prefix of their context; the application context follows.

const NOTE_PREFIX: usize = 16;

/// `[inner fid][synchronizer id]` then user context. The receiver invokes
/// `inner` and notifies the source's synchronizer table.
fn note_ctx(inner: u64, sync_id: u64, user: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(NOTE_PREFIX + user.len());
    v.extend_from_slice(&inner.to_le_bytes());
    v.extend_from_slice(&sync_id.to_le_bytes());
    v.extend_from_slice(user);
    v
}

fn parse_note(ctx: &[u8]) -> Result<(u64, u64, &[u8])> {
    if ctx.len() < NOTE_PREFIX {
        return Err(Error::BadRecord("short notify wrapper".into()));
    }
    Ok((rd_u64(ctx, 0), rd_u64(ctx, 8), &ctx[NOTE_PREFIX..]))
}

const BCAST_PREFIX: usize = 32;

#[derive(Clone, Copy)]
struct BcastHdr {
    inner: u64,
    root: u32,
    arity: u32,
    sync_id: u64,
    path: Path,
}

fn bcast_ctx(h: &BcastHdr, user: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(BCAST_PREFIX + user.len());
    v.extend_from_slice(&h.inner.to_le_bytes());
    v.extend_from_slice(&h.root.to_le_bytes());
    v.extend_from_slice(&h.arity.to_le_bytes());
    v.extend_from_slice(&h.sync_id.to_le_bytes());
    v.extend_from_slice(&path_code(h.path).to_le_bytes());
    v.extend_from_slice(&0u32.to_le_bytes());
    v.extend_from_slice(user);
    v
}

fn parse_bcast(ctx: &[u8]) -> Result<(BcastHdr, &[u8])> {
    if ctx.len() < BCAST_PREFIX {
        return Err(Error::BadRecord("short broadcast wrapper".into()));
    }
    Ok((
        BcastHdr {
            inner: rd_u64(ctx, 0),
            root: rd_u32(ctx, 8),
            arity: rd_u32(ctx, 12),
            sync_id: rd_u64(ctx, 16),
            path: path_from(rd_u32(ctx, 24))?,
        },
        &ctx[BCAST_PREFIX..],
    ))
}

const RET_PREFIX: usize = 32;

#[derive(Clone, Copy)]
struct RetHdr {
    inner: u64,
    region: RegionId,
    cap: u32,
    off: u64,
    /// Status cell offset in the caller's cell region.
    cell: u64,
}

fn ret_ctx(inner: u64, region: RegionId, cap: u32, off: u64, cell: u64, user: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(RET_PREFIX + user.len());
    v.extend_from_slice(&inner.to_le_bytes());
    v.extend_from_slice(&region.to_le_bytes());
    v.extend_from_slice(&cap.to_le_bytes());
    v.extend_from_slice(&off.to_le_bytes());
    v.extend_from_slice(&cell.to_le_bytes());
    v.extend_from_slice(user);
    v
}

fn parse_ret(ctx: &[u8]) -> Result<(RetHdr, &[u8])> {
    if ctx.len() < RET_PREFIX {
        return Err(Error::BadRecord("short return wrapper".into()));
    }
    Ok((
        RetHdr {
            inner: rd_u64(ctx, 0),
            region: rd_u32(ctx, 8),
            cap: rd_u32(ctx, 12),
            off: rd_u64(ctx, 16),
            cell: rd_u64(ctx, 24),
        },
        &ctx[RET_PREFIX..],
    ))
}

const FETCH_PREFIX: usize = 40;

#[derive(Clone, Copy)]
struct FetchHdr {
    inner: u64,
    region: RegionId,
    len: u32,
    off: u64,
    /// Completion cell offset in the caller's cell region.
    done: u64,
    asynchronous: bool,
}

fn fetch_ctx(h: &FetchHdr, user: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(FETCH_PREFIX + user.len());
    v.extend_from_slice(&h.inner.to_le_bytes());
    v.extend_from_slice(&h.region.to_le_bytes());
    v.extend_from_slice(&h.len.to_le_bytes());
    v.extend_from_slice(&h.off.to_le_bytes());
    v.extend_from_slice(&h.done.to_le_bytes());
    v.extend_from_slice(&(h.asynchronous as u32).to_le_bytes());
    v.extend_from_slice(&0u32.to_le_bytes());
    v.extend_from_slice(user);
    v
}

fn parse_fetch(ctx: &[u8]) -> Result<(FetchHdr, &[u8])> {
    if ctx.len() < FETCH_PREFIX {
        return Err(Error::BadRecord("short fetch wrapper".into()));
    }
    Ok((
        FetchHdr {
            inner: rd_u64(ctx, 0),
            region: rd_u32(ctx, 8),
            len: rd_u32(ctx, 12),
            off: rd_u64(ctx, 16),
            done: rd_u64(ctx, 24),
            asynchronous: rd_u32(ctx, 32) != 0,
        },
        &ctx[FETCH_PREFIX..],
    ))
}

const BUFW_PREFIX: usize = 24;

#[derive(Clone, Copy)]
struct BufwHdr {
    inner: u64,
    region: RegionId,
    len: u32,
    off: u64,
}

fn bufw_ctx(inner: u64, region: RegionId, len: u32, off: u64, user: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(BUFW_PREFIX + user.len());
    v.extend_from_slice(&inner.to_le_bytes());
    v.extend_from_slice(&region.to_le_bytes());
    v.extend_from_slice(&len.to_le_bytes());
    v.extend_from_slice(&off.to_le_bytes());
    v.extend_from_slice(user);
    v
}

fn parse_bufw(ctx: &[u8]) -> Result<(BufwHdr, &[u8])> {
    if ctx.len() < BUFW_PREFIX {
        return Err(Error::BadRecord("short buffer-write wrapper".into()));
    }
    Ok((
        BufwHdr {
            inner: rd_u64(ctx, 0),
            region: rd_u32(ctx, 8),
            len: rd_u32(ctx, 12),
            off: rd_u64(ctx, 16),
        },
        &ctx[BUFW_PREFIX..],
    ))
}

// ------------------------------------------------------------ worker state

/// An invocation queued for a worker, either by its service thread or by a
/// same-process caller.
enum Queued {
    Call {
        src: u32,
        notify_off: u64,
        d: DecodedCall,
        /// Consume-mode synchronizer held by a same-process caller; decremented
        /// after the invocation instead of a notification write.
        local_sync: Option<Synchronizer>,
    },
}

/// Channel-structure news pushed by the service thread to the receiving
/// worker: a new inbound channel, or chunks to splice into an existing one.
enum Notice {
    NewChannel {
        sender_flat: u32,
        region: Arc<Region>,
        chunks: Vec<ChunkLoc>,
        writeback: Option<(RegionId, u64)>,
    },
    Grow {
        sender_flat: u32,
        after_index: u32,
        chunks: Vec<ChunkLoc>,
    },
}

struct RChan {
    sender_flat: u32,
    chan: ReceiverChannel,
    stalled_at: Option<Instant>,
}

/// Fixed pool of 8-byte notification cells. A cell is zero while armed; the
/// remote side writes a nonzero status and the sweep recycles it.
struct CellPool {
    block: RegBlock,
    free: Vec<u32>,
}

impl CellPool {
    fn new(block: RegBlock) -> CellPool {
        let n = block.len / 8;
        CellPool { free: (0..n).rev().collect(), block }
    }

    fn take(&mut self) -> Option<u32> {
        self.free.pop()
    }

    fn abs(&self, idx: u32) -> u64 {
        self.block.offset + idx as u64 * 8
    }

    fn value(&self, idx: u32) -> u64 {
        self.block.store().load_acquire_u64(self.abs(idx) as usize)
    }

    fn recycle(&mut self, idx: u32) {
        self.block.store().store_u64(self.abs(idx) as usize, 0);
        self.free.push(idx);
    }
}

struct PendingNotify {
    cell: u32,
    sync: Option<Synchronizer>,
}

#[derive(Default)]
struct ReturnState {
    /// 0 pending, 1 succeeded, 2 failed.
    status: AtomicU64,
    len: AtomicU64,
}

/// Caller-side view of one [`Worker::call_return`]. The result bytes land in
/// the origin block; the ticket reports arrival and length.
pub struct ReturnTicket {
    state: Arc<ReturnState>,
}

impl ReturnTicket {
    pub fn done(&self) -> bool {
        self.state.status.load(Ordering::Acquire) != 0
    }

    /// `None` while pending.
    pub fn succeeded(&self) -> Option<bool> {
        match self.state.status.load(Ordering::Acquire) {
            0 => None,
            1 => Some(true),
            _ => Some(false),
        }
    }

    pub fn value_len(&self) -> u32 {
        self.state.len.load(Ordering::Acquire) as u32
    }
}

struct PendingReply {
    cell: u32,
    sync: Option<Synchronizer>,
    state: Arc<ReturnState>,
}

struct PendingFetch {
    src: u32,
    sproc: u32,
    mark: u64,
    block: Option<RegBlock>,
    inner: u64,
    user: Vec<u8>,
    done: u64,
}

/// Per-process state shared by its workers and service thread.
struct ProcShared {
    topo: Topology,
    cfg: Config,
    machine: Arc<Machine>,
    sim: Simulation,
    registry: Arc<FunctionRegistry>,
    /// Transmitter per destination process; `None` at our own index.
    txs: Vec<Option<Arc<Transmitter<QueuePair>>>>,
    /// Inboxes of this process's workers, by local thread index.
    inboxes: Vec<Arc<Inbox<Queued>>>,
    /// Notification-cell region of every thread in the system, by flat id.
    cell_regions: Vec<RegionId>,
    sync_table: Arc<SyncTable>,
    /// Registered scratch for fetch landings and aggregation spill.
    pool: Arc<GeneralAllocator>,
    done: Arc<AtomicU32>,
    /// Set when any worker errors or panics, so the rest stop waiting on it.
    failed: Arc<AtomicBool>,
    total_workers: u32,
}

// ----------------------------------------------------------------- worker

/// One application thread's handle on the fabric. Not `Send`: it belongs to
/// the thread [`launch`] created it on.
pub struct Worker {
    id: ThreadId,
    shared: Arc<ProcShared>,
    arena: Arc<ZoneArena>,
    inbox: Arc<Inbox<Queued>>,
    notices: Arc<Inbox<Notice>>,
    /// Staging ring per destination process, built on first use. Each ring is
    /// recycled against exactly one transmitter's watermark.
    staging: Vec<Option<Arc<LinearCircularAllocator>>>,
    chans: HashMap<u32, SenderChannel>,
    rchans: Vec<RChan>,
    /// Growth notices that arrived before their channel's first poll.
    pending_splices: HashMap<u32, Vec<(u32, Vec<ChunkLoc>)>>,
    cells: CellPool,
    self_queue: VecDeque<Queued>,
    pending_notifies: Vec<PendingNotify>,
    pending_replies: Vec<PendingReply>,
    pending_fetches: Vec<PendingFetch>,
    agg: Aggregator,
    deadline: Duration,
    invoked: u64,
    forwarded: u64,
    done_marked: bool,
}

fn stage_seg(
    staging: &LinearCircularAllocator,
    tx: &Transmitter<QueuePair>,
    len: u32,
    deadline: Duration,
) -> Result<RegBlock> {
    let t0 = Instant::now();
    loop {
        match staging.alloc(len, &tx.applied_handle()) {
            Ok(seg) => return Ok(seg),
            // every unit in flight: force a signaled completion and retry
            Err(Error::WouldBlock) => {
                tx.flush()?;
                tx.drain();
                if t0.elapsed() > deadline {
                    return Err(Error::Timeout("staging ring recycle"));
                }
                std::thread::yield_now();
            }
            Err(e) => return Err(e),
        }
    }
}

fn transmit_retry(tx: &Transmitter<QueuePair>, op: WorkOp, deadline: Duration) -> Result<u64> {
    let t0 = Instant::now();
    loop {
        match tx.transmit(op) {
            Ok(m) => return Ok(m.0),
            Err(Error::SendBacklog { .. }) => {
                tx.drain();
                if t0.elapsed() > deadline {
                    return Err(Error::Timeout("peer receive backlog"));
                }
                std::thread::yield_now();
            }
            Err(e) => return Err(e),
        }
    }
}

impl Worker {
    fn build(
        flat: u32,
        shared: Arc<ProcShared>,
        arena: Arc<ZoneArena>,
        cells: RegBlock,
        inbox: Arc<Inbox<Queued>>,
        notices: Arc<Inbox<Notice>>,
    ) -> Worker {
        let nproc = shared.topo.total_processes() as usize;
        let deadline = Duration::from_millis(shared.cfg.drain_timeout_ms);
        Worker {
            id: shared.topo.id(flat),
            agg: Aggregator::new(&shared.cfg),
            staging: vec![None; nproc],
            chans: HashMap::new(),
            rchans: Vec::new(),
            pending_splices: HashMap::new(),
            cells: CellPool::new(cells),
            self_queue: VecDeque::new(),
            pending_notifies: Vec::new(),
            pending_replies: Vec::new(),
            pending_fetches: Vec::new(),
            invoked: 0,
            forwarded: 0,
            done_marked: false,
            deadline,
            shared,
            arena,
            inbox,
            notices,
        }
    }

    pub fn id(&self) -> ThreadId {
        self.id
    }

    pub fn flat(&self) -> u32 {
        self.id.flat
    }

    pub fn topology(&self) -> &Topology {
        &self.shared.topo
    }

    pub fn config(&self) -> &Config {
        &self.shared.cfg
    }

    pub fn machine(&self) -> &Arc<Machine> {
        &self.shared.machine
    }

    /// Long-lived registered memory owned by this thread.
    pub fn alloc(&self, len: u32) -> Result<RegBlock> {
        self.arena.alloc(len)
    }

    pub fn synchronizer(&self, mode: SyncMode) -> Synchronizer {
        self.shared.sync_table.create(mode)
    }

    pub fn invoked(&self) -> u64 {
        self.invoked
    }

    pub fn forwarded(&self) -> u64 {
        self.forwarded
    }

    pub fn agg_stats(&self) -> AggStats {
        self.agg.stats()
    }

    fn cfg(&self) -> &Config {
        &self.shared.cfg
    }

    fn tx(&self, process: u32) -> &Arc<Transmitter<QueuePair>> {
        self.shared.txs[process as usize]
            .as_ref()
            .expect("no transmitter to own process")
    }

    fn staging_to(&mut self, process: u32) -> Result<Arc<LinearCircularAllocator>> {
        if self.staging[process as usize].is_none() {
            let ring = CircularAllocator::new(
                self.arena.clone(),
                self.cfg().unit_size,
                self.cfg().ring_initial as usize,
                self.cfg().ring_max as usize,
                self.cfg().ring_growth,
            )?;
            self.staging[process as usize] = Some(Arc::new(LinearCircularAllocator::new(ring)));
        }
        Ok(self.staging[process as usize].as_ref().unwrap().clone())
    }

    // ------------------------------------------------------------ sending

    /// Stage `frame + record` and SEND it to `dest`'s process. `Ok(false)`
    /// means the peer's receive backlog is full.
    fn send_frame(&mut self, dest: u32, notify_off: u64, spec: &RecordSpec) -> Result<bool> {
        let dproc = self.shared.topo.process_of(dest);
        debug_assert_ne!(dproc, self.id.process);
        let total = FRAME_LEN as u32 + spec.encoded_len();
        if total > self.cfg().service_recv_size {
            return Err(Error::Oversize { len: total as u64, cap: self.cfg().service_recv_size as u64 });
        }
        let staging = self.staging_to(dproc)?;
        let tx = self.tx(dproc).clone();
        let seg = stage_seg(&staging, &tx, total, self.deadline)?;
        seg.write(0, &frame_bytes(dest, self.id.flat, notify_off));
        encode_record(seg.store(), seg.offset as usize + FRAME_LEN, spec);
        match tx.transmit(WorkOp::Send { local: seg.local_span() }) {
            Ok(m) => {
                staging.note_posted(m.0);
                Ok(true)
            }
            Err(Error::SendBacklog { .. }) => {
                // the segment was never posted; tag it with the current mark
                // so the ring can recycle it
                staging.note_posted(tx.mark().0);
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    fn send_frame_retry(&mut self, dest: u32, notify_off: u64, spec: &RecordSpec) -> Result<()> {
        let t0 = Instant::now();
        loop {
            if self.send_frame(dest, notify_off, spec)? {
                return Ok(());
            }
            let dproc = self.shared.topo.process_of(dest);
            self.tx(dproc).drain();
            if t0.elapsed() > self.deadline {
                return Err(Error::Timeout("peer receive backlog"));
            }
            std::thread::yield_now();
        }
    }

    /// One-sided write of a single word into a remote process.
    fn post_value(&mut self, dproc: u32, region: RegionId, off: u64, value: u64) -> Result<()> {
        let staging = self.staging_to(dproc)?;
        let tx = self.tx(dproc).clone();
        let seg = stage_seg(&staging, &tx, 8, self.deadline)?;
        seg.write(0, &value.to_le_bytes());
        let m = transmit_retry(
            &tx,
            WorkOp::Write { local: seg.local_span(), remote: RemoteSpan { region, offset: off } },
            self.deadline,
        )?;
        staging.note_posted(m);
        Ok(())
    }

    /// Write `value` into a notification cell of thread `owner`.
    fn post_cell(&mut self, owner: u32, cell_off: u64, value: u64) -> Result<()> {
        let region = self.shared.cell_regions[owner as usize];
        let oproc = self.shared.topo.process_of(owner);
        if oproc == self.id.process {
            let r = self
                .shared
                .machine
                .region(region)
                .ok_or_else(|| Error::ChannelFault("cell region vanished".into()))?;
            r.store().store_u64(cell_off as usize, value);
            return Ok(());
        }
        self.post_value(oproc, region, cell_off, value)
    }

    /// Credit synchronizer `sync_id` owned by thread `owner`.
    fn notify_sync(&mut self, owner: u32, sync_id: u64, delta: i64) -> Result<()> {
        if sync_id == 0 {
            return Ok(());
        }
        if self.shared.topo.process_of(owner) == self.id.process {
            self.shared.sync_table.apply(sync_id, delta);
            return Ok(());
        }
        let ctx = encode_notify(sync_id, delta);
        let spec = RecordSpec { function: FID_SYNC_NOTIFY, context: &ctx, payload: None };
        self.send_frame_retry(owner, NO_NOTIFY, &spec)
    }

    fn route_local(&mut self, dest: u32, q: Queued) {
        if dest == self.id.flat {
            self.self_queue.push_back(q);
            return;
        }
        let lt = self.shared.topo.thread_of(dest) as usize;
        self.shared.inboxes[lt].push(q);
    }

    fn take_cell(&mut self) -> Result<u32> {
        let t0 = Instant::now();
        loop {
            if let Some(i) = self.cells.take() {
                return Ok(i);
            }
            self.sweep_cells();
            self.drain_txs();
            if t0.elapsed() > self.deadline {
                return Err(Error::Timeout("notification cells"));
            }
            std::thread::yield_now();
        }
    }

    fn drain_txs(&self) {
        for tx in self.shared.txs.iter().flatten() {
            tx.drain();
        }
    }

    // ------------------------------------------------------------ channels

    /// Build the one-sided channel to `dest` if it does not exist yet: carve
    /// the writeback cell and growth-reply block, ask `dest`'s service thread
    /// for chunks, and wait for the locations to land.
    fn ensure_channel(&mut self, dest: u32) -> Result<()> {
        if self.chans.contains_key(&dest) {
            return Ok(());
        }
        let dproc = self.shared.topo.process_of(dest);
        debug_assert_ne!(dproc, self.id.process);
        let wb = self.arena.alloc(8)?;
        wb.store().store_u64(wb.offset as usize, 0);
        let reply = self.arena.alloc(REPLY_BLOCK_LEN)?;
        reply.store().fill_zero(reply.offset as usize, REPLY_BLOCK_LEN as usize);
        let key = ((self.id.flat as u64) << 32) | dest as u64;
        let req = AllocReq {
            key,
            count: self.cfg().c,
            kind: KIND_SETUP,
            after_index: 0,
            chunk_len: self.cfg().chunk_size,
            reply_region: reply.region.id,
            wb_region: wb.region.id,
            reply_offset: reply.offset,
            wb_offset: wb.offset,
        };
        let ctx = req.encode();
        let spec = RecordSpec { function: FID_ALLOC_CHUNKS, context: &ctx, payload: None };
        self.send_frame_retry(dest, NO_NOTIFY, &spec)?;
        let chunks = self.await_reply(&reply, dproc)?;
        if chunks.is_empty() {
            return Err(Error::Alloc("channel chunks"));
        }
        let staging = self.staging_to(dproc)?;
        let tx = self.tx(dproc).clone();

        // growth requests ride the send path with the same framing
        let gtx = tx.clone();
        let gstaging = staging.clone();
        let gsrc = self.id.flat;
        let gdeadline = self.deadline;
        let gchunk = self.cfg().chunk_size;
        let grow: GrowFn = Box::new(move |g: &GrowRequest| {
            let req = AllocReq {
                key: g.channel_key,
                count: g.count,
                kind: KIND_GROW,
                after_index: g.after_index,
                chunk_len: gchunk,
                reply_region: g.reply_region,
                wb_region: u32::MAX,
                reply_offset: g.reply_offset,
                wb_offset: 0,
            };
            let ctx = req.encode();
            let spec = RecordSpec { function: FID_ALLOC_CHUNKS, context: &ctx, payload: None };
            let total = FRAME_LEN as u32 + spec.encoded_len();
            let seg = stage_seg(&gstaging, &gtx, total, gdeadline)?;
            seg.write(0, &frame_bytes(dest, gsrc, NO_NOTIFY));
            encode_record(seg.store(), seg.offset as usize + FRAME_LEN, &spec);
            let m = transmit_retry(&gtx, WorkOp::Send { local: seg.local_span() }, gdeadline)?;
            gstaging.note_posted(m);
            Ok(())
        });
        let chan = SenderChannel::new(
            tx,
            staging,
            chunks,
            wb,
            reply,
            key,
            self.cfg().c_max as usize,
            grow,
        );
        self.chans.insert(dest, chan);
        Ok(())
    }

    fn await_reply(&self, reply: &RegBlock, dproc: u32) -> Result<Vec<ChunkLoc>> {
        let t0 = Instant::now();
        let tx = self.tx(dproc);
        loop {
            if let Some(chunks) = parse_grow_reply(reply.store(), reply.offset as usize) {
                reply.store().fill_zero(reply.offset as usize, REPLY_BLOCK_LEN as usize);
                return Ok(chunks);
            }
            tx.drain();
            if t0.elapsed() > self.deadline {
                return Err(Error::Timeout("channel setup reply"));
            }
            std::thread::yield_now();
        }
    }

    // ----------------------------------------------------- call primitives

    /// Invoke `fid` on thread `dest` over the send path. `Ok(false)` means
    /// back-pressure; nothing was sent and no synchronizer state changed.
    pub fn call(&mut self, dest: u32, fid: u64, ctx: &[u8], sync: Option<&Synchronizer>) -> Result<bool> {
        self.invoke_at(Path::Send, dest, fid, ctx, None, sync)
    }

    pub fn call_via(
        &mut self,
        path: Path,
        dest: u32,
        fid: u64,
        ctx: &[u8],
        sync: Option<&Synchronizer>,
    ) -> Result<bool> {
        self.invoke_at(path, dest, fid, ctx, None, sync)
    }

    /// Invoke `fid` with an inline payload the destination sees as a fully
    /// placed buffer.
    pub fn call_buffer(
        &mut self,
        dest: u32,
        fid: u64,
        ctx: &[u8],
        payload: &[u8],
        sync: Option<&Synchronizer>,
    ) -> Result<bool> {
        self.invoke_at(Path::Send, dest, fid, ctx, Some(payload), sync)
    }

    pub fn call_buffer_via(
        &mut self,
        path: Path,
        dest: u32,
        fid: u64,
        ctx: &[u8],
        payload: &[u8],
        sync: Option<&Synchronizer>,
    ) -> Result<bool> {
        self.invoke_at(path, dest, fid, ctx, Some(payload), sync)
    }

    fn check_user_fid(fid: u64) -> Result<()> {
        if fid < FID_USER_BASE {
            return Err(Error::Registry(format!(
                "application calls use ids >= {FID_USER_BASE}, got {fid}"
            )));
        }
        Ok(())
    }

    fn invoke_at(
        &mut self,
        path: Path,
        dest: u32,
        fid: u64,
        ctx: &[u8],
        payload: Option<&[u8]>,
        sync: Option<&Synchronizer>,
    ) -> Result<bool> {
        Self::check_user_fid(fid)?;
        let dproc = self.shared.topo.process_of(dest);
        if dproc == self.id.process {
            // in-process: straight into the destination queue; transmit-mode
            // synchronizers see an immediate transmit and stay untouched
            let local_sync = match sync {
                Some(s) if s.mode() == SyncMode::OnRemoteConsume => {
                    s.add(1);
                    Some(s.clone())
                }
                _ => None,
            };
            let d = DecodedCall {
                function: fid,
                context: ctx.to_vec(),
                payload: payload.map(|p| p.to_vec()),
                total: RecordSpec { function: fid, context: ctx, payload }.encoded_len(),
            };
            self.route_local(dest, Queued::Call { src: self.id.flat, notify_off: NO_NOTIFY, d, local_sync });
            return Ok(true);
        }
        match path {
            Path::Send => {
                let orc = matches!(sync, Some(s) if s.mode() == SyncMode::OnRemoteConsume);
                let cell = if orc { Some(self.take_cell()?) } else { None };
                let notify_off = cell.map_or(NO_NOTIFY, |i| self.cells.abs(i));
                let spec = RecordSpec { function: fid, context: ctx, payload };
                let ok = self.send_frame(dest, notify_off, &spec)?;
                if ok {
                    if let Some(s) = sync {
                        s.add(1);
                        match s.mode() {
                            SyncMode::OnRemoteConsume => self
                                .pending_notifies
                                .push(PendingNotify { cell: cell.unwrap(), sync: Some(s.clone()) }),
                            SyncMode::OnTransmit => {
                                let tx = self.tx(dproc);
                                s.track(tx.applied_handle(), tx.mark().0);
                            }
                        }
                    }
                } else if let Some(i) = cell {
                    self.cells.recycle(i);
                }
                Ok(ok)
            }
            Path::Channel => {
                self.ensure_channel(dest)?;
                let orc = matches!(sync, Some(s) if s.mode() == SyncMode::OnRemoteConsume);
                let wrapped;
                let spec = if orc {
                    wrapped = note_ctx(fid, sync.unwrap().id(), ctx);
                    RecordSpec { function: FID_CALL_NOTE, context: &wrapped, payload }
                } else {
                    RecordSpec { function: fid, context: ctx, payload }
                };
                let chan = self.chans.get_mut(&dest).expect("channel just built");
                let ok = chan.send(&spec)?;
                if ok {
                    if let Some(s) = sync {
                        s.add(1);
                        if s.mode() == SyncMode::OnTransmit {
                            let tx = chan.tx();
                            s.track(tx.applied_handle(), tx.mark().0);
                        }
                    }
                }
                Ok(ok)
            }
        }
    }

    /// Write `src` into the pre-arranged destination buffer `dst` (registered
    /// on `dest`'s machine), then invoke `fid` with a view of those bytes.
    /// The record travels behind the write on the same queue pair, so the
    /// handler always sees the buffer complete. Applies back-pressure by
    /// waiting: once the payload write is posted the record must follow.
    pub fn call_buffer_put(
        &mut self,
        path: Path,
        dest: u32,
        fid: u64,
        ctx: &[u8],
        src: &RegBlock,
        dst: RemoteSpan,
        sync: Option<&Synchronizer>,
    ) -> Result<bool> {
        Self::check_user_fid(fid)?;
        let dproc = self.shared.topo.process_of(dest);
        let wrapped = bufw_ctx(fid, dst.region, src.len, dst.offset, ctx);
        if dproc == self.id.process {
            let r = self.shared.machine.region(dst.region).ok_or(Error::OutOfRange {
                region: dst.region,
                offset: dst.offset,
                len: src.len as u64,
                cap: 0,
            })?;
            if dst.offset + src.len as u64 > r.len() {
                return Err(Error::OutOfRange {
                    region: dst.region,
                    offset: dst.offset,
                    len: src.len as u64,
                    cap: r.len(),
                });
            }
            r.store().write(dst.offset as usize, &src.to_vec());
            let local_sync = match sync {
                Some(s) if s.mode() == SyncMode::OnRemoteConsume => {
                    s.add(1);
                    Some(s.clone())
                }
                _ => None,
            };
            let d = DecodedCall {
                function: FID_BUF_WRITE,
                context: wrapped.clone(),
                payload: None,
                total: RecordSpec { function: FID_BUF_WRITE, context: &wrapped, payload: None }
                    .encoded_len(),
            };
            self.route_local(dest, Queued::Call { src: self.id.flat, notify_off: NO_NOTIFY, d, local_sync });
            return Ok(true);
        }
        // validate the landing zone before anything is posted
        let rm = self.shared.sim.machine(self.shared.topo.machine_of(dproc));
        let r = rm.region(dst.region).ok_or(Error::OutOfRange {
            region: dst.region,
            offset: dst.offset,
            len: src.len as u64,
            cap: 0,
        })?;
        if dst.offset + src.len as u64 > r.len() {
            return Err(Error::OutOfRange {
                region: dst.region,
                offset: dst.offset,
                len: src.len as u64,
                cap: r.len(),
            });
        }
        let tx = self.tx(dproc).clone();
        transmit_retry(&tx, WorkOp::Write { local: src.local_span(), remote: dst }, self.deadline)?;
        match path {
            Path::Send => {
                let orc = matches!(sync, Some(s) if s.mode() == SyncMode::OnRemoteConsume);
                let cell = if orc { Some(self.take_cell()?) } else { None };
                let notify_off = cell.map_or(NO_NOTIFY, |i| self.cells.abs(i));
                let spec = RecordSpec { function: FID_BUF_WRITE, context: &wrapped, payload: None };
                self.send_frame_retry(dest, notify_off, &spec)?;
                if let Some(s) = sync {
                    s.add(1);
                    match s.mode() {
                        SyncMode::OnRemoteConsume => self
                            .pending_notifies
                            .push(PendingNotify { cell: cell.unwrap(), sync: Some(s.clone()) }),
                        SyncMode::OnTransmit => s.track(tx.applied_handle(), tx.mark().0),
                    }
                }
            }
            Path::Channel => {
                self.ensure_channel(dest)?;
                let orc = matches!(sync, Some(s) if s.mode() == SyncMode::OnRemoteConsume);
                let noted;
                let spec = if orc {
                    noted = note_ctx(FID_BUF_WRITE, sync.unwrap().id(), &wrapped);
                    RecordSpec { function: FID_CALL_NOTE, context: &noted, payload: None }
                } else {
                    RecordSpec { function: FID_BUF_WRITE, context: &wrapped, payload: None }
                };
                let t0 = Instant::now();
                loop {
                    let chan = self.chans.get_mut(&dest).expect("channel just built");
                    if chan.send(&spec)? {
                        break;
                    }
                    self.progress()?;
                    if t0.elapsed() > self.deadline {
                        return Err(Error::Timeout("channel accept"));
                    }
                    std::thread::yield_now();
                }
                if let Some(s) = sync {
                    s.add(1);
                    if s.mode() == SyncMode::OnTransmit {
                        s.track(tx.applied_handle(), tx.mark().0);
                    }
                }
            }
        }
        Ok(true)
    }

    /// Ask `dest` to pull `src` with a one-sided read and invoke `fid` over
    /// the pulled bytes, synchronously or in a later progress pass. `src`
    /// must stay untouched until the fetch completes (the synchronizer or a
    /// subsequent quiesce reports that).
    pub fn call_fetch(
        &mut self,
        path: Path,
        dest: u32,
        fid: u64,
        ctx: &[u8],
        src: &RegBlock,
        asynchronous: bool,
        sync: Option<&Synchronizer>,
    ) -> Result<bool> {
        Self::check_user_fid(fid)?;
        let dproc = self.shared.topo.process_of(dest);
        if dproc == self.id.process {
            // nothing to pull across the wire; degenerates to an inline buffer
            let bytes = src.to_vec();
            return self.invoke_at(Path::Send, dest, fid, ctx, Some(&bytes), sync);
        }
        let cell = self.take_cell()?;
        let hdr = FetchHdr {
            inner: fid,
            region: src.region.id,
            len: src.len,
            off: src.offset,
            done: self.cells.abs(cell),
            asynchronous,
        };
        let wrapped = fetch_ctx(&hdr, ctx);
        let spec = RecordSpec { function: FID_FETCH_INVOKE, context: &wrapped, payload: None };
        let ok = match path {
            Path::Send => self.send_frame(dest, NO_NOTIFY, &spec)?,
            Path::Channel => {
                self.ensure_channel(dest)?;
                self.chans.get_mut(&dest).expect("channel just built").send(&spec)?
            }
        };
        if !ok {
            self.cells.recycle(cell);
            return Ok(false);
        }
        let watcher = match sync {
            Some(s) => {
                s.add(1);
                match s.mode() {
                    SyncMode::OnRemoteConsume => Some(s.clone()),
                    SyncMode::OnTransmit => {
                        let tx = self.tx(dproc);
                        s.track(tx.applied_handle(), tx.mark().0);
                        None
                    }
                }
            }
            None => None,
        };
        self.pending_notifies.push(PendingNotify { cell, sync: watcher });
        Ok(true)
    }

    /// Invoke a registered returning function on `dest`; its byte result is
    /// written back into `origin`. The ticket reports completion, success and
    /// result length; the synchronizer (either mode) fires only after the
    /// write-back has landed.
    pub fn call_return(
        &mut self,
        path: Path,
        dest: u32,
        fid: u64,
        ctx: &[u8],
        origin: &RegBlock,
        sync: Option<&Synchronizer>,
    ) -> Result<Option<ReturnTicket>> {
        Self::check_user_fid(fid)?;
        let dproc = self.shared.topo.process_of(dest);
        let cell = self.take_cell()?;
        let wrapped = ret_ctx(fid, origin.region.id, origin.len, origin.offset, self.cells.abs(cell), ctx);
        let ok = if dproc == self.id.process {
            let d = DecodedCall {
                function: FID_CALL_RETURN,
                context: wrapped.clone(),
                payload: None,
                total: RecordSpec { function: FID_CALL_RETURN, context: &wrapped, payload: None }
                    .encoded_len(),
            };
            self.route_local(dest, Queued::Call { src: self.id.flat, notify_off: NO_NOTIFY, d, local_sync: None });
            true
        } else {
            let spec = RecordSpec { function: FID_CALL_RETURN, context: &wrapped, payload: None };
            match path {
                Path::Send => self.send_frame(dest, NO_NOTIFY, &spec)?,
                Path::Channel => {
                    self.ensure_channel(dest)?;
                    self.chans.get_mut(&dest).expect("channel just built").send(&spec)?
                }
            }
        };
        if !ok {
            self.cells.recycle(cell);
            return Ok(None);
        }
        if let Some(s) = sync {
            s.add(1);
        }
        let state = Arc::new(ReturnState::default());
        self.pending_replies.push(PendingReply {
            cell,
            sync: sync.cloned(),
            state: state.clone(),
        });
        Ok(Some(ReturnTicket { state }))
    }

    /// Invoke `fid` exactly once on every thread, the caller included,
    /// propagating along a tree of the given arity over flat ids.
    pub fn broadcast(&mut self, fid: u64, ctx: &[u8], sync: Option<&Synchronizer>) -> Result<bool> {
        self.broadcast_tree(Path::Send, 2, fid, ctx, None, sync)
    }

    pub fn broadcast_buffer(
        &mut self,
        fid: u64,
        ctx: &[u8],
        payload: &[u8],
        sync: Option<&Synchronizer>,
    ) -> Result<bool> {
        self.broadcast_tree(Path::Send, 2, fid, ctx, Some(payload), sync)
    }

    pub fn broadcast_tree(
        &mut self,
        path: Path,
        arity: u32,
        fid: u64,
        ctx: &[u8],
        payload: Option<&[u8]>,
        sync: Option<&Synchronizer>,
    ) -> Result<bool> {
        Self::check_user_fid(fid)?;
        assert!(arity >= 1, "broadcast tree arity must be at least 1");
        let t = self.shared.topo.total_threads();
        let root = self.id.flat;
        // consume-mode: every thread credits the root's synchronizer after
        // invoking; transmit-mode: count this node's own child transmissions
        let (sync_id, transmit_sync) = match sync {
            None => (0, None),
            Some(s) if s.mode() == SyncMode::OnRemoteConsume => {
                s.add(t as i64);
                (s.id(), None)
            }
            Some(s) => (0, Some(s.clone())),
        };
        let hdr = BcastHdr { inner: fid, root, arity, sync_id, path };
        let full = bcast_ctx(&hdr, ctx);
        self.forward_children(&hdr, &full, payload, transmit_sync.as_ref())?;
        // local delivery, via the queue like everything else
        let d = if sync_id != 0 {
            let noted = note_ctx(fid, sync_id, ctx);
            DecodedCall {
                function: FID_CALL_NOTE,
                context: noted.clone(),
                payload: payload.map(|p| p.to_vec()),
                total: RecordSpec { function: FID_CALL_NOTE, context: &noted, payload }.encoded_len(),
            }
        } else {
            DecodedCall {
                function: fid,
                context: ctx.to_vec(),
                payload: payload.map(|p| p.to_vec()),
                total: RecordSpec { function: fid, context: ctx, payload }.encoded_len(),
            }
        };
        self.self_queue.push_back(Queued::Call {
            src: root,
            notify_off: NO_NOTIFY,
            d,
            local_sync: None,
        });
        Ok(true)
    }

    /// Send the tree children their copies. Positions are virtual: node `v`
    /// in a tree rooted at 0 maps to flat id `(v + root) % t`.
    fn forward_children(
        &mut self,
        h: &BcastHdr,
        full_ctx: &[u8],
        payload: Option<&[u8]>,
        transmit_sync: Option<&Synchronizer>,
    ) -> Result<u32> {
        let t = self.shared.topo.total_threads();
        let v = (self.id.flat + t - h.root) % t;
        let mut sent = 0;
        for k in 1..=h.arity {
            let c = v as u64 * h.arity as u64 + k as u64;
            if c >= t as u64 {
                break;
            }
            let real = (c as u32 + h.root) % t;
            let dproc = self.shared.topo.process_of(real);
            if dproc == self.id.process {
                let d = DecodedCall {
                    function: FID_BCAST,
                    context: full_ctx.to_vec(),
                    payload: payload.map(|p| p.to_vec()),
                    total: RecordSpec { function: FID_BCAST, context: full_ctx, payload }.encoded_len(),
                };
                self.route_local(real, Queued::Call {
                    src: self.id.flat,
                    notify_off: NO_NOTIFY,
                    d,
                    local_sync: None,
                });
            } else {
                let spec = RecordSpec { function: FID_BCAST, context: full_ctx, payload };
                match h.path {
                    Path::Send => self.send_frame_retry(real, NO_NOTIFY, &spec)?,
                    Path::Channel => {
                        self.ensure_channel(real)?;
                        let t0 = Instant::now();
                        loop {
                            let chan = self.chans.get_mut(&real).expect("channel just built");
                            if chan.send(&spec)? {
                                break;
                            }
                            self.progress()?;
                            if t0.elapsed() > self.deadline {
                                return Err(Error::Timeout("channel accept"));
                            }
                            std::thread::yield_now();
                        }
                    }
                }
                if let Some(s) = transmit_sync {
                    s.add(1);
                    let tx = self.tx(dproc);
                    s.track(tx.applied_handle(), tx.mark().0);
                }
            }
            sent += 1;
        }
        self.forwarded += sent as u64;
        Ok(sent)
    }

    // ---------------------------------------------------------- aggregation

    /// Invoke through the per-destination aggregator over the channel path.
    /// `Ok(false)` means the batching layer cannot take the record right now.
    pub fn agg_call(
        &mut self,
        dest: u32,
        fid: u64,
        ctx: &[u8],
        payload: Option<&[u8]>,
        sync: Option<&Synchronizer>,
    ) -> Result<bool> {
        Self::check_user_fid(fid)?;
        let dproc = self.shared.topo.process_of(dest);
        if dproc == self.id.process {
            return self.invoke_at(Path::Send, dest, fid, ctx, payload, sync);
        }
        self.ensure_channel(dest)?;
        let orc = matches!(sync, Some(s) if s.mode() == SyncMode::OnRemoteConsume);
        let wrapped;
        let spec = if orc {
            wrapped = note_ctx(fid, sync.unwrap().id(), ctx);
            RecordSpec { function: FID_CALL_NOTE, context: &wrapped, payload }
        } else {
            RecordSpec { function: fid, context: ctx, payload }
        };
        let staging = self.staging[dproc as usize].as_ref().expect("channel implies staging").clone();
        let chan = self.chans.get_mut(&dest).expect("channel just built");
        let ok = self.agg.call(dest, chan, &staging, &self.shared.pool, &spec)?;
        if ok {
            if let Some(s) = sync {
                s.add(1);
                if s.mode() == SyncMode::OnTransmit {
                    let tx = chan.tx();
                    s.track(tx.applied_handle(), tx.mark().0);
                }
            }
        }
        Ok(ok)
    }

    /// One flush attempt. `Ok(true)` when nothing stayed buffered.
    pub fn agg_flush(&mut self, dest: Option<u32>) -> Result<bool> {
        let dests = match dest {
            Some(d) => vec![d],
            None => self.agg.pending_dests(),
        };
        let mut done = true;
        for d in dests {
            if let Some(chan) = self.chans.get_mut(&d) {
                done &= self.agg.flush_dest(d, chan, &self.shared.pool)?;
            }
        }
        Ok(done)
    }

    /// Flush until every batch and spill has entered its channel.
    pub fn flush_aggregated(&mut self) -> Result<()> {
        let t0 = Instant::now();
        loop {
            if self.agg_flush(None)? {
                return Ok(());
            }
            self.progress()?;
            if t0.elapsed() > self.deadline {
                return Err(Error::Timeout("aggregator flush"));
            }
            std::thread::yield_now();
        }
    }

    // ------------------------------------------------------------ receiving

    /// Run one round of everything this thread owes the fabric: splice
    /// notices, queued invocations, channel polls, notification sweeps, and
    /// completion drains. Returns how many items moved.
    pub fn progress(&mut self) -> Result<u64> {
        if self.shared.failed.load(Ordering::Acquire) {
            return Err(Error::ChannelFault("a peer worker failed".into()));
        }
        let mut work = 0;
        let notices = self.notices.clone();
        while let Some(n) = notices.try_pop() {
            self.apply_notice(n);
            work += 1;
        }
        while let Some(q) = self.self_queue.pop_front() {
            self.dispatch(q)?;
            work += 1;
        }
        let inbox = self.inbox.clone();
        while let Some(q) = inbox.try_pop() {
            self.dispatch(q)?;
            work += 1;
            // run follow-up self calls in order before the next inbound one
            while let Some(sq) = self.self_queue.pop_front() {
                self.dispatch(sq)?;
                work += 1;
            }
        }
        work += self.poll_channels()?;
        work += self.sweep_cells();
        work += self.sweep_fetches()?;
        self.drain_txs();
        Ok(work)
    }

    /// Spin [`Worker::progress`] until the synchronizer balances.
    pub fn wait(&mut self, sync: &Synchronizer) -> Result<()> {
        let t0 = Instant::now();
        loop {
            if sync.balance() == 0 {
                return Ok(());
            }
            self.progress()?;
            if t0.elapsed() > self.deadline {
                return Err(Error::Timeout("synchronizer"));
            }
            std::thread::yield_now();
        }
    }

    fn apply_notice(&mut self, n: Notice) {
        match n {
            Notice::NewChannel { sender_flat, region, chunks, writeback } => {
                if self.rchans.iter().any(|r| r.sender_flat == sender_flat) {
                    return;
                }
                let chan = ReceiverChannel::new(region, chunks, sender_flat as u64, writeback);
                self.rchans.push(RChan { sender_flat, chan, stalled_at: None });
            }
            Notice::Grow { sender_flat, after_index, chunks } => {
                if let Some(rc) = self.rchans.iter_mut().find(|r| r.sender_flat == sender_flat) {
                    rc.chan.splice(after_index as usize, chunks);
                } else {
                    self.pending_splices.entry(sender_flat).or_default().push((after_index, chunks));
                }
            }
        }
    }

    fn poll_channels(&mut self) -> Result<u64> {
        if self.rchans.is_empty() && self.pending_splices.is_empty() {
            return Ok(0);
        }
        let mut rcs = std::mem::take(&mut self.rchans);
        let mut work = 0;
        let mut first_err = None;
        'chans: for rc in rcs.iter_mut() {
            if rc.chan.is_done() {
                continue;
            }
            if let Some(list) = self.pending_splices.remove(&rc.sender_flat) {
                for (after, fresh) in list {
                    rc.chan.splice(after as usize, fresh);
                }
            }
            loop {
                let sender = rc.sender_flat;
                let sproc = self.shared.topo.process_of(sender);
                let polled = {
                    let target = rc.chan.writeback_target();
                    let staging = match self.staging_to(sproc) {
                        Ok(s) => s,
                        Err(e) => {
                            first_err.get_or_insert(e);
                            break 'chans;
                        }
                    };
                    let tx = self.tx(sproc).clone();
                    let deadline = self.deadline;
                    let mut push = |consumed: u64| -> Result<()> {
                        let Some((region, off)) = target else { return Ok(()) };
                        let seg = stage_seg(&staging, &tx, 8, deadline)?;
                        seg.write(0, &consumed.to_le_bytes());
                        let m = transmit_retry(
                            &tx,
                            WorkOp::Write {
                                local: seg.local_span(),
                                remote: RemoteSpan { region, offset: off },
                            },
                            deadline,
                        )?;
                        staging.note_posted(m);
                        Ok(())
                    };
                    rc.chan.poll(&mut push)
                };
                match polled {
                    Ok(Polled::Record(d)) => {
                        rc.stalled_at = None;
                        self.dispatch_call(sender, NO_NOTIFY, d, None)?;
                        work += 1;
                    }
                    Ok(Polled::Shutdown) => {
                        rc.stalled_at = None;
                        work += 1;
                        break;
                    }
                    Ok(Polled::Empty) | Ok(Polled::Partial) => {
                        rc.stalled_at = None;
                        break;
                    }
                    Ok(Polled::Stalled) => {
                        // the sender grew the ring; the splice notice is still
                        // in flight, absorb notices and retry
                        let since = *rc.stalled_at.get_or_insert_with(Instant::now);
                        if since.elapsed() > self.deadline {
                            first_err.get_or_insert(Error::ChannelFault(format!(
                                "ring splice from thread {sender} never arrived"
                            )));
                            break 'chans;
                        }
                        let notices = self.notices.clone();
                        let mut spliced = false;
                        while let Some(n) = notices.try_pop() {
                            match n {
                                Notice::Grow { sender_flat, after_index, chunks }
                                    if sender_flat == sender =>
                                {
                                    rc.chan.splice(after_index as usize, chunks);
                                    spliced = true;
                                }
                                other => self.apply_notice(other),
                            }
                        }
                        if !spliced {
                            break;
                        }
                    }
                    Err(e) => {
                        first_err.get_or_insert(e);
                        break 'chans;
                    }
                }
            }
        }
        // channels announced while we were polling
        let mut late = std::mem::take(&mut self.rchans);
        rcs.append(&mut late);
        self.rchans = rcs;
        match first_err {
            Some(e) => Err(e),
            None => Ok(work),
        }
    }

    fn dispatch(&mut self, q: Queued) -> Result<()> {
        match q {
            Queued::Call { src, notify_off, d, local_sync } => {
                self.dispatch_call(src, notify_off, d, local_sync)
            }
        }
    }

    fn dispatch_call(
        &mut self,
        src: u32,
        notify_off: u64,
        d: DecodedCall,
        local_sync: Option<Synchronizer>,
    ) -> Result<()> {
        match d.function {
            FID_BCAST => self.on_bcast(src, &d)?,
            FID_CALL_RETURN => self.on_call_return(src, &d)?,
            FID_FETCH_INVOKE => self.on_fetch(src, &d)?,
            FID_CALL_NOTE => self.on_note(src, &d)?,
            FID_BUF_WRITE => self.on_buf_write(src, &d)?,
            f if f >= FID_USER_BASE => {
                self.invoke_user(f, src, &d.context, d.payload.as_deref())?;
            }
            other => {
                return Err(Error::BadRecord(format!(
                    "unroutable function id {other} from thread {src}"
                )))
            }
        }
        if let Some(s) = local_sync {
            s.sub(1);
        }
        if notify_off != NO_NOTIFY {
            self.post_cell(src, notify_off, 1)?;
        }
        Ok(())
    }

    fn invoke_user(&mut self, fid: u64, src: u32, ctx: &[u8], payload: Option<&[u8]>) -> Result<()> {
        let h = self.shared.registry.get(fid).ok_or(Error::UnknownFunction(fid))?;
        let call = CallIn { src, context: ctx, payload };
        self.invoked += 1;
        match h {
            Handler::Proc(f) => f(self, &call),
            Handler::Func(f) => {
                let _ = f(self, &call);
            }
        }
        Ok(())
    }

    fn on_note(&mut self, src: u32, d: &DecodedCall) -> Result<()> {
        let (inner, sync_id, user) = parse_note(&d.context)?;
        let d2 = DecodedCall {
            function: inner,
            context: user.to_vec(),
            payload: d.payload.clone(),
            total: d.total,
        };
        // re-dispatch so wrapped records (buffer writes) keep their meaning
        self.dispatch_call(src, NO_NOTIFY, d2, None)?;
        self.notify_sync(src, sync_id, 1)
    }

    fn on_buf_write(&mut self, src: u32, d: &DecodedCall) -> Result<()> {
        let (h, user) = parse_bufw(&d.context)?;
        let r = self
            .shared
            .machine
            .region(h.region)
            .ok_or_else(|| Error::BadRecord(format!("buffer region {} unknown here", h.region)))?;
        if h.off + h.len as u64 > r.len() {
            return Err(Error::BadRecord("buffer span out of range".into()));
        }
        let bytes = r.store().to_vec(h.off as usize, h.len as usize);
        self.invoke_user(h.inner, src, user, Some(&bytes))
    }

    fn on_bcast(&mut self, src: u32, d: &DecodedCall) -> Result<()> {
        let (h, user) = parse_bcast(&d.context)?;
        self.forward_children(&h, &d.context, d.payload.as_deref(), None)?;
        self.invoke_user(h.inner, src, user, d.payload.as_deref())?;
        self.notify_sync(h.root, h.sync_id, 1)
    }

    fn on_call_return(&mut self, src: u32, d: &DecodedCall) -> Result<()> {
        let (h, user) = parse_ret(&d.context)?;
        let sproc = self.shared.topo.process_of(src);
        let mut value = Vec::new();
        let mut failed = false;
        match self.shared.registry.get(h.inner) {
            Some(Handler::Func(f)) => {
                let call = CallIn { src, context: user, payload: d.payload.as_deref() };
                self.invoked += 1;
                value = f(self, &call);
                if value.len() as u64 > h.cap as u64 {
                    failed = true;
                }
            }
            // a plain procedure has no bytes to return
            Some(Handler::Proc(_)) | None => failed = true,
        }
        if !failed && !value.is_empty() {
            // validate the origin before posting; a bad locator must surface
            // as a failed status, not a transport fault
            let origin_machine = self.shared.sim.machine(self.shared.topo.machine_of(sproc));
            match origin_machine.region(h.region) {
                Some(r) if h.off + value.len() as u64 <= r.len() => {
                    if sproc == self.id.process {
                        r.store().write(h.off as usize, &value);
                    } else {
                        let staging = self.staging_to(sproc)?;
                        let tx = self.tx(sproc).clone();
                        let seg = stage_seg(&staging, &tx, value.len() as u32, self.deadline)?;
                        seg.write(0, &value);
                        let m = transmit_retry(
                            &tx,
                            WorkOp::Write {
                                local: seg.local_span(),
                                remote: RemoteSpan { region: h.region, offset: h.off },
                            },
                            self.deadline,
                        )?;
                        staging.note_posted(m);
                    }
                }
                _ => failed = true,
            }
        }
        let status = if failed { u64::MAX } else { value.len() as u64 + 1 };
        // the status rides the same queue pair as the result write, so a
        // caller that sees it knows the bytes landed
        self.post_cell(src, h.cell, status)
    }

    fn on_fetch(&mut self, src: u32, d: &DecodedCall) -> Result<()> {
        let (h, user) = parse_fetch(&d.context)?;
        let sproc = self.shared.topo.process_of(src);
        debug_assert_ne!(sproc, self.id.process, "local fetches are inlined at the caller");
        if h.len == 0 {
            self.invoke_user(h.inner, src, user, Some(&[]))?;
            return self.post_cell(src, h.done, 1);
        }
        // validate the source span; a bad locator completes the cell with a
        // failure status instead of faulting the worker
        let src_machine = self.shared.sim.machine(self.shared.topo.machine_of(sproc));
        let valid = matches!(src_machine.region(h.region), Some(r) if h.off + h.len as u64 <= r.len());
        if !valid {
            return self.post_cell(src, h.done, u64::MAX);
        }
        let block = {
            let t0 = Instant::now();
            loop {
                match self.shared.pool.alloc(h.len) {
                    Ok(b) => break b,
                    Err(Error::WouldBlock) => {
                        self.sweep_fetches()?;
                        self.drain_txs();
                        if t0.elapsed() > self.deadline {
                            return Err(Error::Timeout("fetch landing pool"));
                        }
                        std::thread::yield_now();
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        let tx = self.tx(sproc).clone();
        let m = transmit_retry(
            &tx,
            WorkOp::Read { local: block.local_span(), remote: RemoteSpan { region: h.region, offset: h.off } },
            self.deadline,
        )?;
        // nothing else may come this way for a while; make sure the read's
        // completion can surface
        tx.flush()?;
        let pf = PendingFetch {
            src,
            sproc,
            mark: m,
            block: Some(block),
            inner: h.inner,
            user: user.to_vec(),
            done: h.done,
        };
        if h.asynchronous {
            self.pending_fetches.push(pf);
            return Ok(());
        }
        let t0 = Instant::now();
        while tx.applied() < pf.mark {
            tx.drain();
            if t0.elapsed() > self.deadline {
                return Err(Error::Timeout("synchronous fetch read"));
            }
            std::thread::yield_now();
        }
        // earlier pulls from the same caller finish first to keep the
        // invocation order they were requested in
        let mut i = 0;
        while i < self.pending_fetches.len() {
            if self.pending_fetches[i].sproc == pf.sproc && self.pending_fetches[i].mark <= pf.mark {
                let e = self.pending_fetches.remove(i);
                self.finish_fetch(e)?;
            } else {
                i += 1;
            }
        }
        self.finish_fetch(pf)
    }

    fn finish_fetch(&mut self, mut pf: PendingFetch) -> Result<()> {
        let bytes = match pf.block.take() {
            Some(b) => {
                let v = b.to_vec();
                self.shared.pool.free(&b);
                v
            }
            None => Vec::new(),
        };
        self.invoke_user(pf.inner, pf.src, &pf.user, Some(&bytes))?;
        self.post_cell(pf.src, pf.done, 1)
    }

    fn sweep_cells(&mut self) -> u64 {
        let mut n = 0;
        let mut i = 0;
        while i < self.pending_notifies.len() {
            let v = self.cells.value(self.pending_notifies[i].cell);
            if v == 0 {
                i += 1;
                continue;
            }
            let pn = self.pending_notifies.swap_remove(i);
            if let Some(s) = pn.sync {
                s.sub(1);
            }
            self.cells.recycle(pn.cell);
            n += 1;
        }
        let mut i = 0;
        while i < self.pending_replies.len() {
            let v = self.cells.value(self.pending_replies[i].cell);
            if v == 0 {
                i += 1;
                continue;
            }
            let pr = self.pending_replies.swap_remove(i);
            if v == u64::MAX {
                pr.state.status.store(2, Ordering::Release);
            } else {
                pr.state.len.store(v - 1, Ordering::Release);
                pr.state.status.store(1, Ordering::Release);
            }
            if let Some(s) = pr.sync {
                s.sub(1);
            }
            self.cells.recycle(pr.cell);
            n += 1;
        }
        n
    }

    fn sweep_fetches(&mut self) -> Result<u64> {
        let mut n = 0;
        let mut i = 0;
        while i < self.pending_fetches.len() {
            let ready = {
                let pf = &self.pending_fetches[i];
                self.tx(pf.sproc).applied() >= pf.mark
            };
            if ready {
                let pf = self.pending_fetches.remove(i);
                self.finish_fetch(pf)?;
                n += 1;
            } else {
                i += 1;
            }
        }
        Ok(n)
    }

    // ------------------------------------------------------------- teardown

    fn mark_done(&mut self) {
        if !self.done_marked {
            self.done_marked = true;
            self.shared.done.fetch_add(1, Ordering::AcqRel);
        }
    }

    /// Drain everything this thread still owes: flush aggregation, shut down
    /// channels, then keep serving inbound work until every worker in the
    /// system has reached the same point, and finally wait for our own
    /// transmissions to complete. Bounded by the drain timeout.
    fn finalize(&mut self, healthy: bool) -> Result<()> {
        if healthy {
            self.flush_aggregated()?;
            let dests: Vec<u32> = self.chans.keys().copied().collect();
            for dst in dests {
                match self.chans.get_mut(&dst).expect("key just listed").shutdown() {
                    Ok(()) | Err(Error::Timeout(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        self.mark_done();
        if !healthy {
            return Ok(());
        }
        let t0 = Instant::now();
        while self.shared.done.load(Ordering::Acquire) < self.shared.total_workers {
            self.progress()?;
            if t0.elapsed() > self.deadline {
                return Err(Error::Timeout("global quiesce"));
            }
            std::thread::yield_now();
        }
        for tx in self.shared.txs.iter().flatten() {
            tx.flush()?;
            let target = tx.mark();
            let t1 = Instant::now();
            while !tx.reached(target) {
                tx.drain();
                if t1.elapsed() > self.deadline {
                    return Err(Error::Timeout("final transmit drain"));
                }
                std::thread::yield_now();
            }
        }
        // serve anything that arrived while peers drained
        while self.progress()? != 0 {}
        for (p, st) in self.staging.iter().enumerate() {
            if let Some(st) = st {
                st.seal(&self.shared.txs[p].as_ref().expect("ring implies peer").applied_handle());
            }
        }
        Ok(())
    }

    fn stats(&self) -> WorkerStats {
        let mut channel_records = 0;
        let mut partials = 0;
        let mut stalls = 0;
        for rc in &self.rchans {
            channel_records += rc.chan.records_consumed();
            partials += rc.chan.partial_observations();
            stalls += rc.chan.stalls();
        }
        WorkerStats {
            flat: self.id.flat,
            invoked: self.invoked,
            forwarded: self.forwarded,
            channel_records,
            partial_observations: partials,
            channel_stalls: stalls,
        }
    }
}

// ----------------------------------------------------------------- service

struct RecvSlot {
    block: RegBlock,
}

struct ServiceCtx {
    process: u32,
    topo: Topology,
    deadline: Duration,
    qps: Vec<Option<Arc<QueuePair>>>,
    txs: Vec<Option<Arc<Transmitter<QueuePair>>>>,
    inboxes: Vec<Arc<Inbox<Queued>>>,
    notice_boxes: Vec<Arc<Inbox<Notice>>>,
    sync_table: Arc<SyncTable>,
    chunk_region: Arc<Region>,
    chunk_alloc: GeneralAllocator,
    staging: Vec<Option<Arc<LinearCircularAllocator>>>,
    slots: Vec<RecvSlot>,
    malformed: u64,
    stop: Arc<AtomicBool>,
}

/// Per-process router: posts the receive buffers, serves setup-free records
/// (chunk allocation, synchronizer notices) itself, and forwards
/// worker-directed invocations into the right inbox. Returns the count of
/// malformed frames it skipped.
fn service_loop(mut s: ServiceCtx) -> Result<u64> {
    loop {
        let mut moved = false;
        for q in 0..s.qps.len() {
            let Some(qp) = s.qps[q].clone() else { continue };
            for ce in qp.recv_cq().poll(32) {
                moved = true;
                let CompletionKind::Recv { len } = ce.kind else { continue };
                let slot = ce.user_tag as usize;
                match handle_frame(&mut s, slot, len) {
                    Ok(()) => {}
                    Err(Error::BadRecord(_)) => s.malformed += 1,
                    Err(e) => return Err(e),
                }
                let block = &s.slots[slot].block;
                qp.post(WorkRequest {
                    op: WorkOp::Recv { local: block.local_span() },
                    signaled: true,
                    user_tag: ce.user_tag,
                })?;
            }
        }
        for tx in s.txs.iter().flatten() {
            tx.drain();
        }
        if !moved {
            if s.stop.load(Ordering::Relaxed) {
                return Ok(s.malformed);
            }
            std::thread::yield_now();
        }
    }
}

fn handle_frame(s: &mut ServiceCtx, slot: usize, len: u32) -> Result<()> {
    if (len as usize) < FRAME_LEN + MIN_RECORD as usize {
        return Err(Error::BadRecord("short frame".into()));
    }
    let block = s.slots[slot].block.clone();
    let head = block.store().to_vec(block.offset as usize, FRAME_LEN);
    let f = parse_frame(&head).ok_or_else(|| Error::BadRecord("unreadable frame".into()))?;
    if s.topo.process_of(f.dest) != s.process {
        return Err(Error::BadRecord(format!(
            "frame for thread {} arrived at process {}",
            f.dest, s.process
        )));
    }
    let d = match scan_record(block.store(), block.offset as usize + FRAME_LEN, len - FRAME_LEN as u32)? {
        Scan::Record(d) => d,
        // SENDs deliver whole frames; anything else is corruption, drop it
        _ => return Err(Error::BadRecord("incomplete record in frame".into())),
    };
    match d.function {
        FID_ALLOC_CHUNKS => service_alloc(s, f.src, &d),
        FID_SYNC_NOTIFY => {
            let (id, delta) = decode_notify(&d.context)?;
            s.sync_table.apply(id, delta);
            Ok(())
        }
        _ => {
            let lt = s.topo.thread_of(f.dest) as usize;
            s.inboxes[lt].push(Queued::Call {
                src: f.src,
                notify_off: f.notify_off,
                d,
                local_sync: None,
            });
            Ok(())
        }
    }
}

/// Carve channel chunks, tell the receiving worker, and write the locations
/// back into the requester's reply block. The worker notice goes first so the
/// receiver usually knows about fresh chunks before the sender fills them.
fn service_alloc(s: &mut ServiceCtx, src: u32, d: &DecodedCall) -> Result<()> {
    let req = AllocReq::decode(&d.context)?;
    let sender_flat = (req.key >> 32) as u32;
    let recv_flat = req.key as u32;
    if s.topo.process_of(recv_flat) != s.process || sender_flat != src {
        return Err(Error::BadRecord("channel key does not match the frame".into()));
    }
    let mut chunks = Vec::with_capacity(req.count as usize);
    for _ in 0..req.count {
        match s.chunk_alloc.alloc(req.chunk_len) {
            Ok(b) => chunks.push(ChunkLoc { region: b.region.id, offset: b.offset, len: b.len }),
            // grant what is left; an empty grant reads as denial
            Err(Error::WouldBlock) => break,
            Err(e) => return Err(e),
        }
    }
    let lt = s.topo.thread_of(recv_flat) as usize;
    let notice = if req.kind == KIND_SETUP {
        Notice::NewChannel {
            sender_flat,
            region: s.chunk_region.clone(),
            chunks: chunks.clone(),
            writeback: (req.wb_region != u32::MAX).then_some((req.wb_region, req.wb_offset)),
        }
    } else {
        Notice::Grow { sender_flat, after_index: req.after_index, chunks: chunks.clone() }
    };
    s.notice_boxes[lt].push(notice);
    let bytes = encode_grow_reply(&chunks);
    let sproc = s.topo.process_of(sender_flat) as usize;
    let staging = s.staging[sproc].as_ref().expect("peer staging ring").clone();
    let tx = s.txs[sproc].as_ref().expect("peer transmitter").clone();
    let seg = stage_seg(&staging, &tx, REPLY_BLOCK_LEN, s.deadline)?;
    seg.write(0, &bytes);
    let m = transmit_retry(
        &tx,
        WorkOp::Write {
            local: seg.local_span(),
            remote: RemoteSpan { region: req.reply_region, offset: req.reply_offset },
        },
        s.deadline,
    )?;
    staging.note_posted(m);
    Ok(())
}

// ------------------------------------------------------------------ launch

/// Transport behavior knobs for a run; orthogonal to [`Config`].
#[derive(Clone)]
pub struct Tuning {
    /// Apply posted work from a background engine instead of inline.
    pub deferred: bool,
    /// Engine jitter (requires `deferred`).
    pub jitter_ns: u64,
    /// Split every unsignaled write at a seeded point.
    pub split_writes: Option<u64>,
    pub cost: CostModel,
}

impl Default for Tuning {
    fn default() -> Tuning {
        Tuning { deferred: false, jitter_ns: 0, split_writes: None, cost: CostModel::free() }
    }
}

impl Tuning {
    /// Background engine with jitter plus write splitting: the recycling and
    /// partial-visibility stress setup.
    pub fn stress(seed: u64) -> Tuning {
        Tuning {
            deferred: true,
            jitter_ns: 200,
            split_writes: Some(seed | 1),
            cost: CostModel::free(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WorkerStats {
    pub flat: u32,
    pub invoked: u64,
    pub forwarded: u64,
    pub channel_records: u64,
    pub partial_observations: u64,
    pub channel_stalls: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct ProcStats {
    pub process: u32,
    pub sends: u64,
    pub writes: u64,
    pub reads: u64,
    pub signaled: u64,
}

#[derive(Debug)]
pub struct RunReport {
    pub workers: Vec<WorkerStats>,
    pub procs: Vec<ProcStats>,
    pub malformed_service_records: u64,
    pub overflow_faults: u64,
    pub backlog_rejects: u64,
    pub splits_applied: u64,
    pub recv_truncations: u64,
}

fn worker_slab(cfg: &Config, nproc: u32) -> u64 {
    let rings = nproc.saturating_sub(1) as u64 * cfg.ring_initial as u64 * cfg.unit_size as u64;
    cfg.slab_size as u64 + rings + CELLS_LEN as u64 + (64 << 10)
}

fn pool_len(cfg: &Config) -> u32 {
    (2 * cfg.agg_exceed_cap as u64 + (2 << 20)).clamp(4 << 20, u32::MAX as u64 - (64 << 10)) as u32
}

/// Bring up the whole placement, run `body` on every worker thread, drain,
/// and tear down. The registry must already hold every function the run
/// invokes; it is shared read-only across all processes.
pub fn launch<F>(cfg: &Config, tuning: Tuning, registry: FunctionRegistry, body: F) -> Result<RunReport>
where
    F: Fn(&mut Worker) -> Result<()> + Send + Sync + 'static,
{
    cfg.validate()?;
    let topo = Topology::from_config(cfg);
    let nproc = topo.total_processes() as usize;
    let nthread = topo.total_threads() as usize;
    let tpp = cfg.threads_per_process as usize;
    let sim = Simulation::new(SimConfig {
        machines: cfg.machines,
        zones_per_machine: cfg.zones_per_machine,
        registration_cap: None,
        send_backlog_cap: cfg.send_backlog_cap as usize,
        deferred: tuning.deferred,
        split_writes: tuning.split_writes,
        cost: tuning.cost,
    });
    let engine = tuning.deferred.then(|| sim.start_engine(tuning.jitter_ns, cfg.seed));
    let registry = Arc::new(registry);

    // one queue pair per process pair, one transmitter per direction
    let mut txs: Vec<Vec<Option<Arc<Transmitter<QueuePair>>>>> =
        (0..nproc).map(|_| (0..nproc).map(|_| None).collect()).collect();
    let mut qps: Vec<Vec<Option<Arc<QueuePair>>>> =
        (0..nproc).map(|_| (0..nproc).map(|_| None).collect()).collect();
    for p in 0..nproc {
        for q in (p + 1)..nproc {
            let (a, b) = sim.connect(
                topo.machine_of(p as u32),
                topo.machine_of(q as u32),
                cfg.u_max,
            )?;
            let (a, b) = (Arc::new(a), Arc::new(b));
            txs[p][q] = Some(Arc::new(Transmitter::new(a.clone())));
            txs[q][p] = Some(Arc::new(Transmitter::new(b.clone())));
            qps[p][q] = Some(a);
            qps[q][p] = Some(b);
        }
    }

    let inboxes_all: Vec<Arc<Inbox<Queued>>> =
        (0..nthread).map(|_| Arc::new(Inbox::with_capacity(1 << 16))).collect();
    let notices_all: Vec<Arc<Inbox<Notice>>> =
        (0..nthread).map(|_| Arc::new(Inbox::with_capacity(1 << 12))).collect();

    let mut arenas = Vec::with_capacity(nthread);
    let mut cell_blocks = Vec::with_capacity(nthread);
    let mut cell_regions = Vec::with_capacity(nthread);
    for flat in 0..nthread {
        let id = topo.id(flat as u32);
        let machine = sim.machine(topo.machine_of(id.process));
        let zone = id.thread % cfg.zones_per_machine;
        let arena = Arc::new(ZoneArena::new(machine, zone, worker_slab(cfg, nproc as u32)));
        let cells = arena.alloc(CELLS_LEN)?;
        cell_regions.push(cells.region.id);
        arenas.push(arena);
        cell_blocks.push(cells);
    }

    let done = Arc::new(AtomicU32::new(0));
    let failed = Arc::new(AtomicBool::new(false));
    let stop = Arc::new(AtomicBool::new(false));

    let mut shareds = Vec::with_capacity(nproc);
    for p in 0..nproc {
        let machine = sim.machine(topo.machine_of(p as u32));
        let plen = pool_len(cfg);
        let pool_arena = ZoneArena::new(machine.clone(), 0, plen as u64 + (64 << 10));
        let pool = Arc::new(GeneralAllocator::new(pool_arena.alloc(plen)?));
        shareds.push(Arc::new(ProcShared {
            topo: topo.clone(),
            cfg: cfg.clone(),
            machine,
            sim: sim.clone(),
            registry: registry.clone(),
            txs: txs[p].clone(),
            inboxes: inboxes_all[p * tpp..(p + 1) * tpp].to_vec(),
            cell_regions: cell_regions.clone(),
            sync_table: Arc::new(SyncTable::new()),
            pool,
            done: done.clone(),
            failed: failed.clone(),
            total_workers: nthread as u32,
        }));
    }

    // service threads route send-path records; pointless for one process
    let mut service_ctxs = Vec::new();
    if nproc > 1 {
        for p in 0..nproc {
            let machine = sim.machine(topo.machine_of(p as u32));
            let peers = nproc - 1;
            let chunk_slab = (cfg.c_max as u64 * cfg.chunk_size as u64 * 8).clamp(8 << 20, 256 << 20);
            let recv_bytes =
                peers as u64 * cfg.service_recv_slots as u64 * cfg.service_recv_size as u64;
            let slab = chunk_slab + recv_bytes + peers as u64 * (64 << 10) + (64 << 10);
            let arena = Arc::new(ZoneArena::new(machine, 0, slab));
            let mut slots = Vec::new();
            for (q, qp) in qps[p].iter().enumerate() {
                let Some(qp) = qp else { continue };
                let _ = q;
                for _ in 0..cfg.service_recv_slots {
                    let block = arena.alloc(cfg.service_recv_size)?;
                    qp.post(WorkRequest {
                        op: WorkOp::Recv { local: block.local_span() },
                        signaled: true,
                        user_tag: slots.len() as u64,
                    })?;
                    slots.push(RecvSlot { block });
                }
            }
            let backing = arena.alloc(chunk_slab.min(u32::MAX as u64 - 8) as u32)?;
            let chunk_region = backing.region.clone();
            let chunk_alloc = GeneralAllocator::new(backing);
            let mut staging = Vec::with_capacity(nproc);
            for q in 0..nproc {
                if qps[p][q].is_none() {
                    staging.push(None);
                    continue;
                }
                let ring = CircularAllocator::new(
                    arena.clone(),
                    16 << 10,
                    2,
                    8,
                    crate::config::RingGrowth::Linear,
                )?;
                staging.push(Some(Arc::new(LinearCircularAllocator::new(ring))));
            }
            service_ctxs.push(ServiceCtx {
                process: p as u32,
                topo: topo.clone(),
                deadline: Duration::from_millis(cfg.drain_timeout_ms),
                qps: qps[p].clone(),
                txs: txs[p].clone(),
                inboxes: inboxes_all[p * tpp..(p + 1) * tpp].to_vec(),
                notice_boxes: notices_all[p * tpp..(p + 1) * tpp].to_vec(),
                sync_table: shareds[p].sync_table.clone(),
                chunk_region,
                chunk_alloc,
                staging,
                slots,
                malformed: 0,
                stop: stop.clone(),
            });
        }
    }
    let mut services = Vec::new();
    for sctx in service_ctxs {
        let name = format!("svc{}", sctx.process);
        services.push(
            std::thread::Builder::new()
                .name(name)
                .spawn(move || service_loop(sctx))
                .expect("spawn service thread"),
        );
    }

    let body = Arc::new(body);
    let (res_tx, res_rx) = mpsc::channel::<(u32, Result<()>, WorkerStats)>();
    let mut workers = Vec::with_capacity(nthread);
    for flat in 0..nthread {
        let shared = shareds[topo.process_of(flat as u32) as usize].clone();
        let arena = arenas[flat].clone();
        let cells = cell_blocks[flat].clone();
        let inbox = inboxes_all[flat].clone();
        let notices = notices_all[flat].clone();
        let body = body.clone();
        let res = res_tx.clone();
        workers.push(
            std::thread::Builder::new()
                .name(format!("w{flat}"))
                .spawn(move || {
                    let mut w = Worker::build(flat as u32, shared, arena, cells, inbox, notices);
                    let body_r =
                        std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| body(&mut w)));
                    match body_r {
                        Ok(r) => {
                            let healthy = r.is_ok();
                            if !healthy {
                                w.shared.failed.store(true, Ordering::Release);
                            }
                            let fin = w.finalize(healthy);
                            let _ = res.send((w.flat(), r.and(fin), w.stats()));
                        }
                        Err(p) => {
                            // release peers blocked on this worker, then let
                            // the panic surface through the join below
                            w.shared.failed.store(true, Ordering::Release);
                            w.mark_done();
                            let _ = res.send((
                                w.flat(),
                                Err(Error::ChannelFault("worker panicked".into())),
                                w.stats(),
                            ));
                            std::panic::resume_unwind(p);
                        }
                    }
                })
                .expect("spawn worker thread"),
        );
    }
    drop(res_tx);

    let mut panic_payload = None;
    for h in workers {
        if let Err(p) = h.join() {
            panic_payload.get_or_insert(p);
        }
    }
    stop.store(true, Ordering::Relaxed);
    let mut malformed = 0;
    let mut first_err = None;
    for h in services {
        match h.join() {
            Ok(Ok(m)) => malformed += m,
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(p) => {
                panic_payload.get_or_insert(p);
            }
        }
    }
    drop(engine);
    sim.settle_all();
    if let Some(p) = panic_payload {
        std::panic::resume_unwind(p);
    }

    let mut worker_stats = Vec::new();
    while let Ok((_flat, r, st)) = res_rx.try_recv() {
        if let Err(e) = r {
            first_err.get_or_insert(e);
        }
        worker_stats.push(st);
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    worker_stats.sort_by_key(|w| w.flat);

    let procs = (0..nproc)
        .map(|p| {
            let mut st = ProcStats { process: p as u32, sends: 0, writes: 0, reads: 0, signaled: 0 };
            for qp in qps[p].iter().flatten() {
                st.sends += qp.sends_posted();
                st.writes += qp.writes_posted();
                st.reads += qp.reads_posted();
                st.signaled += qp.signaled_completions();
            }
            st
        })
        .collect();
    let c = sim.counters();
    Ok(RunReport {
        workers: worker_stats,
        procs,
        malformed_service_records: malformed,
        overflow_faults: c.overflow_faults.load(Ordering::Relaxed),
        backlog_rejects: c.backlog_rejects.load(Ordering::Relaxed),
        splits_applied: c.splits_applied.load(Ordering::Relaxed),
        recv_truncations: c.recv_truncations.load(Ordering::Relaxed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::sync::{Mutex, OnceLock};

    const FID_A: u64 = 64;
    const FID_B: u64 = 65;

    #[test]
    fn flat_ids_are_dense_and_bijective() {
        let cfg = Config::with_placement(2, 2, 2);
        let topo = Topology::from_config(&cfg);
        assert_eq!(topo.total_threads(), 8);
        let mut seen = vec![false; 8];
        for flat in 0..8 {
            let id = topo.id(flat);
            assert_eq!(id.flat, flat);
            assert_eq!(topo.flat(id.process, id.thread), flat);
            assert!(id.machine < 2 && id.process < 4 && id.thread < 2);
            assert!(!seen[flat as usize]);
            seen[flat as usize] = true;
        }
        assert_eq!(topo.machine_of(topo.process_of(7)), 1);
    }

    #[test]
    fn registry_rejects_reserved_and_duplicate_ids() {
        let mut reg = FunctionRegistry::new();
        assert!(matches!(reg.register(3, |_, _| {}), Err(Error::Registry(_))));
        reg.register(FID_A, |_, _| {}).unwrap();
        assert!(matches!(reg.register(FID_A, |_, _| {}), Err(Error::Registry(_))));
        assert!(matches!(reg.register_func(FID_A, |_, _| Vec::new()), Err(Error::Registry(_))));
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn wire_wrappers_roundtrip() {
        let f = frame_bytes(7, 3, 0x1234);
        let p = parse_frame(&f).unwrap();
        assert_eq!((p.dest, p.src, p.notify_off), (7, 3, 0x1234));

        let req = AllocReq {
            key: (9u64 << 32) | 4,
            count: 3,
            kind: KIND_GROW,
            after_index: 2,
            chunk_len: 4096,
            reply_region: 11,
            wb_region: u32::MAX,
            reply_offset: 640,
            wb_offset: 0,
        };
        let d = AllocReq::decode(&req.encode()).unwrap();
        assert_eq!(d.key, req.key);
        assert_eq!((d.count, d.kind, d.after_index, d.chunk_len), (3, KIND_GROW, 2, 4096));
        assert_eq!((d.reply_region, d.reply_offset), (11, 640));

        let ctx = note_ctx(FID_A, 77, b"user");
        let (inner, sid, rest) = parse_note(&ctx).unwrap();
        assert_eq!((inner, sid, rest), (FID_A, 77, &b"user"[..]));

        let bh = BcastHdr { inner: FID_B, root: 5, arity: 3, sync_id: 9, path: Path::Channel };
        let ctx = bcast_ctx(&bh, b"xyz");
        let (h, rest) = parse_bcast(&ctx).unwrap();
        assert_eq!((h.inner, h.root, h.arity, h.sync_id), (FID_B, 5, 3, 9));
        assert_eq!(h.path, Path::Channel);
        assert_eq!(rest, b"xyz");

        let ctx = ret_ctx(FID_A, 2, 64, 128, 2048, b"q");
        let (h, rest) = parse_ret(&ctx).unwrap();
        assert_eq!((h.inner, h.region, h.cap, h.off, h.cell), (FID_A, 2, 64, 128, 2048));
        assert_eq!(rest, b"q");

        let fh = FetchHdr { inner: FID_A, region: 6, len: 256, off: 8, done: 3200, asynchronous: true };
        let ctx = fetch_ctx(&fh, &[]);
        let (h, rest) = parse_fetch(&ctx).unwrap();
        assert!(h.asynchronous && rest.is_empty());
        assert_eq!((h.region, h.len, h.off, h.done), (6, 256, 8, 3200));

        let ctx = bufw_ctx(FID_B, 4, 100, 16, b"zz");
        let (h, rest) = parse_bufw(&ctx).unwrap();
        assert_eq!((h.inner, h.region, h.len, h.off), (FID_B, 4, 100, 16));
        assert_eq!(rest, b"zz");
    }

    fn le_u32(b: &[u8]) -> u32 {
        u32::from_le_bytes(b[..4].try_into().unwrap())
    }

    #[test]
    fn calls_run_exactly_once_in_order() {
        let cfg = Config::with_placement(1, 2, 1);
        let next = Arc::new(AtomicU32::new(0));
        let n2 = next.clone();
        let mut reg = FunctionRegistry::new();
        reg.register(FID_A, move |w, c| {
            assert_eq!(w.flat(), 1);
            assert_eq!(c.src, 0);
            let expect = n2.fetch_add(1, Ordering::Relaxed);
            assert_eq!(le_u32(c.context), expect);
        })
        .unwrap();
        let n3 = next.clone();
        let report = launch(&cfg, Tuning::default(), reg, move |w| {
            if w.flat() == 0 {
                let sync = w.synchronizer(SyncMode::OnRemoteConsume);
                for i in 0..300u32 {
                    while !w.call(1, FID_A, &i.to_le_bytes(), Some(&sync))? {
                        w.progress()?;
                    }
                }
                w.wait(&sync)?;
                assert!(sync.settled());
            } else {
                while n3.load(Ordering::Relaxed) < 300 {
                    w.progress()?;
                }
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(next.load(Ordering::Relaxed), 300);
        assert_eq!(report.workers[1].invoked, 300);
        assert_eq!(report.workers[0].invoked, 0);
    }

    #[test]
    fn self_calls_go_through_the_queue() {
        let cfg = Config::with_placement(1, 1, 1);
        let seen = Arc::new(AtomicU32::new(0));
        let s2 = seen.clone();
        let mut reg = FunctionRegistry::new();
        reg.register(FID_A, move |w, c| {
            assert_eq!(c.src, w.flat());
            let expect = s2.fetch_add(1, Ordering::Relaxed);
            assert_eq!(le_u32(c.context), expect);
        })
        .unwrap();
        launch(&cfg, Tuning::default(), reg, move |w| {
            let sync = w.synchronizer(SyncMode::OnRemoteConsume);
            for i in 0..10u32 {
                assert!(w.call(w.flat(), FID_A, &i.to_le_bytes(), Some(&sync))?);
            }
            // queued, not yet run
            assert_eq!(sync.balance(), 10);
            w.wait(&sync)?;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.load(Ordering::Relaxed), 10);
    }

    #[test]
    fn channel_records_flow_without_receiver_setup() {
        let mut cfg = Config::with_placement(1, 2, 1);
        cfg.chunk_size = 512; // force ring growth under load
        cfg.c = 2;
        cfg.c_max = 8;
        let next = Arc::new(AtomicU32::new(0));
        let n2 = next.clone();
        let mut reg = FunctionRegistry::new();
        reg.register(FID_A, move |_, c| {
            let expect = n2.fetch_add(1, Ordering::Relaxed);
            assert_eq!(le_u32(c.context), expect);
        })
        .unwrap();
        let go = Arc::new(AtomicBool::new(false));
        let go2 = go.clone();
        let n3 = next.clone();
        let report = launch(&cfg, Tuning::default(), reg, move |w| {
            if w.flat() == 0 {
                let sync = w.synchronizer(SyncMode::OnRemoteConsume);
                // setup, a first burst, and ring growth all complete with the
                // receiving worker asleep; only its service thread helps
                // (40 wrapped records fit the fully grown 8-chunk ring)
                for i in 0..40u32 {
                    assert!(w.call_via(Path::Channel, 1, FID_A, &i.to_le_bytes(), Some(&sync))?);
                }
                go2.store(true, Ordering::Release);
                for i in 40..500u32 {
                    while !w.call_via(Path::Channel, 1, FID_A, &i.to_le_bytes(), Some(&sync))? {
                        w.progress()?;
                    }
                }
                w.wait(&sync)?;
            } else {
                let t0 = std::time::Instant::now();
                while !go.load(Ordering::Acquire) {
                    assert!(t0.elapsed().as_secs() < 20, "sender never finished its burst");
                    std::thread::yield_now();
                }
                while n3.load(Ordering::Relaxed) < 500 {
                    w.progress()?;
                }
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(next.load(Ordering::Relaxed), 500);
        // consumption feedback is pushed by the receiver; the sender never reads
        assert_eq!(report.procs[0].reads, 0);
        assert_eq!(report.workers[1].channel_records, 500 + 1); // records + shutdown
    }

    #[test]
    fn buffer_payloads_arrive_intact_on_both_paths() {
        let cfg = Config::with_placement(1, 2, 1);
        let sums = Arc::new(Mutex::new(Vec::new()));
        let s2 = sums.clone();
        let mut reg = FunctionRegistry::new();
        reg.register(FID_A, move |_, c| {
            let p = c.payload.expect("payload expected");
            let sum: u64 = p.iter().map(|&b| b as u64).sum();
            s2.lock().unwrap().push((le_u32(c.context), sum, p.len()));
        })
        .unwrap();
        let done = Arc::new(AtomicBool::new(false));
        let d2 = done.clone();
        launch(&cfg, Tuning::default(), reg, move |w| {
            if w.flat() == 0 {
                let payload: Vec<u8> = (0..1024u32).map(|i| (i * 7) as u8).collect();
                let sync = w.synchronizer(SyncMode::OnRemoteConsume);
                while !w.call_buffer(1, FID_A, &0u32.to_le_bytes(), &payload, Some(&sync))? {
                    w.progress()?;
                }
                while !w.call_buffer_via(Path::Channel, 1, FID_A, &1u32.to_le_bytes(), &payload, Some(&sync))? {
                    w.progress()?;
                }
                w.wait(&sync)?;
                d2.store(true, Ordering::Release);
            } else {
                while !done.load(Ordering::Acquire) {
                    w.progress()?;
                }
            }
            Ok(())
        })
        .unwrap();
        let got = sums.lock().unwrap();
        let expect: u64 = (0..1024u32).map(|i| ((i * 7) as u8) as u64).sum();
        assert_eq!(got.len(), 2);
        for &(_, sum, len) in got.iter() {
            assert_eq!(sum, expect);
            assert_eq!(len, 1024);
        }
    }

    #[test]
    fn prewritten_buffers_complete_before_invocation() {
        // cross-machine, deferred engine, split injection: the handler must
        // never observe a half-written landing buffer
        let cfg = Config::with_placement(2, 1, 1);
        let hits = Arc::new(AtomicU32::new(0));
        let h2 = hits.clone();
        let mut reg = FunctionRegistry::new();
        reg.register(FID_A, move |w, c| {
            let p = c.payload.expect("buffer view");
            assert_eq!(p.len(), 256);
            let tag = p[0];
            assert!(p.iter().all(|&b| b == tag), "half-written buffer became visible");
            assert_ne!(tag, 0);
            let _ = w;
            h2.fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
        let landing: Arc<OnceLock<(RegionId, u64)>> = Arc::new(OnceLock::new());
        let l2 = landing.clone();
        let hits3 = hits.clone();
        let report = launch(&cfg, Tuning::stress(0xC0FFEE), reg, move |w| {
            if w.flat() == 1 {
                let dst = w.alloc(256)?;
                l2.set((dst.region.id, dst.offset)).unwrap();
                while hits3.load(Ordering::Relaxed) < 50 {
                    w.progress()?;
                }
            } else {
                let src = w.alloc(256)?;
                let t0 = std::time::Instant::now();
                let (region, offset) = loop {
                    if let Some(&loc) = l2.get() {
                        break loc;
                    }
                    assert!(t0.elapsed().as_secs() < 20, "landing buffer never published");
                    std::thread::yield_now();
                };
                let sync = w.synchronizer(SyncMode::OnRemoteConsume);
                for i in 1..=50u8 {
                    src.write(0, &[i; 256]);
                    w.call_buffer_put(
                        Path::Send,
                        1,
                        FID_A,
                        &[],
                        &src,
                        RemoteSpan { region, offset },
                        Some(&sync),
                    )?;
                    // the landing buffer is reused, so wait out each round trip
                    w.wait(&sync)?;
                }
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(hits.load(Ordering::Relaxed), 50);
        assert!(report.splits_applied > 0, "split hook never fired");
    }

    #[test]
    fn returns_deliver_value_and_length() {
        let cfg = Config::with_placement(1, 2, 1);
        let mut reg = FunctionRegistry::new();
        reg.register_func(FID_A, |_, c| {
            // echo the context repeated twice
            let mut v = c.context.to_vec();
            v.extend_from_slice(c.context);
            v
        })
        .unwrap();
        let done = Arc::new(AtomicBool::new(false));
        let d2 = done.clone();
        launch(&cfg, Tuning::default(), reg, move |w| {
            if w.flat() == 0 {
                let sync = w.synchronizer(SyncMode::OnRemoteConsume);
                let mut tickets = Vec::new();
                for i in 0..16u32 {
                    let origin = w.alloc(64)?;
                    let t = w
                        .call_return(Path::Send, 1, FID_A, &i.to_le_bytes(), &origin, Some(&sync))?
                        .expect("accepted");
                    tickets.push((i, origin, t));
                }
                w.wait(&sync)?;
                for (i, origin, t) in &tickets {
                    assert_eq!(t.succeeded(), Some(true));
                    assert_eq!(t.value_len(), 8);
                    let bytes = origin.to_vec();
                    assert_eq!(&bytes[0..4], &i.to_le_bytes());
                    assert_eq!(&bytes[4..8], &i.to_le_bytes());
                }
                // an origin too small for the result reports failure
                let origin = w.alloc(8)?;
                let big = [9u8; 32];
                let t = w
                    .call_return(Path::Channel, 1, FID_A, &big, &origin, None)?
                    .expect("accepted");
                while !t.done() {
                    w.progress()?;
                }
                assert_eq!(t.succeeded(), Some(false));
                d2.store(true, Ordering::Release);
            } else {
                while !done.load(Ordering::Acquire) {
                    w.progress()?;
                }
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn fetch_pulls_bytes_then_invokes() {
        let cfg = Config::with_placement(1, 2, 1);
        let got = Arc::new(Mutex::new(Vec::new()));
        let g2 = got.clone();
        let mut reg = FunctionRegistry::new();
        reg.register(FID_A, move |_, c| {
            let p = c.payload.expect("pulled bytes");
            g2.lock().unwrap().push((c.context.to_vec(), p.to_vec()));
        })
        .unwrap();
        let done = Arc::new(AtomicBool::new(false));
        let d2 = done.clone();
        let report = launch(&cfg, Tuning::default(), reg, move |w| {
            if w.flat() == 0 {
                let src = w.alloc(128)?;
                let pattern: Vec<u8> = (0..128u32).map(|i| (i ^ 0x5a) as u8).collect();
                src.write(0, &pattern);
                let sync = w.synchronizer(SyncMode::OnRemoteConsume);
                assert!(w.call_fetch(Path::Send, 1, FID_A, b"sync", &src, false, Some(&sync))?);
                assert!(w.call_fetch(Path::Send, 1, FID_A, b"async", &src, true, Some(&sync))?);
                w.wait(&sync)?;
                d2.store(true, Ordering::Release);
            } else {
                while !done.load(Ordering::Acquire) {
                    w.progress()?;
                }
            }
            Ok(())
        })
        .unwrap();
        let calls = got.lock().unwrap();
        assert_eq!(calls.len(), 2);
        let pattern: Vec<u8> = (0..128u32).map(|i| (i ^ 0x5a) as u8).collect();
        assert_eq!(calls[0].0, b"sync");
        assert_eq!(calls[0].1, pattern);
        assert_eq!(calls[1].0, b"async");
        assert_eq!(calls[1].1, pattern);
        // the pull is a one-sided read posted by the callee's process
        assert!(report.procs[1].reads >= 2);
        assert_eq!(report.procs[0].reads, 0);
    }

    #[test]
    fn broadcast_reaches_every_thread_exactly_once() {
        let cfg = Config::with_placement(2, 2, 2);
        let flags: Arc<Vec<AtomicU32>> = Arc::new((0..8).map(|_| AtomicU32::new(0)).collect());
        let f2 = flags.clone();
        let mut reg = FunctionRegistry::new();
        reg.register(FID_A, move |w, c| {
            assert_eq!(c.context, b"hello");
            f2[w.flat() as usize].fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
        let f3 = flags.clone();
        let report = launch(&cfg, Tuning::default(), reg, move |w| {
            if w.flat() == 3 {
                let sync = w.synchronizer(SyncMode::OnRemoteConsume);
                w.broadcast(FID_A, b"hello", Some(&sync))?;
                w.wait(&sync)?;
                assert!(sync.settled());
            } else {
                while f3[w.flat() as usize].load(Ordering::Relaxed) == 0 {
                    w.progress()?;
                }
            }
            Ok(())
        })
        .unwrap();
        for f in flags.iter() {
            assert_eq!(f.load(Ordering::Relaxed), 1);
        }
        // binary tree: nobody forwards to more than two children
        for ws in &report.workers {
            assert!(ws.forwarded <= 2, "thread {} forwarded {}", ws.flat, ws.forwarded);
        }
        assert_eq!(report.workers.iter().map(|w| w.forwarded).sum::<u64>(), 7);
    }

    #[test]
    fn broadcast_on_one_thread_runs_locally() {
        let cfg = Config::with_placement(1, 1, 1);
        let hits = Arc::new(AtomicU32::new(0));
        let h2 = hits.clone();
        let mut reg = FunctionRegistry::new();
        reg.register(FID_A, move |_, _| {
            h2.fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
        launch(&cfg, Tuning::default(), reg, move |w| {
            let sync = w.synchronizer(SyncMode::OnRemoteConsume);
            w.broadcast(FID_A, &[], Some(&sync))?;
            w.wait(&sync)?;
            Ok(())
        })
        .unwrap();
        assert_eq!(hits.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn transmit_synchronizers_settle_on_completion() {
        let cfg = Config::with_placement(1, 2, 1);
        let count = Arc::new(AtomicUsize::new(0));
        let c2 = count.clone();
        let mut reg = FunctionRegistry::new();
        reg.register(FID_A, move |_, _| {
            c2.fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
        let c3 = count.clone();
        launch(&cfg, Tuning::default(), reg, move |w| {
            if w.flat() == 0 {
                let sync = w.synchronizer(SyncMode::OnTransmit);
                for i in 0..64u32 {
                    while !w.call(1, FID_A, &i.to_le_bytes(), Some(&sync))? {
                        w.progress()?;
                    }
                }
                w.wait(&sync)?;
                assert!(sync.settled());
                assert_eq!(sync.balance(), 0);
            } else {
                while c3.load(Ordering::Relaxed) < 64 {
                    w.progress()?;
                }
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(count.load(Ordering::Relaxed), 64);
    }

    #[test]
    fn aggregated_calls_arrive_in_order() {
        let mut cfg = Config::with_placement(1, 2, 1);
        cfg.agg_flush_bytes = 1024;
        let next = Arc::new(AtomicU32::new(0));
        let n2 = next.clone();
        let mut reg = FunctionRegistry::new();
        reg.register(FID_A, move |_, c| {
            let expect = n2.fetch_add(1, Ordering::Relaxed);
            assert_eq!(le_u32(c.context), expect);
        })
        .unwrap();
        let n3 = next.clone();
        launch(&cfg, Tuning::default(), reg, move |w| {
            if w.flat() == 0 {
                let sync = w.synchronizer(SyncMode::OnRemoteConsume);
                for i in 0..200u32 {
                    while !w.agg_call(1, FID_A, &i.to_le_bytes(), None, Some(&sync))? {
                        w.progress()?;
                    }
                }
                w.flush_aggregated()?;
                w.wait(&sync)?;
                let st = w.agg_stats();
                assert_eq!(st.records, 200);
                assert!(st.batches >= 1);
            } else {
                while n3.load(Ordering::Relaxed) < 200 {
                    w.progress()?;
                }
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(next.load(Ordering::Relaxed), 200);
    }
}
