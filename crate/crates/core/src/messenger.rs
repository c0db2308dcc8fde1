//! Chunked record channels between thread pairs.
//!
//! A channel is a one-way stream of serialized call records from one sender
//! thread into chunks of the receiver's registered memory. The sender posts
//! one-sided writes, so the receiver's CPU sees no completions; it discovers
//! records by scanning for their placement markers. All coordination rides
//! the stream itself:
//!
//! * a chunk ends with an in-band wrap record ([`crate::fabric::call::FID_WRAP`]);
//!   the receiver treats it as the authoritative switch to the next chunk.
//!   Space for it is reserved up front ([`WRAP_RESERVE`]), so a wrap always
//!   fits;
//! * the receiver zeroes a chunk's consumed bytes and then pushes its
//!   consumed stream offset into the sender's writeback cell with a single
//!   8-byte one-sided write, once per fully consumed chunk. The sender never
//!   issues reads;
//! * a chunk is reusable when the writeback offset reaches the stream offset
//!   recorded when the chunk was sealed;
//! * when every chunk is busy the sender asks the receiving process's
//!   service for more (an allocation request that needs no prior setup); the
//!   reply comes back as a one-sided write into the sender's reply block,
//!   marker last. Fresh chunks splice in right after the sender's current
//!   chunk on both sides, keeping ring order identical.
//!
//! Send reports `false` instead of blocking only when the ring is full and
//! at its configured maximum; the caller decides how to wait. Teardown is an
//! in-stream shutdown record, so it cannot overtake data.
//!
//! Chunk header layout (64 bytes, advisory except the receiver-local cell):
//!
//! ```text
//! 0   first_offset   stream offset of the chunk's first record (sender-written)
//! 8   last_offset    stream offset after the chunk's last record (sender-written)
//! 16  grow_hint      sender stall count, a growth suggestion (sender-written)
//! 24  sender_flat    identity of the sending thread (chunk 0 only, setup)
//! 32  writeback_region  where consumed offsets go (chunk 0 only, setup)
//! 40  writeback_offset
//! 48  consumed_offset   receiver-local progress scratch
//! 56  reserved
//! ```

use std::sync::atomic::AtomicU64;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::fabric::call::{
    self, encode_record, scan_record, DecodedCall, RecordSpec, Scan, FID_SHUTDOWN, FID_WRAP,
    MIN_RECORD,
};
use crate::regmem::{LinearCircularAllocator, RegBlock};
use crate::sim::{ByteStore, QueuePair, Region, RegionId, RemoteSpan, WorkOp};
use crate::transmitter::Transmitter;

pub const CHUNK_HEADER: u32 = 64;
/// Bytes held back in every chunk so the wrap record always fits.
pub const WRAP_RESERVE: u32 = MIN_RECORD;
pub const REPLY_BLOCK_LEN: u32 = 512;

/// Bound on waiting out a jammed send backlog before giving up.
const POST_RETRY: Duration = Duration::from_secs(10);

const HDR_FIRST: u64 = 0;
const HDR_LAST: u64 = 8;
const HDR_SENDER_FLAT: u64 = 24;
const HDR_WB_REGION: u64 = 32;
const HDR_WB_OFFSET: u64 = 40;
const HDR_CONSUMED: u64 = 48;

/// One chunk of channel memory on the receiving machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLoc {
    pub region: RegionId,
    pub offset: u64,
    pub len: u32,
}

impl ChunkLoc {
    pub fn data_len(&self) -> u32 {
        self.len - CHUNK_HEADER
    }
}

/// Growth request the sender issues to the receiving process's service.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrowRequest {
    /// Opaque channel identity assigned at setup.
    pub channel_key: u64,
    /// Sender's current chunk index; fresh chunks splice in right after.
    pub after_index: u32,
    pub count: u32,
    /// Sender-side landing pad for the reply.
    pub reply_region: RegionId,
    pub reply_offset: u64,
}

impl GrowRequest {
    pub const WIRE_LEN: usize = 32;

    pub fn encode(&self) -> [u8; Self::WIRE_LEN] {
        let mut b = [0u8; Self::WIRE_LEN];
        b[0..8].copy_from_slice(&self.channel_key.to_le_bytes());
        b[8..12].copy_from_slice(&self.after_index.to_le_bytes());
        b[12..16].copy_from_slice(&self.count.to_le_bytes());
        b[16..20].copy_from_slice(&self.reply_region.to_le_bytes());
        b[24..32].copy_from_slice(&self.reply_offset.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<GrowRequest> {
        if b.len() != Self::WIRE_LEN {
            return Err(Error::BadRecord(format!("grow request of {} bytes", b.len())));
        }
        Ok(GrowRequest {
            channel_key: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            after_index: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            count: u32::from_le_bytes(b[12..16].try_into().unwrap()),
            reply_region: u32::from_le_bytes(b[16..20].try_into().unwrap()),
            reply_offset: u64::from_le_bytes(b[24..32].try_into().unwrap()),
        })
    }
}

/// Serialize a growth reply. The marker is the last byte, so a one-sided
/// write placing these bytes becomes visible marker-last.
pub fn encode_grow_reply(chunks: &[ChunkLoc]) -> [u8; REPLY_BLOCK_LEN as usize] {
    let mut b = [0u8; REPLY_BLOCK_LEN as usize];
    b[0..4].copy_from_slice(&(chunks.len() as u32).to_le_bytes());
    let mut at = 8;
    for c in chunks {
        b[at..at + 4].copy_from_slice(&c.region.to_le_bytes());
        b[at + 8..at + 16].copy_from_slice(&c.offset.to_le_bytes());
        b[at + 16..at + 20].copy_from_slice(&c.len.to_le_bytes());
        at += 24;
    }
    b[REPLY_BLOCK_LEN as usize - 1] = call::MARKER;
    b
}

/// Probe a reply block; `None` until the marker lands.
pub fn parse_grow_reply(store: &ByteStore, base: usize) -> Option<Vec<ChunkLoc>> {
    if store.load_acquire_u8(base + REPLY_BLOCK_LEN as usize - 1) != call::MARKER {
        return None;
    }
    let n = store.load_u64(base) as u32 & 0xFFFF_FFFF;
    let mut out = Vec::with_capacity(n as usize);
    let mut at = base + 8;
    for _ in 0..n {
        let bytes = store.to_vec(at, 24);
        out.push(ChunkLoc {
            region: u32::from_le_bytes(bytes[0..4].try_into().unwrap()),
            offset: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            len: u32::from_le_bytes(bytes[16..20].try_into().unwrap()),
        });
        at += 24;
    }
    Some(out)
}

pub type GrowFn = Box<dyn FnMut(&GrowRequest) -> Result<()> + Send>;

struct SenderChunk {
    loc: ChunkLoc,
    /// Stream offset recorded when this chunk was last sealed; the chunk is
    /// reusable once the writeback cell reaches it.
    busy_until: u64,
}

pub struct SenderChannel {
    tx: Arc<Transmitter<QueuePair>>,
    staging: Arc<LinearCircularAllocator>,
    applied: Arc<AtomicU64>,
    chunks: Vec<SenderChunk>,
    cur: usize,
    pos: u32,
    stream: u64,
    writeback_cell: RegBlock,
    reply_block: RegBlock,
    channel_key: u64,
    c_max: usize,
    grow: GrowFn,
    grows: u64,
    grow_stalls: u64,
    seals: u64,
    grow_timeout: Duration,
    shut: bool,
}

impl SenderChannel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tx: Arc<Transmitter<QueuePair>>,
        staging: Arc<LinearCircularAllocator>,
        chunks: Vec<ChunkLoc>,
        writeback_cell: RegBlock,
        reply_block: RegBlock,
        channel_key: u64,
        c_max: usize,
        grow: GrowFn,
    ) -> SenderChannel {
        assert!(!chunks.is_empty() && chunks.len() <= c_max);
        assert_eq!(writeback_cell.len, 8);
        assert_eq!(reply_block.len, REPLY_BLOCK_LEN);
        let applied = tx.applied_handle();
        SenderChannel {
            tx,
            staging,
            applied,
            chunks: chunks
                .into_iter()
                .map(|loc| SenderChunk { loc, busy_until: 0 })
                .collect(),
            cur: 0,
            pos: 0,
            stream: 0,
            writeback_cell,
            reply_block,
            channel_key,
            c_max,
            grow,
            grows: 0,
            grow_stalls: 0,
            seals: 0,
            grow_timeout: Duration::from_secs(10),
            shut: false,
        }
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn seals(&self) -> u64 {
        self.seals
    }

    pub fn stream_offset(&self) -> u64 {
        self.stream
    }

    pub fn tx(&self) -> &Arc<Transmitter<QueuePair>> {
        &self.tx
    }

    /// Largest record this channel can carry.
    pub fn max_record(&self) -> u32 {
        self.chunks.iter().map(|c| c.loc.data_len() - WRAP_RESERVE).min().unwrap()
    }

    fn writeback(&self) -> u64 {
        self.writeback_cell
            .store()
            .load_acquire_u64(self.writeback_cell.offset as usize)
    }

    /// Stage raw bytes locally and post a one-sided write of them.
    fn put(&self, dst_offset: u64, bytes: &[u8]) -> Result<()> {
        let seg = self.stage(bytes.len() as u32)?;
        seg.store().write(seg.offset as usize, bytes);
        self.write_from(&seg, dst_offset)
    }

    fn stage(&self, len: u32) -> Result<RegBlock> {
        loop {
            match self.staging.alloc(len, &self.applied) {
                Ok(seg) => return Ok(seg),
                Err(Error::WouldBlock) => {
                    self.tx.flush()?;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn write_from(&self, seg: &RegBlock, dst_offset: u64) -> Result<()> {
        let chunk_region = self.chunks[self.cur].loc.region;
        self.post_write(WorkOp::Write {
            local: seg.local_span(),
            remote: RemoteSpan { region: chunk_region, offset: dst_offset },
        })?;
        self.staging.note_posted(self.tx.mark().0);
        Ok(())
    }

    /// Post, waiting out a full device backlog; that is congestion, not a
    /// reason to tear the channel down.
    fn post_write(&self, op: WorkOp) -> Result<()> {
        let t0 = Instant::now();
        loop {
            match self.tx.transmit(op) {
                Ok(_) => return Ok(()),
                Err(Error::SendBacklog { .. }) => {
                    self.tx.drain();
                    if t0.elapsed() > POST_RETRY {
                        return Err(Error::Timeout("channel write backlog"));
                    }
                    std::thread::yield_now();
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn data_base(&self) -> u64 {
        self.chunks[self.cur].loc.offset + CHUNK_HEADER as u64
    }

    fn capacity(&self) -> u32 {
        self.chunks[self.cur].loc.data_len() - WRAP_RESERVE
    }

    /// Make room for `need` record bytes in the current chunk. `Ok(false)`
    /// means the ring is full at its maximum; try again after the receiver
    /// catches up.
    fn ensure_room(&mut self, need: u32) -> Result<bool> {
        if need > self.max_record() {
            return Err(Error::Oversize {
                len: need as u64,
                cap: self.max_record() as u64,
            });
        }
        if self.pos + need <= self.capacity() {
            return Ok(true);
        }
        let next = (self.cur + 1) % self.chunks.len();
        if self.writeback() < self.chunks[next].busy_until {
            if self.chunks.len() >= self.c_max {
                self.grow_stalls += 1;
                return Ok(false);
            }
            self.grow_ring()?;
        }
        self.seal_current()?;
        self.cur = (self.cur + 1) % self.chunks.len();
        self.pos = 0;
        // announce where this chunk's records start
        self.put(
            self.chunks[self.cur].loc.offset + HDR_FIRST,
            &self.stream.to_le_bytes(),
        )?;
        Ok(true)
    }

    /// Seal the current chunk: advisory header, then the wrap record. The
    /// wrap context carries the sender's cumulative growth count; the
    /// receiver must have spliced at least that often by the time it
    /// consumes the wrap, or the rings have diverged.
    fn seal_current(&mut self) -> Result<()> {
        let mut hdr = [0u8; 16];
        hdr[0..8].copy_from_slice(&self.stream.to_le_bytes());
        hdr[8..16].copy_from_slice(&self.grow_stalls.to_le_bytes());
        self.put(self.chunks[self.cur].loc.offset + HDR_LAST, &hdr)?;

        let ctx = (self.grows as u32).to_le_bytes();
        let spec = RecordSpec { function: FID_WRAP, context: &ctx, payload: None };
        debug_assert_eq!(spec.encoded_len(), WRAP_RESERVE);
        let seg = self.stage(WRAP_RESERVE)?;
        encode_record(seg.store(), seg.offset as usize, &spec);
        self.write_from(&seg, self.data_base() + self.pos as u64)?;
        self.stream += WRAP_RESERVE as u64;
        self.chunks[self.cur].busy_until = self.stream;
        self.seals += 1;
        Ok(())
    }

    /// Ask the receiving process for more chunks and splice them in after
    /// the current one. Doubles the ring, capped at `c_max`.
    fn grow_ring(&mut self) -> Result<()> {
        let count = self.chunks.len().min(self.c_max - self.chunks.len()) as u32;
        debug_assert!(count > 0);
        let req = GrowRequest {
            channel_key: self.channel_key,
            after_index: self.cur as u32,
            count,
            reply_region: self.reply_block.region.id,
            reply_offset: self.reply_block.offset,
        };
        (self.grow)(&req)?;
        let deadline = Instant::now() + self.grow_timeout;
        let fresh = loop {
            if let Some(chunks) =
                parse_grow_reply(self.reply_block.store(), self.reply_block.offset as usize)
            {
                break chunks;
            }
            if Instant::now() >= deadline {
                return Err(Error::Timeout("channel growth reply"));
            }
            self.tx.drain();
            std::thread::yield_now();
        };
        self.reply_block
            .store()
            .fill_zero(self.reply_block.offset as usize, REPLY_BLOCK_LEN as usize);
        if fresh.is_empty() {
            return Err(Error::ChannelFault("growth denied".into()));
        }
        let at = self.cur + 1;
        self.chunks.splice(
            at..at,
            fresh.into_iter().map(|loc| SenderChunk { loc, busy_until: 0 }),
        );
        self.grows += 1;
        Ok(())
    }

    /// Send one record. `Ok(false)` when the channel is full at its maximum
    /// size; nothing is written in that case.
    pub fn send(&mut self, spec: &RecordSpec) -> Result<bool> {
        debug_assert!(!self.shut, "send after shutdown");
        let total = spec.encoded_len();
        if !self.ensure_room(total)? {
            return Ok(false);
        }
        let seg = self.stage(total)?;
        encode_record(seg.store(), seg.offset as usize, spec);
        self.write_from(&seg, self.data_base() + self.pos as u64)?;
        self.pos += total;
        self.stream += total as u64;
        Ok(true)
    }

    /// Forward `len` bytes of already-encoded records from local registered
    /// memory without re-serializing them.
    pub fn send_encoded(&mut self, src: &RegBlock, len: u32) -> Result<bool> {
        debug_assert_eq!(len % 8, 0);
        if !self.ensure_room(len)? {
            return Ok(false);
        }
        let chunk_region = self.chunks[self.cur].loc.region;
        self.post_write(WorkOp::Write {
            local: src.slice(0, len).local_span(),
            remote: RemoteSpan {
                region: chunk_region,
                offset: self.data_base() + self.pos as u64,
            },
        })?;
        self.pos += len;
        self.stream += len as u64;
        Ok(true)
    }

    /// In-stream teardown record; spins for room since it cannot be dropped.
    pub fn shutdown(&mut self) -> Result<()> {
        if self.shut {
            return Ok(());
        }
        let spec = RecordSpec { function: FID_SHUTDOWN, context: &[], payload: None };
        let deadline = Instant::now() + self.grow_timeout;
        loop {
            if self.send(&spec)? {
                self.shut = true;
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(Error::Timeout("channel shutdown"));
            }
            self.tx.drain();
            std::thread::yield_now();
        }
    }
}

/// What a receiver poll produced.
#[derive(Debug)]
pub enum Polled {
    /// No new record.
    Empty,
    /// A record's bytes are mid-placement; its length is visible but its
    /// marker has not landed.
    Partial,
    /// A wrap record sealed after more ring growths than this side has
    /// spliced. The splice notification is still in flight; nothing was
    /// consumed, so the same wrap is re-polled after splicing catches up.
    Stalled,
    Record(DecodedCall),
    Shutdown,
}

pub struct ReceiverChannel {
    region: Arc<Region>,
    chunks: Vec<ChunkLoc>,
    cur: usize,
    pos: u32,
    consumed: u64,
    writeback: Option<(RegionId, u64)>,
    partial_observations: u64,
    records: u64,
    wraps: u64,
    splices: u64,
    stalls: u64,
    done: bool,
}

impl ReceiverChannel {
    /// Set up the receiving side over chunks carved from `region`. Writes the
    /// channel identity fields into chunk 0's header.
    pub fn new(
        region: Arc<Region>,
        chunks: Vec<ChunkLoc>,
        sender_flat: u64,
        writeback: Option<(RegionId, u64)>,
    ) -> ReceiverChannel {
        assert!(!chunks.is_empty());
        let base = chunks[0].offset as usize;
        let store = region.store();
        store.store_u64(base + HDR_SENDER_FLAT as usize, sender_flat);
        if let Some((r, o)) = writeback {
            store.store_u64(base + HDR_WB_REGION as usize, r as u64);
            store.store_u64(base + HDR_WB_OFFSET as usize, o);
        }
        ReceiverChannel {
            region,
            chunks,
            cur: 0,
            pos: 0,
            consumed: 0,
            writeback,
            partial_observations: 0,
            records: 0,
            wraps: 0,
            splices: 0,
            stalls: 0,
            done: false,
        }
    }

    pub fn partial_observations(&self) -> u64 {
        self.partial_observations
    }

    pub fn records_consumed(&self) -> u64 {
        self.records
    }

    pub fn wraps(&self) -> u64 {
        self.wraps
    }

    pub fn stalls(&self) -> u64 {
        self.stalls
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn consumed_offset(&self) -> u64 {
        self.consumed
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn writeback_target(&self) -> Option<(RegionId, u64)> {
        self.writeback
    }

    /// Splice service-allocated chunks in after `after_index`, mirroring the
    /// sender's ring. Returns the locations to report back.
    pub fn splice(&mut self, after_index: usize, fresh: Vec<ChunkLoc>) {
        let at = after_index + 1;
        assert!(at <= self.chunks.len());
        if self.cur >= at {
            self.cur += fresh.len();
        }
        self.chunks.splice(at..at, fresh);
        self.splices += 1;
    }

    /// Scan for the next record. `push_consumed` posts the given consumed
    /// stream offset into the sender's writeback cell; it runs once per
    /// fully consumed chunk, after the chunk's bytes are zeroed.
    pub fn poll(
        &mut self,
        push_consumed: &mut dyn FnMut(u64) -> Result<()>,
    ) -> Result<Polled> {
        if self.done {
            return Ok(Polled::Empty);
        }
        loop {
            let chunk = self.chunks[self.cur];
            let base = (chunk.offset + CHUNK_HEADER as u64 + self.pos as u64) as usize;
            let space = chunk.data_len() - self.pos;
            debug_assert!(space >= MIN_RECORD);
            match scan_record(self.region.store(), base, space)? {
                Scan::Empty => return Ok(Polled::Empty),
                Scan::Partial => {
                    self.partial_observations += 1;
                    return Ok(Polled::Partial);
                }
                Scan::Record(d) if d.function == FID_WRAP => {
                    let grows_at_seal = u32::from_le_bytes(
                        d.context
                            .as_slice()
                            .try_into()
                            .map_err(|_| Error::BadRecord("wrap context".into()))?,
                    );
                    // a wrap sealed after growth n must not be crossed until
                    // this side has spliced n times, or the rings diverge;
                    // report the gap and let the owner splice, then re-poll
                    if (grows_at_seal as u64) > self.splices {
                        self.stalls += 1;
                        return Ok(Polled::Stalled);
                    }
                    self.consume_chunk(d.total, push_consumed)?;
                }
                Scan::Record(d) => {
                    self.pos += d.total;
                    self.consumed += d.total as u64;
                    self.records += 1;
                    if d.function == FID_SHUTDOWN {
                        self.done = true;
                        return Ok(Polled::Shutdown);
                    }
                    return Ok(Polled::Record(d));
                }
            }
        }
    }

    fn consume_chunk(
        &mut self,
        wrap_total: u32,
        push_consumed: &mut dyn FnMut(u64) -> Result<()>,
    ) -> Result<()> {
        let chunk = self.chunks[self.cur];
        self.consumed += wrap_total as u64;
        self.wraps += 1;
        // zero everything consumed in this chunk, wrap record included, so
        // the sender finds it clean on reuse
        let data = (chunk.offset + CHUNK_HEADER as u64) as usize;
        self.region
            .store()
            .fill_zero(data, (self.pos + wrap_total) as usize);
        // local progress scratch in chunk 0's header
        self.region
            .store()
            .store_u64(self.chunks[0].offset as usize + HDR_CONSUMED as usize, self.consumed);
        push_consumed(self.consumed)?;
        self.cur = (self.cur + 1) % self.chunks.len();
        self.pos = 0;
        Ok(())
    }
}

/// Single-process channel harness shared by the messenger and aggregator
/// tests: sender on machine 0, receiver on machine 1, growth serviced
/// synchronously inside the grow closure (allocate on the receiver, splice,
/// write the reply into the sender's block the way the landing write would).
#[cfg(test)]
pub(crate) mod chantest {
    use super::*;
    use crate::config::RingGrowth;
    use crate::regmem::{CircularAllocator, GeneralAllocator, ZoneArena};
    use crate::sim::{SimConfig, Simulation};
    use std::sync::Mutex;

    pub(crate) struct Rig {
        pub(crate) sim: Simulation,
        pub(crate) sender: SenderChannel,
        pub(crate) receiver: Arc<Mutex<ReceiverChannel>>,
        pub(crate) general: Arc<GeneralAllocator>,
        pub(crate) staging: Arc<LinearCircularAllocator>,
        pub(crate) wb_region: Arc<Region>,
    }

    impl Rig {
        /// Pump the receiver until it has nothing ready, returning consumed
        /// records in order.
        pub(crate) fn drain(&mut self) -> Vec<DecodedCall> {
            let target = self.receiver.lock().unwrap().writeback_target();
            let mut push = push_fn(&self.wb_region, target);
            let mut out = Vec::new();
            loop {
                match self.receiver.lock().unwrap().poll(&mut push).unwrap() {
                    Polled::Record(d) => out.push(d),
                    Polled::Shutdown => break,
                    Polled::Empty | Polled::Partial => break,
                    Polled::Stalled => unreachable!("synchronous splice"),
                }
            }
            out
        }
    }

    pub(crate) fn rig(chunk_len: u32, c: usize, c_max: usize) -> Rig {
        let sim = Simulation::new(SimConfig::new(2));
        let (qa, _qb) = sim.connect(0, 1, 16).unwrap();
        let tx = Arc::new(Transmitter::new(Arc::new(qa)));

        let send_arena = Arc::new(ZoneArena::new(sim.machine(0), 0, 1 << 20));
        let ring = CircularAllocator::new(send_arena.clone(), 16 << 10, 4, 64, RingGrowth::Exponential)
            .unwrap();
        let staging = Arc::new(LinearCircularAllocator::new(ring));
        let wb = send_arena.alloc(8).unwrap();
        let reply = send_arena.alloc(REPLY_BLOCK_LEN).unwrap();

        let recv_arena = ZoneArena::new(sim.machine(1), 0, 4 << 20);
        let backing = recv_arena.alloc(2 << 20).unwrap();
        let region = backing.region.clone();
        let general = Arc::new(GeneralAllocator::new(backing));
        let chunks: Vec<ChunkLoc> = (0..c)
            .map(|_| {
                let b = general.alloc(chunk_len).unwrap();
                ChunkLoc { region: b.region.id, offset: b.offset, len: chunk_len }
            })
            .collect();

        let receiver = Arc::new(Mutex::new(ReceiverChannel::new(
            region,
            chunks.clone(),
            77,
            Some((wb.region.id, wb.offset)),
        )));

        let grow: GrowFn = {
            let receiver = receiver.clone();
            let general = general.clone();
            let wb_store = wb.region.clone();
            Box::new(move |req: &GrowRequest| {
                let mut fresh = Vec::new();
                for _ in 0..req.count {
                    let b = general.alloc(chunk_len).unwrap();
                    fresh.push(ChunkLoc { region: b.region.id, offset: b.offset, len: chunk_len });
                }
                receiver.lock().unwrap().splice(req.after_index as usize, fresh.clone());
                // emulate the reply landing as a one-sided write
                let bytes = encode_grow_reply(&fresh);
                wb_store.store().write(req.reply_offset as usize, &bytes);
                Ok(())
            })
        };

        let sender = SenderChannel::new(
            tx,
            staging.clone(),
            chunks,
            wb.slice(0, 8),
            reply,
            1,
            c_max,
            grow,
        );
        Rig { sim, sender, receiver, general, staging, wb_region: wb.region }
    }

    pub(crate) fn push_fn(
        rig_wb: &Arc<Region>,
        target: Option<(RegionId, u64)>,
    ) -> impl FnMut(u64) -> Result<()> + '_ {
        let (_region, offset) = target.unwrap();
        let store = rig_wb.store();
        move |consumed| {
            // receiver-side one-sided write, emulated as a direct landing
            store.write(offset as usize, &consumed.to_le_bytes());
            Ok(())
        }
    }
}
