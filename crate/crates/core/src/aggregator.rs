//! Per-destination aggregation of small invocation records.
//!
//! Small records waste channel bandwidth one by one, so a sending thread can
//! route them through an [`Aggregator`] bound to its channels. Two
//! disciplines:
//!
//! * traditional: records are encoded into a staging batch and the whole
//!   batch enters the channel as one pre-encoded transfer once it reaches the
//!   flush threshold (or on demand). Arrival order still matches call order
//!   because oversized records flush the batch before passing through.
//! * overflow: records go straight into the channel; when the ring is full
//!   they spill, already encoded, into registered scratch blocks that drain
//!   ahead of any newer record. The spill footprint is capped; past the cap
//!   the caller sees back-pressure.
//!
//! Either way each record is encoded exactly once; the drain paths move
//! already-encoded bytes.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use crate::config::{AggMode, Config};
use crate::error::{Error, Result};
use crate::fabric::call::{encode_record, RecordSpec};
use crate::messenger::SenderChannel;
use crate::regmem::{GeneralAllocator, LinearCircularAllocator, RegBlock};

#[derive(Debug, Clone, Copy, Default)]
pub struct AggStats {
    /// Records accepted (batched, passed through, or spilled).
    pub records: u64,
    /// Batches handed to a channel (traditional mode).
    pub batches: u64,
    /// Records that entered a channel directly.
    pub passthrough: u64,
    /// Records parked in scratch because the channel was full.
    pub spills: u64,
    /// Spilled records later drained into a channel.
    pub spill_drains: u64,
}

struct Batch {
    block: RegBlock,
    used: u32,
}

struct DestAgg {
    /// Ring the batches are carved from; recycled against the channel's
    /// transmitter watermark.
    staging: Arc<LinearCircularAllocator>,
    batch: Option<Batch>,
    spills: VecDeque<(RegBlock, u32)>,
    spilled: u64,
    /// Drained spill blocks waiting for their transfer to complete.
    retired: Vec<(u64, RegBlock)>,
}

impl DestAgg {
    fn new(staging: Arc<LinearCircularAllocator>) -> DestAgg {
        DestAgg {
            staging,
            batch: None,
            spills: VecDeque::new(),
            spilled: 0,
            retired: Vec::new(),
        }
    }
}

pub struct Aggregator {
    mode: AggMode,
    flush_bytes: u32,
    exceed_cap: u32,
    dests: HashMap<u32, DestAgg>,
    stats: AggStats,
}

impl Aggregator {
    pub fn new(cfg: &Config) -> Aggregator {
        Aggregator {
            mode: cfg.agg_mode,
            flush_bytes: cfg.agg_flush_bytes,
            exceed_cap: cfg.agg_exceed_cap,
            dests: HashMap::new(),
            stats: AggStats::default(),
        }
    }

    pub fn stats(&self) -> AggStats {
        self.stats
    }

    /// Destinations still holding a batch or spilled records.
    pub fn pending_dests(&self) -> Vec<u32> {
        self.dests
            .iter()
            .filter(|(_, d)| d.batch.is_some() || !d.spills.is_empty())
            .map(|(k, _)| *k)
            .collect()
    }

    /// Route one record towards `dest` through its channel. `Ok(false)` means
    /// the record was not accepted and nothing changed.
    pub fn call(
        &mut self,
        dest: u32,
        chan: &mut SenderChannel,
        staging: &Arc<LinearCircularAllocator>,
        pool: &Arc<GeneralAllocator>,
        spec: &RecordSpec,
    ) -> Result<bool> {
        let len = spec.encoded_len();
        if len > chan.max_record() {
            return Err(Error::Oversize { len: len as u64, cap: chan.max_record() as u64 });
        }
        let d = self
            .dests
            .entry(dest)
            .or_insert_with(|| DestAgg::new(staging.clone()));
        match self.mode {
            AggMode::Trad => {
                // a batch is one channel transfer, so it cannot outgrow one
                let cap = self.flush_bytes.min(chan.max_record());
                call_trad(d, chan, spec, len, cap, &mut self.stats)
            }
            AggMode::Ovfl => call_ovfl(d, chan, pool, spec, len, self.exceed_cap, &mut self.stats),
        }
    }

    /// One attempt to move everything parked for `dest` into its channel.
    /// `Ok(true)` when nothing stayed behind.
    pub fn flush_dest(
        &mut self,
        dest: u32,
        chan: &mut SenderChannel,
        pool: &Arc<GeneralAllocator>,
    ) -> Result<bool> {
        let Some(d) = self.dests.get_mut(&dest) else { return Ok(true) };
        match self.mode {
            AggMode::Trad => flush_batch(d, chan, &mut self.stats),
            AggMode::Ovfl => {
                sweep_retired(d, chan, pool);
                drain_spills(d, chan, &mut self.stats)?;
                Ok(d.spills.is_empty())
            }
        }
    }
}

fn call_trad(
    d: &mut DestAgg,
    chan: &mut SenderChannel,
    spec: &RecordSpec,
    len: u32,
    flush_bytes: u32,
    stats: &mut AggStats,
) -> Result<bool> {
    if len >= flush_bytes {
        // too big to batch; the current batch goes first to keep order
        if !flush_batch(d, chan, stats)? {
            return Ok(false);
        }
        if !chan.send(spec)? {
            return Ok(false);
        }
        stats.passthrough += 1;
        stats.records += 1;
        return Ok(true);
    }
    if let Some(b) = &d.batch {
        if b.used + len > flush_bytes && !flush_batch(d, chan, stats)? {
            return Ok(false);
        }
    }
    if d.batch.is_none() {
        match d.staging.alloc(flush_bytes, &chan.tx().applied_handle()) {
            Ok(block) => d.batch = Some(Batch { block, used: 0 }),
            Err(Error::WouldBlock) => return Ok(false),
            Err(e) => return Err(e),
        }
    }
    let b = d.batch.as_mut().expect("batch just ensured");
    encode_record(b.block.store(), (b.block.offset + b.used as u64) as usize, spec);
    b.used += len;
    stats.records += 1;
    if b.used >= flush_bytes {
        // best effort; a full channel just leaves the batch for later
        flush_batch(d, chan, stats)?;
    }
    Ok(true)
}

fn flush_batch(d: &mut DestAgg, chan: &mut SenderChannel, stats: &mut AggStats) -> Result<bool> {
    let Some(b) = &d.batch else { return Ok(true) };
    if b.used == 0 {
        d.batch = None;
        return Ok(true);
    }
    let src = b.block.slice(0, b.used);
    if !chan.send_encoded(&src, b.used)? {
        return Ok(false);
    }
    // recycle the block once the batch transfer completes
    d.staging.note_posted(chan.tx().mark().0);
    d.batch = None;
    stats.batches += 1;
    Ok(true)
}

fn call_ovfl(
    d: &mut DestAgg,
    chan: &mut SenderChannel,
    pool: &Arc<GeneralAllocator>,
    spec: &RecordSpec,
    len: u32,
    exceed_cap: u32,
    stats: &mut AggStats,
) -> Result<bool> {
    sweep_retired(d, chan, pool);
    drain_spills(d, chan, stats)?;
    if d.spills.is_empty() {
        if chan.send(spec)? {
            stats.passthrough += 1;
            stats.records += 1;
            return Ok(true);
        }
    }
    // channel full (or older spills still queued): park the encoded record
    if d.spilled + len as u64 > exceed_cap as u64 {
        return Ok(false);
    }
    let blk = match pool.alloc(len) {
        Ok(b) => b,
        Err(Error::WouldBlock) => return Ok(false),
        Err(e) => return Err(e),
    };
    encode_record(blk.store(), blk.offset as usize, spec);
    d.spills.push_back((blk, len));
    d.spilled += len as u64;
    stats.spills += 1;
    stats.records += 1;
    Ok(true)
}

/// Move spilled records into the channel, oldest first, until it refuses.
fn drain_spills(d: &mut DestAgg, chan: &mut SenderChannel, stats: &mut AggStats) -> Result<()> {
    while let Some((blk, slen)) = d.spills.front() {
        if !chan.send_encoded(blk, *slen)? {
            return Ok(());
        }
        let (blk, slen) = d.spills.pop_front().expect("front just seen");
        d.spilled -= slen as u64;
        d.retired.push((chan.tx().mark().0, blk));
        stats.spill_drains += 1;
    }
    Ok(())
}

/// Free drained spill blocks whose transfer has completed.
fn sweep_retired(d: &mut DestAgg, chan: &SenderChannel, pool: &Arc<GeneralAllocator>) {
    let applied = chan.tx().applied();
    d.retired.retain(|(mark, blk)| {
        if applied >= *mark {
            pool.free(blk);
            false
        } else {
            true
        }
    });
}
