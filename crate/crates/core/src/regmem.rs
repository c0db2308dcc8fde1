//! Allocators over registered memory.
//!
//! Registration is expensive on real hardware, so nothing here registers per
//! allocation. [`ZoneArena`] registers slabs and bump-allocates; everything
//! long-lived (rings, chunks, tables) carves from it. Transmission buffers
//! need reuse, and reuse is only safe once the device has read the bytes:
//! the transmitter publishes an applied-operations watermark, allocators tag
//! each handed-back unit with the watermark value that makes it safe, and a
//! tagged unit is recycled when the watermark passes its tag. No retire
//! lists, no callbacks; allocators check tags when they need space.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::sim::{ByteStore, LocalSpan, Machine, Region, RemoteSpan, ZoneId};

/// A span of registered memory.
#[derive(Clone)]
pub struct RegBlock {
    pub region: Arc<Region>,
    pub offset: u64,
    pub len: u32,
}

impl RegBlock {
    pub fn store(&self) -> &ByteStore {
        self.region.store()
    }

    pub fn write(&self, at: u32, bytes: &[u8]) {
        debug_assert!(at + bytes.len() as u32 <= self.len);
        self.store().write((self.offset + at as u64) as usize, bytes);
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.store().to_vec(self.offset as usize, self.len as usize)
    }

    pub fn local_span(&self) -> LocalSpan {
        LocalSpan { region: self.region.id, offset: self.offset, len: self.len }
    }

    pub fn remote_span(&self) -> RemoteSpan {
        RemoteSpan { region: self.region.id, offset: self.offset }
    }

    /// A sub-span relative to this block.
    pub fn slice(&self, at: u32, len: u32) -> RegBlock {
        debug_assert!(at + len <= self.len);
        RegBlock { region: self.region.clone(), offset: self.offset + at as u64, len }
    }
}

/// Recycling state of a buffer that may still be under transmission.
#[derive(Clone)]
pub enum UnitTag {
    /// Never handed out, or explicitly released unused.
    Free,
    /// Handed out; the holder has not yet said when it becomes reusable.
    InFlight,
    /// Reusable once the transmitter's applied watermark reaches `at`.
    Tagged { applied: Arc<AtomicU64>, at: u64 },
}

impl UnitTag {
    fn reusable(&self) -> bool {
        match self {
            UnitTag::Free => true,
            UnitTag::InFlight => false,
            UnitTag::Tagged { applied, at } => applied.load(Ordering::Acquire) >= *at,
        }
    }
}

/// Bump allocator over registered slabs in one machine zone. Allocations are
/// 8-aligned and never freed individually; registration count stays at one
/// per slab, which is the whole point.
pub struct ZoneArena {
    machine: Arc<Machine>,
    zone: ZoneId,
    slab_len: u64,
    state: Mutex<ArenaState>,
    registrations: AtomicU64,
}

struct ArenaState {
    region: Option<Arc<Region>>,
    used: u64,
}

impl ZoneArena {
    pub fn new(machine: Arc<Machine>, zone: ZoneId, slab_len: u64) -> ZoneArena {
        ZoneArena {
            machine,
            zone,
            slab_len,
            state: Mutex::new(ArenaState { region: None, used: 0 }),
            registrations: AtomicU64::new(0),
        }
    }

    pub fn alloc(&self, len: u32) -> Result<RegBlock> {
        let want = (len as u64 + 7) & !7;
        if want > self.slab_len {
            // Oversized allocations get a dedicated registration.
            let region = self.machine.register(self.zone, want)?;
            self.registrations.fetch_add(1, Ordering::Relaxed);
            return Ok(RegBlock { region, offset: 0, len });
        }
        let mut st = self.state.lock().unwrap();
        let need_slab = match &st.region {
            Some(r) => st.used + want > r.len(),
            None => true,
        };
        if need_slab {
            st.region = Some(self.machine.register(self.zone, self.slab_len)?);
            st.used = 0;
            self.registrations.fetch_add(1, Ordering::Relaxed);
        }
        let region = st.region.clone().unwrap();
        let offset = st.used;
        st.used += want;
        Ok(RegBlock { region, offset, len })
    }

    pub fn registrations(&self) -> u64 {
        self.registrations.load(Ordering::Relaxed)
    }

    pub fn machine(&self) -> &Arc<Machine> {
        &self.machine
    }
}

/// Fixed-size unit handed out by [`CircularAllocator`]. Retire it with the
/// watermark that makes reuse safe, or release it if it was never posted.
/// Dropping without either releases it, which is only correct when no
/// transmission references the bytes.
pub struct RecycledUnit {
    block: RegBlock,
    ring: Arc<Mutex<RingState>>,
    slot: usize,
    done: bool,
}

impl RecycledUnit {
    pub fn block(&self) -> &RegBlock {
        &self.block
    }

    /// Mark reusable once `applied` reaches `at`.
    pub fn retire(mut self, applied: Arc<AtomicU64>, at: u64) {
        self.ring.lock().unwrap().slots[self.slot].tag = UnitTag::Tagged { applied, at };
        self.done = true;
    }

    /// Return unused.
    pub fn release(mut self) {
        self.ring.lock().unwrap().slots[self.slot].tag = UnitTag::Free;
        self.done = true;
    }
}

impl Drop for RecycledUnit {
    fn drop(&mut self) {
        if !self.done {
            self.ring.lock().unwrap().slots[self.slot].tag = UnitTag::Free;
        }
    }
}

struct RingSlot {
    block: RegBlock,
    tag: UnitTag,
}

struct RingState {
    slots: Vec<RingSlot>,
    cursor: usize,
}

/// Ring of equal-sized transmission buffers with epoch-tagged reuse. When
/// every slot is still in flight the ring grows, inserting fresh slots at the
/// cursor, until `max_units`; after that allocation reports [`Error::WouldBlock`]
/// and the caller is expected to flush the transmitter and retry.
pub struct CircularAllocator {
    arena: Arc<ZoneArena>,
    unit_len: u32,
    initial: usize,
    max: usize,
    growth: crate::config::RingGrowth,
    ring: Arc<Mutex<RingState>>,
}

impl CircularAllocator {
    pub fn new(
        arena: Arc<ZoneArena>,
        unit_len: u32,
        initial: usize,
        max: usize,
        growth: crate::config::RingGrowth,
    ) -> Result<CircularAllocator> {
        assert!(initial >= 1 && initial <= max);
        let mut slots = Vec::with_capacity(initial);
        Self::fill(&arena, unit_len, initial, &mut slots)?;
        Ok(CircularAllocator {
            arena,
            unit_len,
            initial,
            max,
            growth,
            ring: Arc::new(Mutex::new(RingState { slots, cursor: 0 })),
        })
    }

    fn fill(
        arena: &ZoneArena,
        unit_len: u32,
        n: usize,
        out: &mut Vec<RingSlot>,
    ) -> Result<()> {
        // One contiguous stretch per growth step keeps registrations rare.
        let stretch = arena.alloc(unit_len * n as u32)?;
        for i in 0..n {
            out.push(RingSlot {
                block: stretch.slice(i as u32 * unit_len, unit_len),
                tag: UnitTag::Free,
            });
        }
        Ok(())
    }

    pub fn unit_len(&self) -> u32 {
        self.unit_len
    }

    pub fn units(&self) -> usize {
        self.ring.lock().unwrap().slots.len()
    }

    pub fn alloc(&self) -> Result<RecycledUnit> {
        let mut st = self.ring.lock().unwrap();
        let n = st.slots.len();
        for step in 0..n {
            let i = (st.cursor + step) % n;
            if st.slots[i].tag.reusable() {
                st.slots[i].tag = UnitTag::InFlight;
                st.cursor = (i + 1) % n;
                return Ok(RecycledUnit {
                    block: st.slots[i].block.clone(),
                    ring: self.ring.clone(),
                    slot: i,
                    done: false,
                });
            }
        }
        // Everything in flight: grow if allowed.
        let grow_by = match self.growth {
            crate::config::RingGrowth::Linear => self.initial,
            crate::config::RingGrowth::Exponential => n,
        }
        .min(self.max - n);
        if grow_by == 0 {
            return Err(Error::WouldBlock);
        }
        let mut fresh = Vec::with_capacity(grow_by);
        Self::fill(&self.arena, self.unit_len, grow_by, &mut fresh)?;
        // Append and move the cursor to the first fresh slot, so growth units
        // are handed out next. Appending (rather than splicing at the cursor)
        // keeps slot indices stable under outstanding handles.
        let first_new = st.slots.len();
        st.slots.extend(fresh);
        st.slots[first_new].tag = UnitTag::InFlight;
        st.cursor = (first_new + 1) % st.slots.len();
        Ok(RecycledUnit {
            block: st.slots[first_new].block.clone(),
            ring: self.ring.clone(),
            slot: first_new,
            done: false,
        })
    }
}

/// Packs variable-length segments into ring units front to back. A unit is
/// retired when the packer moves past it, tagged with the watermark recorded
/// for the last segment carved from it; monotone watermarks make that tag
/// cover every earlier segment in the unit too.
pub struct LinearCircularAllocator {
    ring: CircularAllocator,
    cur: Mutex<LcaState>,
}

struct LcaState {
    unit: Option<RecycledUnit>,
    used: u32,
    last_mark: u64,
}

impl LinearCircularAllocator {
    pub fn new(ring: CircularAllocator) -> LinearCircularAllocator {
        LinearCircularAllocator {
            ring,
            cur: Mutex::new(LcaState { unit: None, used: 0, last_mark: 0 }),
        }
    }

    pub fn unit_len(&self) -> u32 {
        self.ring.unit_len()
    }

    /// Carve `len` bytes (8-aligned) out of the current unit, rotating to a
    /// fresh one when it does not fit.
    pub fn alloc(&self, len: u32, applied: &Arc<AtomicU64>) -> Result<RegBlock> {
        let want = (len + 7) & !7;
        if want > self.ring.unit_len() {
            return Err(Error::Oversize { len: len as u64, cap: self.ring.unit_len() as u64 });
        }
        let mut st = self.cur.lock().unwrap();
        if let Some(u) = &st.unit {
            if st.used + want > u.block().len {
                let mark = st.last_mark;
                st.unit.take().unwrap().retire(applied.clone(), mark);
            }
        }
        if st.unit.is_none() {
            st.unit = Some(self.ring.alloc()?);
            st.used = 0;
        }
        let at = st.used;
        st.used += want;
        Ok(st.unit.as_ref().unwrap().block().slice(at, len))
    }

    /// Record the watermark that covers everything carved so far. Call after
    /// posting the transmission that used the latest segment.
    pub fn note_posted(&self, mark: u64) {
        let mut st = self.cur.lock().unwrap();
        if mark > st.last_mark {
            st.last_mark = mark;
        }
    }

    /// Retire the in-progress unit (shutdown or quiesce points).
    pub fn seal(&self, applied: &Arc<AtomicU64>) {
        let mut st = self.cur.lock().unwrap();
        if let Some(u) = st.unit.take() {
            let mark = st.last_mark;
            if st.used == 0 {
                u.release();
            } else {
                u.retire(applied.clone(), mark);
            }
            st.used = 0;
        }
    }
}

/// Best-fit allocator with coalescing free, for chunks and oversized blocks.
/// Fit preference is (length, offset): the smallest block that fits, lowest
/// address first.
pub struct GeneralAllocator {
    backing: RegBlock,
    state: Mutex<GeneralState>,
}

struct GeneralState {
    // free spans keyed both ways: by (len, offset) for best-fit lookup and by
    // offset for coalescing
    by_size: BTreeMap<(u64, u64), ()>,
    by_offset: BTreeMap<u64, u64>,
    in_use: u64,
}

impl GeneralAllocator {
    pub fn new(backing: RegBlock) -> GeneralAllocator {
        let mut by_size = BTreeMap::new();
        let mut by_offset = BTreeMap::new();
        by_size.insert((backing.len as u64, 0), ());
        by_offset.insert(0, backing.len as u64);
        GeneralAllocator {
            backing,
            state: Mutex::new(GeneralState { by_size, by_offset, in_use: 0 }),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.backing.len as u64
    }

    pub fn in_use(&self) -> u64 {
        self.state.lock().unwrap().in_use
    }

    pub fn alloc(&self, len: u32) -> Result<RegBlock> {
        let want = ((len as u64) + 7) & !7;
        if want == 0 {
            return Err(Error::Alloc("general"));
        }
        let mut st = self.state.lock().unwrap();
        let key = st
            .by_size
            .range((want, 0)..)
            .next()
            .map(|(&k, _)| k)
            .ok_or(Error::WouldBlock)?;
        let (flen, foff) = key;
        st.by_size.remove(&key);
        st.by_offset.remove(&foff);
        if flen > want {
            let rest_off = foff + want;
            let rest_len = flen - want;
            st.by_size.insert((rest_len, rest_off), ());
            st.by_offset.insert(rest_off, rest_len);
        }
        st.in_use += want;
        Ok(self.backing.slice(foff as u32, len))
    }

    pub fn free(&self, block: &RegBlock) {
        debug_assert!(Arc::ptr_eq(&block.region, &self.backing.region));
        let mut off = block.offset - self.backing.offset;
        let mut len = ((block.len as u64) + 7) & !7;
        let mut st = self.state.lock().unwrap();
        st.in_use -= len;
        // merge with the predecessor if adjacent
        if let Some((&poff, &plen)) = st.by_offset.range(..off).next_back() {
            if poff + plen == off {
                st.by_offset.remove(&poff);
                st.by_size.remove(&(plen, poff));
                off = poff;
                len += plen;
            }
        }
        // merge with the successor if adjacent
        if let Some((&noff, &nlen)) = st.by_offset.range(off + len..).next() {
            if off + len == noff {
                st.by_offset.remove(&noff);
                st.by_size.remove(&(nlen, noff));
                len += nlen;
            }
        }
        st.by_offset.insert(off, len);
        st.by_size.insert((len, off), ());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RingGrowth;
    use crate::sim::{SimConfig, Simulation};

    fn arena() -> Arc<ZoneArena> {
        let sim = Simulation::new(SimConfig::new(1));
        Arc::new(ZoneArena::new(sim.machine(0), 0, 1 << 20))
    }

    #[test]
    fn arena_registers_once_per_slab() {
        let a = arena();
        for _ in 0..100 {
            a.alloc(1024).unwrap();
        }
        // 100 KiB of 1 MiB slab used
        assert_eq!(a.registrations(), 1);
        // crossing the slab boundary registers exactly one more
        a.alloc(1 << 20).unwrap(); // oversize within slab_len: still one slab
        assert_eq!(a.registrations(), 2);
    }

    #[test]
    fn arena_allocs_are_aligned_and_disjoint() {
        let a = arena();
        let mut spans = Vec::new();
        for len in [1u32, 7, 8, 13, 64, 100] {
            let b = a.alloc(len).unwrap();
            assert_eq!(b.offset % 8, 0);
            spans.push((b.offset, b.offset + b.len as u64));
        }
        spans.sort();
        for w in spans.windows(2) {
            assert!(w[0].1 <= w[1].0, "overlap: {:?}", w);
        }
    }

    #[test]
    fn ring_reuses_only_when_watermark_passes_tag() {
        let a = arena();
        let ring = CircularAllocator::new(a, 256, 2, 2, RingGrowth::Linear).unwrap();
        let applied = Arc::new(AtomicU64::new(0));

        let u1 = ring.alloc().unwrap();
        let off1 = u1.block().offset;
        let u2 = ring.alloc().unwrap();
        assert!(matches!(ring.alloc(), Err(Error::WouldBlock)));

        u1.retire(applied.clone(), 5);
        assert!(matches!(ring.alloc(), Err(Error::WouldBlock)), "tag not reached yet");
        applied.store(5, Ordering::Release);
        let u3 = ring.alloc().unwrap();
        assert_eq!(u3.block().offset, off1, "recycled the retired slot");
        drop(u2);
        drop(u3);
    }

    #[test]
    fn ring_grows_to_max_then_blocks() {
        let a = arena();
        let ring = CircularAllocator::new(a, 128, 2, 8, RingGrowth::Exponential).unwrap();
        let mut held = Vec::new();
        for _ in 0..8 {
            held.push(ring.alloc().unwrap());
        }
        assert_eq!(ring.units(), 8);
        assert!(matches!(ring.alloc(), Err(Error::WouldBlock)));
        // distinct backing spans
        let mut offs: Vec<(u64, u32)> = held
            .iter()
            .map(|u| (u.block().region.id as u64 * (1 << 40) | u.block().offset, u.block().len))
            .collect();
        offs.sort();
        offs.dedup();
        assert_eq!(offs.len(), 8);
    }

    #[test]
    fn dropped_unit_returns_to_free() {
        let a = arena();
        let ring = CircularAllocator::new(a, 64, 1, 1, RingGrowth::Linear).unwrap();
        let u = ring.alloc().unwrap();
        drop(u);
        ring.alloc().unwrap().release();
    }

    #[test]
    fn lca_packs_then_rotates_units() {
        let a = arena();
        let ring = CircularAllocator::new(a, 256, 2, 4, RingGrowth::Linear).unwrap();
        let lca = LinearCircularAllocator::new(ring);
        let applied = Arc::new(AtomicU64::new(0));

        let s1 = lca.alloc(100, &applied).unwrap();
        lca.note_posted(1);
        let s2 = lca.alloc(100, &applied).unwrap();
        lca.note_posted(2);
        assert!(Arc::ptr_eq(&s1.region, &s2.region));
        assert_eq!(s2.offset, s1.offset + 104); // 100 rounded to 104

        // does not fit: rotates to a fresh unit; old unit reusable only
        // after the watermark covers the second segment
        let s3 = lca.alloc(100, &applied).unwrap();
        assert!(s3.offset != s2.offset + 104 || !Arc::ptr_eq(&s3.region, &s2.region));
        lca.note_posted(3);

        assert!(matches!(
            lca.alloc(300, &applied),
            Err(Error::Oversize { .. })
        ));
    }

    #[test]
    fn general_best_fit_and_coalesce() {
        let a = arena();
        let backing = a.alloc(1024).unwrap();
        let g = GeneralAllocator::new(backing);

        let b1 = g.alloc(128).unwrap();
        let b2 = g.alloc(64).unwrap();
        let b3 = g.alloc(128).unwrap();
        assert_eq!(g.in_use(), 320);

        // freeing b2 leaves a 64-byte hole; a 64-byte alloc takes it (best fit)
        let hole_off = b2.offset;
        g.free(&b2);
        let b4 = g.alloc(48).unwrap();
        assert_eq!(b4.offset, hole_off);

        // free everything; coalescing restores one max-size span
        g.free(&b1);
        g.free(&b3);
        g.free(&b4);
        assert_eq!(g.in_use(), 0);
        let all = g.alloc(1024).unwrap();
        assert_eq!(all.offset, 0);
    }

    #[test]
    fn general_reports_would_block_when_full() {
        let a = arena();
        let g = GeneralAllocator::new(a.alloc(256).unwrap());
        let _b = g.alloc(256).unwrap();
        assert!(matches!(g.alloc(8), Err(Error::WouldBlock)));
    }
}
