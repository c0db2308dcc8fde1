//! Backing store for simulated device memory.
//!
//! Host memory under DMA is concurrently written by the NIC and read by the
//! application, so every access here goes through atomics. The store is a slab
//! of `AtomicU64` words, which buys two properties the protocols above rely on:
//!
//! * 8-byte-aligned loads and stores (stream offsets, counters) are single
//!   atomic operations, never torn;
//! * a ranged `write` places bytes in increasing address order at word
//!   granularity and publishes the final word with `Release`. A reader that
//!   `Acquire`-loads a trailing ready marker therefore observes every byte
//!   written before it. This mirrors the left-to-right placement guarantee
//!   record framing assumes on real hardware.
//!
//! Writers to ranges that share a boundary word splice bytes in with a CAS
//! loop, so adjacent disjoint writes never trample each other.

use std::sync::atomic::{AtomicU64, Ordering};

pub struct ByteStore {
    words: Box<[AtomicU64]>,
    len: usize,
}

impl ByteStore {
    pub fn new(len: usize) -> ByteStore {
        let nwords = len.div_ceil(8);
        let mut v = Vec::with_capacity(nwords);
        v.resize_with(nwords, || AtomicU64::new(0));
        ByteStore {
            words: v.into_boxed_slice(),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    fn splice(&self, word: usize, keep_mask: u64, bits: u64, order: Ordering) {
        // CAS-merge bytes into a word shared with neighbouring ranges.
        let slot = &self.words[word];
        let mut cur = slot.load(Ordering::Relaxed);
        loop {
            let next = (cur & keep_mask) | bits;
            match slot.compare_exchange_weak(cur, next, order, Ordering::Relaxed) {
                Ok(_) => return,
                Err(v) => cur = v,
            }
        }
    }

    /// Store `src` at `offset`. Placement is ascending; the last touched word
    /// is released so a reader that acquires it sees the whole range.
    pub fn write(&self, offset: usize, src: &[u8]) {
        assert!(offset + src.len() <= self.len, "byte store write out of range");
        if src.is_empty() {
            return;
        }
        let end = offset + src.len();
        let first_word = offset / 8;
        let last_word = (end - 1) / 8;
        let mut i = 0usize; // bytes of src consumed

        for w in first_word..=last_word {
            let word_base = w * 8;
            let lo = offset.max(word_base) - word_base;
            let hi = end.min(word_base + 8) - word_base;
            let order = if w == last_word { Ordering::Release } else { Ordering::Relaxed };
            let mut bits = 0u64;
            for b in lo..hi {
                bits |= (src[i] as u64) << (b * 8);
                i += 1;
            }
            if lo == 0 && hi == 8 {
                self.words[w].store(bits, order);
            } else {
                let mut keep = !0u64;
                for b in lo..hi {
                    keep &= !(0xffu64 << (b * 8));
                }
                self.splice(w, keep, bits, order);
            }
        }
        debug_assert_eq!(i, src.len());
    }

    /// Relaxed ranged read. Concurrent writers make the result racy per word,
    /// exactly like host memory under DMA; callers that need ordering go
    /// through `load_acquire_u8` first.
    pub fn read(&self, offset: usize, dst: &mut [u8]) {
        assert!(offset + dst.len() <= self.len, "byte store read out of range");
        if dst.is_empty() {
            return;
        }
        let end = offset + dst.len();
        let first_word = offset / 8;
        let last_word = (end - 1) / 8;
        let mut i = 0usize;
        for w in first_word..=last_word {
            let word_base = w * 8;
            let lo = offset.max(word_base) - word_base;
            let hi = end.min(word_base + 8) - word_base;
            let v = self.words[w].load(Ordering::Relaxed);
            for b in lo..hi {
                dst[i] = (v >> (b * 8)) as u8;
                i += 1;
            }
        }
    }

    pub fn load_u8(&self, offset: usize) -> u8 {
        assert!(offset < self.len);
        let v = self.words[offset / 8].load(Ordering::Relaxed);
        (v >> ((offset % 8) * 8)) as u8
    }

    /// Acquire-load one byte. Pairs with the release at the end of `write`:
    /// once a ready marker reads as set, every byte the same write placed
    /// before it is visible.
    pub fn load_acquire_u8(&self, offset: usize) -> u8 {
        assert!(offset < self.len);
        let v = self.words[offset / 8].load(Ordering::Acquire);
        (v >> ((offset % 8) * 8)) as u8
    }

    /// Single-word atomic load; `offset` must be 8-aligned.
    pub fn load_u64(&self, offset: usize) -> u64 {
        assert!(offset % 8 == 0 && offset + 8 <= self.len.next_multiple_of(8));
        self.words[offset / 8].load(Ordering::Relaxed)
    }

    pub fn load_acquire_u64(&self, offset: usize) -> u64 {
        assert!(offset % 8 == 0);
        self.words[offset / 8].load(Ordering::Acquire)
    }

    /// Single-word atomic store; `offset` must be 8-aligned.
    pub fn store_u64(&self, offset: usize, value: u64) {
        assert!(offset % 8 == 0);
        self.words[offset / 8].store(value, Ordering::Release);
    }

    pub fn fill_zero(&self, offset: usize, len: usize) {
        assert!(offset + len <= self.len);
        if len == 0 {
            return;
        }
        let end = offset + len;
        let first_word = offset / 8;
        let last_word = (end - 1) / 8;
        for w in first_word..=last_word {
            let word_base = w * 8;
            let lo = offset.max(word_base) - word_base;
            let hi = end.min(word_base + 8) - word_base;
            if lo == 0 && hi == 8 {
                self.words[w].store(0, Ordering::Relaxed);
            } else {
                let mut keep = !0u64;
                for b in lo..hi {
                    keep &= !(0xffu64 << (b * 8));
                }
                self.splice(w, keep, 0, Ordering::Relaxed);
            }
        }
    }

    pub fn to_vec(&self, offset: usize, len: usize) -> Vec<u8> {
        let mut v = vec![0u8; len];
        self.read(offset, &mut v);
        v
    }
}
