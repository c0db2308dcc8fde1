//! Call-completion accounting.
//!
//! A synchronizer is a signed balance over attached calls: each attachment
//! adds one, and exactly one completion event of the chosen kind takes it
//! back. Transmit-level completions settle against a transmitter's applied
//! watermark; consume-level completions arrive either through a one-sided
//! write into a caller-owned cell or as a notification record that the
//! destination routes back to the origin's [`SyncTable`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};

use crate::error::{Error, Result};

/// When an attached call counts as complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncMode {
    /// The record has left this thread: its transmission was applied by the
    /// device, or it was handed to a local queue.
    OnTransmit,
    /// The destination ran the function.
    OnRemoteConsume,
}

struct SyncInner {
    id: u64,
    mode: SyncMode,
    raw: AtomicI64,
    /// Transmit obligations; each settles (and subtracts one) when its
    /// watermark reaches its mark.
    pending: Mutex<Vec<(Arc<AtomicU64>, u64)>>,
}

/// Cloneable handle to one balance. Create through [`SyncTable::create`] so
/// remote notifications can find it by id.
#[derive(Clone)]
pub struct Synchronizer(Arc<SyncInner>);

impl Synchronizer {
    /// Nonzero, unique within the owning process. Zero on the wire means
    /// "no synchronizer attached".
    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn mode(&self) -> SyncMode {
        self.0.mode
    }

    pub fn add(&self, n: i64) {
        self.0.raw.fetch_add(n, Ordering::AcqRel);
    }

    pub fn sub(&self, n: i64) {
        self.0.raw.fetch_sub(n, Ordering::AcqRel);
    }

    /// Register a transmit obligation already counted by [`add`](Self::add).
    pub fn track(&self, applied: Arc<AtomicU64>, mark: u64) {
        self.0.pending.lock().unwrap().push((applied, mark));
    }

    /// Settle every reached transmit obligation, then report the balance.
    pub fn balance(&self) -> i64 {
        let mut p = self.0.pending.lock().unwrap();
        let before = p.len();
        p.retain(|(applied, mark)| applied.load(Ordering::Acquire) < *mark);
        let done = (before - p.len()) as i64;
        drop(p);
        if done > 0 {
            self.0.raw.fetch_sub(done, Ordering::AcqRel);
        }
        self.0.raw.load(Ordering::Acquire)
    }

    pub fn settled(&self) -> bool {
        self.balance() == 0
    }
}

/// Per-process registry of live synchronizers, used by service threads to
/// apply notification records. Holds weak handles only, so dropping every
/// user clone retires the entry.
pub struct SyncTable {
    next: AtomicU64,
    live: Mutex<HashMap<u64, Weak<SyncInner>>>,
}

impl Default for SyncTable {
    fn default() -> Self {
        Self::new()
    }
}

impl SyncTable {
    pub fn new() -> SyncTable {
        SyncTable { next: AtomicU64::new(1), live: Mutex::new(HashMap::new()) }
    }

    pub fn create(&self, mode: SyncMode) -> Synchronizer {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        let inner = Arc::new(SyncInner {
            id,
            mode,
            raw: AtomicI64::new(0),
            pending: Mutex::new(Vec::new()),
        });
        self.live.lock().unwrap().insert(id, Arc::downgrade(&inner));
        Synchronizer(inner)
    }

    /// Subtract `delta` completions from synchronizer `id`. False when the
    /// synchronizer is gone, which is fine: nobody is waiting on it.
    pub fn apply(&self, id: u64, delta: i64) -> bool {
        let mut live = self.live.lock().unwrap();
        match live.get(&id).and_then(Weak::upgrade) {
            Some(inner) => {
                inner.raw.fetch_sub(delta, Ordering::AcqRel);
                true
            }
            None => {
                live.remove(&id);
                false
            }
        }
    }
}

/// Notification record context: synchronizer id, then the completion count.
pub fn encode_notify(id: u64, delta: i64) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[0..8].copy_from_slice(&id.to_le_bytes());
    b[8..16].copy_from_slice(&delta.to_le_bytes());
    b
}

pub fn decode_notify(ctx: &[u8]) -> Result<(u64, i64)> {
    if ctx.len() != 16 {
        return Err(Error::BadRecord(format!("notify context of {} bytes", ctx.len())));
    }
    Ok((
        u64::from_le_bytes(ctx[0..8].try_into().unwrap()),
        i64::from_le_bytes(ctx[8..16].try_into().unwrap()),
    ))
}
