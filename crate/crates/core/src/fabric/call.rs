//! Serialized call records.
//!
//! Every remote invocation travels as one self-delimiting record, 8-aligned
//! so all fixed fields sit on atomic word boundaries:
//!
//! ```text
//! offset 0   total_length  u32   whole record incl. padding and marker
//! offset 4   function      u64
//! offset 12  context_len   u32   bit 31 set when a payload section follows
//! offset 16  context       [context_len]u8
//! then       payload_len   u32   only when the payload bit is set
//! then       payload       [payload_len]u8
//! then       zero padding to 8-byte alignment
//! last byte  marker        0xA5
//! ```
//!
//! The marker is the placement guard. One-sided writes land in increasing
//! address order at word granularity, so once a reader sees the marker at
//! `total_length - 1` under an acquire load, every byte of the record is
//! visible; the padding shares the marker's final word and lands with it.
//! A visible `total_length` with a missing marker means the record is still
//! in flight (a partial placement), never corrupt: consumed bytes are zeroed
//! before a chunk is reused, so stale markers cannot survive.
//!
//! Records are encoded exactly once, directly into registered memory.
//! The global [`serialize_count`] counts encodes; tests use it to prove the
//! batching paths forward bytes instead of re-serializing.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::sim::ByteStore;

pub const MARKER: u8 = 0xA5;
pub const HAS_PAYLOAD: u32 = 1 << 31;
/// Fixed header: total_length + function + context_len.
pub const RECORD_HEADER: u32 = 16;
/// Smallest legal record: empty context, no payload, padded.
pub const MIN_RECORD: u32 = 24;

// Function ids below this are protocol-internal.
pub const FID_WRAP: u64 = 0;
pub const FID_SHUTDOWN: u64 = 1;
pub const FID_SYNC_NOTIFY: u64 = 2;
pub const FID_ALLOC_CHUNKS: u64 = 3;
pub const FID_BCAST: u64 = 4;
pub const FID_CALL_RETURN: u64 = 5;
pub const FID_FETCH_INVOKE: u64 = 6;
pub const FID_CALL_NOTE: u64 = 7;
pub const FID_BUF_WRITE: u64 = 8;
pub const FID_USER_BASE: u64 = 64;

static SERIALIZE_COUNT: AtomicU64 = AtomicU64::new(0);

/// Number of record encodes performed by this process.
pub fn serialize_count() -> u64 {
    SERIALIZE_COUNT.load(Ordering::Relaxed)
}

/// Record size for a context of `ctx_len` bytes and an optional payload.
pub fn record_len(ctx_len: u32, payload: Option<u32>) -> u32 {
    let body = RECORD_HEADER
        + ctx_len
        + match payload {
            Some(p) => 4 + p,
            None => 0,
        };
    // at least one trailing byte for the marker, then round up to 8
    (body + 1 + 7) & !7
}

#[derive(Debug, Clone, Copy)]
pub struct RecordSpec<'a> {
    pub function: u64,
    pub context: &'a [u8],
    pub payload: Option<&'a [u8]>,
}

impl<'a> RecordSpec<'a> {
    pub fn encoded_len(&self) -> u32 {
        record_len(self.context.len() as u32, self.payload.map(|p| p.len() as u32))
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

/// Encode one record at `base` (8-aligned) in `store`. Returns the record
/// length. This is the only place records are serialized; everything
/// downstream moves the encoded bytes without looking inside.
pub fn encode_record(store: &ByteStore, base: usize, spec: &RecordSpec) -> u32 {
    debug_assert_eq!(base % 8, 0);
    let total = spec.encoded_len();
    SCRATCH.with(|s| {
        let mut buf = s.borrow_mut();
        buf.clear();
        buf.reserve(total as usize);
        buf.extend_from_slice(&total.to_le_bytes());
        buf.extend_from_slice(&spec.function.to_le_bytes());
        let mut ctx_word = spec.context.len() as u32;
        debug_assert!(ctx_word < HAS_PAYLOAD);
        if spec.payload.is_some() {
            ctx_word |= HAS_PAYLOAD;
        }
        buf.extend_from_slice(&ctx_word.to_le_bytes());
        buf.extend_from_slice(spec.context);
        if let Some(p) = spec.payload {
            buf.extend_from_slice(&(p.len() as u32).to_le_bytes());
            buf.extend_from_slice(p);
        }
        buf.resize(total as usize - 1, 0);
        buf.push(MARKER);
        store.write(base, &buf);
    });
    SERIALIZE_COUNT.fetch_add(1, Ordering::Relaxed);
    total
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedCall {
    pub function: u64,
    pub context: Vec<u8>,
    pub payload: Option<Vec<u8>>,
    pub total: u32,
}

/// Result of probing `base` for a record.
#[derive(Debug)]
pub enum Scan {
    /// Nothing here yet (length word still zero).
    Empty,
    /// Length is visible but the marker has not landed: mid-placement.
    Partial,
    Record(DecodedCall),
}

/// Probe for a record at `base` with `space` bytes of chunk left.
///
/// Protocol: read the length word (atomic, so never torn), bail if zero;
/// acquire-load the marker byte; only then touch the rest. A structurally
/// impossible length is corruption, not a wait state.
pub fn scan_record(store: &ByteStore, base: usize, space: u32) -> Result<Scan> {
    debug_assert_eq!(base % 8, 0);
    let total = store.load_u64(base) as u32;
    if total == 0 {
        return Ok(Scan::Empty);
    }
    if total < MIN_RECORD || total > space || total % 8 != 0 {
        return Err(Error::BadRecord(format!(
            "length {total} at offset {base} (space {space})"
        )));
    }
    if store.load_acquire_u8(base + total as usize - 1) != MARKER {
        return Ok(Scan::Partial);
    }
    let bytes = store.to_vec(base, total as usize);
    let function = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let ctx_word = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let has_payload = ctx_word & HAS_PAYLOAD != 0;
    let ctx_len = (ctx_word & !HAS_PAYLOAD) as usize;
    let mut at = RECORD_HEADER as usize;
    if at + ctx_len > total as usize {
        return Err(Error::BadRecord(format!("context {ctx_len} overruns record {total}")));
    }
    let context = bytes[at..at + ctx_len].to_vec();
    at += ctx_len;
    let payload = if has_payload {
        if at + 4 > total as usize {
            return Err(Error::BadRecord("payload length field overruns record".into()));
        }
        let plen = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        if at + plen + 1 > total as usize {
            return Err(Error::BadRecord(format!("payload {plen} overruns record {total}")));
        }
        Some(bytes[at..at + plen].to_vec())
    } else {
        None
    };
    Ok(Scan::Record(DecodedCall { function, context, payload, total }))
}
