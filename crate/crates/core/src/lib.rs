//! Remote-invocation middleware over a verbs-style transport.
//!
//! Layers, bottom up:
//!
//! * [`sim`]: the transport device. Registered memory regions, queue pairs,
//!   one-sided WRITE/READ, two-sided SEND/RECV, completion queues, and the
//!   hardware limits (bounded unsignaled streaks, bounded send backlog) the
//!   upper layers are built to respect. A framed TCP backend lives in
//!   [`sim::stream`].
//! * [`regmem`]: allocators over registered regions. Zoned arenas for
//!   long-lived structures, circular allocators with epoch-tagged reuse for
//!   transmission buffers, and a general allocator for chunks and oversized
//!   blocks.
//! * [`transmitter`]: wait-free selective signaling. Many threads share one
//!   queue pair without coordinating; the transmitter decides which posts are
//!   signaled so the device's unsignaled-streak bound is never exceeded, and
//!   its flush counter tells allocators when buffers are safe to recycle.
//! * [`fabric`]: threads, function registry, synchronizers, and the remote
//!   invocation paths (inline payloads, pre-written buffers, fetched
//!   buffers, returns, broadcasts).
//! * [`messenger`]: chunked ring channels carrying serialized call records
//!   between thread pairs, with receiver-pushed consumption feedback and
//!   in-band growth.
//! * [`aggregator`]: per-destination batching of small records, either by
//!   copying into staging buffers or by passing the channel through and
//!   spilling to an overflow list.

pub mod aggregator;
pub mod config;
pub mod error;
pub mod fabric;
pub mod messenger;
pub mod regmem;
pub mod sim;
pub mod transmitter;

pub use config::{AggMode, Config, RingGrowth};
pub use error::{Error, Result};
