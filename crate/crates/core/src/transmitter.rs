//! Wait-free selective signaling over a shared queue pair.
//!
//! The device caps consecutive unsignaled posts at `u_max`, and signaled
//! completions cost real time, so the goal is one completion per `u_max`
//! posts without any coordination between posting threads. Each post grabs a
//! ticket from a shared counter; the ticket alone decides signaling:
//!
//! * duty: every `u_max`-th ticket posts signaled, certifying its whole group
//!   when the completion arrives (completions are FIFO per queue pair, so a
//!   completion for ticket m certifies every op numbered at or below m);
//! * lag: a ticket more than `u_max` ahead of the applied watermark also
//!   posts signaled. This covers the schedule where a thread grabs a duty
//!   ticket and stalls before posting: later tickets notice the growing gap
//!   and signal on its behalf, so the device never sees an over-long
//!   unsignaled streak. Stale watermark reads only ever add signaling, never
//!   remove it.
//!
//! Nobody owns completions. Every transmit opportunistically drains the
//! completion queue and advances the shared watermark with `fetch_max`;
//! flushing is waiting for the watermark, posting one signaled no-op first if
//! no in-flight completion would cover the target. Buffer recycling hangs off
//! the same watermark: tag a buffer with [`Transmitter::mark`] after posting
//! from it, and the bytes are reusable once the watermark reaches the tag
//! ([`crate::regmem`] checks exactly that).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::sim::{Port, WorkOp, WorkRequest};

/// Applied-watermark target. `TxMark(n)` is reached once the transmitter has
/// proof that the first `n` tickets were applied by the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TxMark(pub u64);

pub struct Transmitter<P: Port> {
    port: Arc<P>,
    u: u64,
    ops: AtomicU64,
    applied: Arc<AtomicU64>,
    /// Tickets covered by an in-flight signaled WRITE/READ/NOP completion.
    /// Signaled SENDs are excluded: their completion waits on a peer RECV,
    /// so a flush cannot rely on them and posts its own no-op instead.
    prompt_cover: AtomicU64,
    signaled_posts: AtomicU64,
    nops_posted: AtomicU64,
    timeout: Duration,
}

impl<P: Port> Transmitter<P> {
    pub fn new(port: Arc<P>) -> Transmitter<P> {
        let u = port.u_max() as u64;
        assert!(u >= 1);
        Transmitter {
            port,
            u,
            ops: AtomicU64::new(0),
            applied: Arc::new(AtomicU64::new(0)),
            prompt_cover: AtomicU64::new(0),
            signaled_posts: AtomicU64::new(0),
            nops_posted: AtomicU64::new(0),
            timeout: Duration::from_secs(10),
        }
    }

    pub fn set_timeout(&mut self, t: Duration) {
        self.timeout = t;
    }

    pub fn port(&self) -> &Arc<P> {
        &self.port
    }

    pub fn u_max(&self) -> u64 {
        self.u
    }

    /// Poll completions and advance the applied watermark. Returns it.
    pub fn drain(&self) -> u64 {
        let mut hi = 0u64;
        while let Some(c) = self.port.send_cq().poll_one() {
            // tag is the ticket; FIFO completion certifies tickets 0..=tag
            hi = hi.max(c.user_tag + 1);
        }
        if hi > 0 {
            self.applied.fetch_max(hi, Ordering::AcqRel);
        }
        self.applied.load(Ordering::Acquire)
    }

    /// Post one work request, deciding signaling from the ticket. Never
    /// waits: no lock is taken and no completion is waited on.
    pub fn transmit(&self, op: WorkOp) -> Result<TxMark> {
        debug_assert!(!matches!(op, WorkOp::Recv { .. }), "recv does not go through transmit");
        self.drain();
        let m = self.ops.fetch_add(1, Ordering::AcqRel);
        let duty = (m + 1) % self.u == 0;
        let lag = m >= self.applied.load(Ordering::Acquire) + self.u;
        let signaled = duty || lag;
        self.port.post(WorkRequest { op, signaled, user_tag: m })?;
        if signaled {
            self.signaled_posts.fetch_add(1, Ordering::Relaxed);
            if !matches!(op, WorkOp::Send { .. }) {
                self.prompt_cover.fetch_max(m + 1, Ordering::AcqRel);
            }
        }
        Ok(TxMark(m + 1))
    }

    /// Recycling watermark covering every post issued so far. Taken after a
    /// post returns, it is safe as a reuse tag for that post's buffers.
    pub fn mark(&self) -> TxMark {
        TxMark(self.ops.load(Ordering::Acquire))
    }

    pub fn applied(&self) -> u64 {
        self.applied.load(Ordering::Acquire)
    }

    pub fn reached(&self, mark: TxMark) -> bool {
        self.applied() >= mark.0
    }

    /// Shared watermark cell for allocator tags and synchronizers.
    pub fn applied_handle(&self) -> Arc<AtomicU64> {
        self.applied.clone()
    }

    /// Wait until everything posted before the call is applied.
    pub fn flush(&self) -> Result<TxMark> {
        let target = TxMark(self.ops.load(Ordering::Acquire));
        self.wait_applied(target)?;
        Ok(target)
    }

    /// Wait for a specific watermark (a past `mark()` or transmit result).
    pub fn wait_applied(&self, target: TxMark) -> Result<()> {
        if self.applied() >= target.0 {
            return Ok(());
        }
        if self.drain() >= target.0 {
            return Ok(());
        }
        // No completion in flight is guaranteed to cover the target: post a
        // signaled no-op. Its ticket is at least the target, and its
        // completion certifies everything before it.
        let deadline = Instant::now() + self.timeout;
        if self.prompt_cover.load(Ordering::Acquire) < target.0 {
            let m = self.ops.fetch_add(1, Ordering::AcqRel);
            loop {
                match self.port.post(WorkRequest { op: WorkOp::Nop, signaled: true, user_tag: m }) {
                    Ok(()) => break,
                    // backlog full of not-yet-applied posts; draining is the cure
                    Err(Error::SendBacklog { .. }) => {
                        if self.drain() >= target.0 {
                            return Ok(());
                        }
                        if Instant::now() >= deadline {
                            return Err(Error::Timeout("transmitter flush"));
                        }
                        std::thread::yield_now();
                    }
                    Err(e) => return Err(e),
                }
            }
            self.signaled_posts.fetch_add(1, Ordering::Relaxed);
            self.nops_posted.fetch_add(1, Ordering::Relaxed);
            self.prompt_cover.fetch_max(m + 1, Ordering::AcqRel);
        }
        loop {
            if self.drain() >= target.0 {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(Error::Timeout("transmitter flush"));
            }
            std::hint::spin_loop();
            std::thread::yield_now();
        }
    }

    pub fn tickets(&self) -> u64 {
        self.ops.load(Ordering::Acquire)
    }

    pub fn signaled_posts(&self) -> u64 {
        self.signaled_posts.load(Ordering::Relaxed)
    }

    pub fn nops_posted(&self) -> u64 {
        self.nops_posted.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RingGrowth;
    use crate::regmem::{CircularAllocator, ZoneArena};
    use crate::sim::{LocalSpan, QueuePair, RemoteSpan, SimConfig, Simulation};

    fn setup(u_max: u32, mut tweak: impl FnMut(&mut SimConfig)) -> (Simulation, QueuePair, QueuePair) {
        let mut cfg = SimConfig::new(2);
        tweak(&mut cfg);
        let sim = Simulation::new(cfg);
        let (qa, qb) = sim.connect(0, 1, u_max).unwrap();
        (sim, qa, qb)
    }

    #[test]
    fn single_thread_signals_exactly_every_u_max() {
        let (sim, qa, _qb) = setup(8, |_| {});
        let src = sim.machine(0).register(0, 4096).unwrap();
        let dst = sim.machine(1).register(0, 4096).unwrap();
        let tx = Transmitter::new(Arc::new(qa));

        for i in 0..10_000u64 {
            tx.transmit(WorkOp::Write {
                local: LocalSpan { region: src.id, offset: (i % 64) * 8, len: 8 },
                remote: RemoteSpan { region: dst.id, offset: (i % 64) * 8 },
            })
            .unwrap();
        }
        tx.flush().unwrap();
        assert_eq!(tx.signaled_posts(), 10_000 / 8);
        assert_eq!(tx.nops_posted(), 0, "flush after a duty post needs no no-op");
        assert_eq!(sim.counters().overflow_faults.load(Ordering::Relaxed), 0);
        assert_eq!(tx.applied(), 10_000);
    }

    #[test]
    fn flush_posts_one_nop_when_nothing_signaled_is_in_flight() {
        let (sim, qa, _qb) = setup(8, |_| {});
        let src = sim.machine(0).register(0, 64).unwrap();
        let dst = sim.machine(1).register(0, 64).unwrap();
        let tx = Transmitter::new(Arc::new(qa));

        for _ in 0..3 {
            tx.transmit(WorkOp::Write {
                local: LocalSpan { region: src.id, offset: 0, len: 8 },
                remote: RemoteSpan { region: dst.id, offset: 0 },
            })
            .unwrap();
        }
        tx.flush().unwrap();
        assert_eq!(tx.nops_posted(), 1);
        assert_eq!(tx.signaled_posts(), 1);
        assert!(tx.applied() >= 3);
        // a second flush with nothing new pending is free
        tx.flush().unwrap();
        assert_eq!(tx.nops_posted(), 1);
    }

    #[test]
    fn concurrent_transmits_never_overflow_device_limit() {
        for u_max in [4u32, 8, 64] {
            let (sim, qa, _qb) = setup(u_max, |c| c.deferred = true);
            let src = sim.machine(0).register(0, 1 << 16).unwrap();
            let dst = sim.machine(1).register(0, 1 << 16).unwrap();
            let _engine = sim.start_engine(200, 0xBEEF);
            let tx = Arc::new(Transmitter::new(Arc::new(qa)));

            let threads: Vec<_> = (0..4)
                .map(|t| {
                    let tx = tx.clone();
                    let (src_id, dst_id) = (src.id, dst.id);
                    std::thread::spawn(move || {
                        for i in 0..2500u64 {
                            let off = ((t as u64 * 2500 + i) % 8192) * 8;
                            tx.transmit(WorkOp::Write {
                                local: LocalSpan { region: src_id, offset: off, len: 8 },
                                remote: RemoteSpan { region: dst_id, offset: off },
                            })
                            .unwrap();
                        }
                    })
                })
                .collect();
            for t in threads {
                t.join().unwrap();
            }
            tx.flush().unwrap();
            assert_eq!(
                sim.counters().overflow_faults.load(Ordering::Relaxed),
                0,
                "u_max={u_max}"
            );
            assert_eq!(tx.applied(), 10_000);
        }
    }

    #[test]
    fn flush_in_deferred_mode_waits_for_the_pump() {
        let (sim, qa, _qb) = setup(4, |c| c.deferred = true);
        let src = sim.machine(0).register(0, 64).unwrap();
        let dst = sim.machine(1).register(0, 64).unwrap();
        let tx = Transmitter::new(Arc::new(qa));
        src.store().write(0, b"deferred");

        tx.transmit(WorkOp::Write {
            local: LocalSpan { region: src.id, offset: 0, len: 8 },
            remote: RemoteSpan { region: dst.id, offset: 0 },
        })
        .unwrap();
        assert_eq!(dst.store().to_vec(0, 8), vec![0; 8]);

        let _engine = sim.start_engine(0, 1);
        tx.flush().unwrap();
        assert_eq!(dst.store().to_vec(0, 8), b"deferred");
    }

    #[test]
    fn recycled_buffers_are_never_overwritten_in_flight() {
        // Deferred delivery holds posted writes back, so reusing a source
        // buffer too early would corrupt them. Each op writes its index to a
        // distinct destination slot; any premature recycle shows up as a
        // wrong value there.
        let (sim, qa, _qb) = setup(4, |c| c.deferred = true);
        let machine = sim.machine(0);
        let dst = sim.machine(1).register(0, 400 * 8).unwrap();
        let _engine = sim.start_engine(500, 7);
        let tx = Transmitter::new(Arc::new(qa));

        let arena = Arc::new(ZoneArena::new(machine, 0, 1 << 20));
        let ring = CircularAllocator::new(arena, 8, 2, 2, RingGrowth::Linear).unwrap();

        for i in 0..400u64 {
            let unit = loop {
                match ring.alloc() {
                    Ok(u) => break u,
                    Err(Error::WouldBlock) => tx.flush().map(|_| ()).unwrap(),
                    Err(e) => panic!("{e}"),
                }
            };
            unit.block().write(0, &i.to_le_bytes());
            tx.transmit(WorkOp::Write {
                local: unit.block().local_span(),
                remote: RemoteSpan { region: dst.id, offset: i * 8 },
            })
            .unwrap();
            unit.retire(tx.applied_handle(), tx.mark().0);
        }
        tx.flush().unwrap();
        for i in 0..400u64 {
            let got = u64::from_le_bytes(dst.store().to_vec(i as usize * 8, 8).try_into().unwrap());
            assert_eq!(got, i, "slot {i} corrupted by premature recycling");
        }
        assert_eq!(sim.counters().overflow_faults.load(Ordering::Relaxed), 0);
    }
}
