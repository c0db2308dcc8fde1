//! Queue-pair message-rate bench: manual signaling vs the transmitter.
//!
//! `raw` posts SENDs directly, signaling every `u_max`-th by hand and
//! polling the completion queue itself. `raw+auto` pushes the same
//! operations through a [`Transmitter`], which owns the signaling duty and
//! the applied watermark. Same wire traffic either way; the spread between
//! the two rows is the bookkeeping cost of the automatic layer.
//!
//! The receiver is a thread keeping a fixed window of RECVs posted and
//! counting completion bytes; a run finishes when it has consumed every
//! message, so rates include delivery, not just posting.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use remi_core::error::Error;
use remi_core::sim::stream::{StreamHub, StreamQp};
use remi_core::sim::{
    CompletionKind, CompletionQueue, CostModel, LocalSpan, Port, QueuePair, RegionId, SimConfig,
    Simulation, WorkOp, WorkRequest,
};
use remi_core::transmitter::Transmitter;

pub const MODES: [&str; 2] = ["raw", "raw+auto"];

/// How many send buffers the sender cycles through and how many RECVs the
/// receiver keeps posted. Contents never matter, only spans.
const SEND_SLOTS: u64 = 64;
const RECV_WINDOW: u64 = 256;

#[derive(Debug, Clone)]
pub struct Row {
    pub mode: &'static str,
    pub size: u32,
    pub msgs_per_sec: f64,
    pub mb_per_sec: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Sim,
    Stream,
}

/// A queue pair the bench can drive from both ends: posts plus both
/// completion queues. The send side comes from [`Port`].
pub trait Endpoint: Port {
    fn recv_cq(&self) -> &Arc<CompletionQueue>;
}

impl Endpoint for QueuePair {
    fn recv_cq(&self) -> &Arc<CompletionQueue> {
        QueuePair::recv_cq(self)
    }
}

impl Endpoint for StreamQp {
    fn recv_cq(&self) -> &Arc<CompletionQueue> {
        StreamQp::recv_cq(self)
    }
}

fn span(region: RegionId, slot: u64, size: u32) -> LocalSpan {
    LocalSpan { region, offset: slot * size as u64, len: size }
}

/// Keep `RECV_WINDOW` buffers posted until `count` messages landed; returns
/// the payload bytes consumed.
fn receive<E: Endpoint>(qp: &E, region: RegionId, size: u32, count: u64, ready: &AtomicBool) -> u64 {
    let window = RECV_WINDOW.min(count);
    for slot in 0..window {
        qp.post(WorkRequest {
            op: WorkOp::Recv { local: span(region, slot, size) },
            signaled: true,
            user_tag: slot,
        })
        .expect("recv post");
    }
    ready.store(true, Ordering::Release);
    let mut bytes = 0u64;
    let mut seen = 0u64;
    while seen < count {
        let Some(e) = qp.recv_cq().poll_one() else {
            std::hint::spin_loop();
            continue;
        };
        let CompletionKind::Recv { len } = e.kind else {
            panic!("unexpected completion {:?} on the recv queue", e.kind)
        };
        bytes += len as u64;
        seen += 1;
        if count - seen >= window {
            // recycle the slot; content is never read, so reuse is safe
            qp.post(WorkRequest {
                op: WorkOp::Recv { local: span(region, e.user_tag, size) },
                signaled: true,
                user_tag: e.user_tag,
            })
            .expect("recv repost");
        }
    }
    bytes
}

fn send_raw<E: Endpoint>(qp: &E, region: RegionId, size: u32, count: u64) {
    let u = qp.u_max() as u64;
    for i in 0..count {
        let wr = WorkRequest {
            op: WorkOp::Send { local: span(region, i % SEND_SLOTS, size) },
            signaled: (i + 1) % u == 0,
            user_tag: i,
        };
        loop {
            match qp.post(wr) {
                Ok(()) => break,
                Err(Error::SendBacklog { .. }) => {
                    qp.send_cq().poll(64);
                    std::thread::yield_now();
                }
                Err(e) => panic!("raw send failed: {e}"),
            }
        }
        if wr.signaled {
            qp.send_cq().poll(64);
        }
    }
    // one signaled no-op marks the tail; its completion means every earlier
    // post was applied in order
    qp.post(WorkRequest { op: WorkOp::Nop, signaled: true, user_tag: count })
        .expect("tail nop");
    loop {
        if qp.send_cq().poll(64).iter().any(|e| e.user_tag == count) {
            return;
        }
        std::hint::spin_loop();
    }
}

fn send_auto<E: Endpoint>(tx: &Transmitter<E>, region: RegionId, size: u32, count: u64) {
    for i in 0..count {
        let op = WorkOp::Send { local: span(region, i % SEND_SLOTS, size) };
        loop {
            match tx.transmit(op) {
                Ok(_) => break,
                Err(Error::SendBacklog { .. }) => {
                    tx.drain();
                    std::thread::yield_now();
                }
                Err(e) => panic!("transmit failed: {e}"),
            }
        }
    }
    let mark = tx.flush().expect("flush");
    tx.wait_applied(mark).expect("tail drain");
}

/// One timed rep: sender and receiver threads, clock stops when the receiver
/// consumed everything. Returns (elapsed seconds, bytes received).
fn run_rep<E: Endpoint>(qa: Arc<E>, qb: Arc<E>, regions: (RegionId, RegionId), size: u32, count: u64, auto: bool) -> (f64, u64) {
    let ready = Arc::new(AtomicBool::new(false));
    let rx = {
        let ready = ready.clone();
        std::thread::spawn(move || receive(&*qb, regions.1, size, count, &ready))
    };
    while !ready.load(Ordering::Acquire) {
        std::hint::spin_loop();
    }
    let t0 = Instant::now();
    if auto {
        let tx = Transmitter::new(qa);
        send_auto(&tx, regions.0, size, count);
    } else {
        send_raw(&*qa, regions.0, size, count);
    }
    let bytes = rx.join().expect("receiver");
    (t0.elapsed().as_secs_f64(), bytes)
}

fn rows_for<E, F>(sizes: &[u32], count: u64, reps: u32, mut setup: F) -> Vec<Row>
where
    E: Endpoint,
    F: FnMut(u32) -> (Arc<E>, Arc<E>, (RegionId, RegionId)),
{
    assert!(count > 0 && reps > 0);
    let mut out = Vec::new();
    for &size in sizes {
        for (mi, &mode) in MODES.iter().enumerate() {
            let mut secs = 0.0;
            let mut bytes = 0u64;
            for _ in 0..reps {
                // a fresh pair per rep so leftover signaling state never
                // leaks between measurements
                let (qa, qb, regions) = setup(size);
                let (s, b) = run_rep(qa, qb, regions, size, count, mi == 1);
                secs += s;
                bytes += b;
            }
            assert_eq!(
                bytes,
                count * size as u64 * reps as u64,
                "transport bench lost bytes in {mode}/{size}"
            );
            let mean = secs / reps as f64;
            out.push(Row {
                mode,
                size,
                msgs_per_sec: count as f64 / mean,
                mb_per_sec: (count * size as u64) as f64 / mean / 1e6,
            });
        }
    }
    out
}

/// Run the bench on the chosen backend. `u_max` bounds unsignaled streaks
/// on both; the in-process device also enforces it as a fault.
pub fn rows(backend: Backend, sizes: &[u32], count: u64, u_max: u32, reps: u32) -> Vec<Row> {
    match backend {
        Backend::Sim => {
            let mut cfg = SimConfig::new(2);
            cfg.cost = CostModel::nic_like();
            let sim = Simulation::new(cfg);
            let rows = rows_for(sizes, count, reps, |size| {
                let (qa, qb) = sim.connect(0, 1, u_max).expect("connect");
                let sreg = sim.machine(0).register(0, SEND_SLOTS * size as u64).expect("send region");
                let rreg = sim
                    .machine(1)
                    .register(0, RECV_WINDOW * size as u64)
                    .expect("recv region");
                (Arc::new(qa), Arc::new(qb), (sreg.id, rreg.id))
            });
            let c = sim.counters();
            assert_eq!(c.overflow_faults.load(Ordering::Relaxed), 0, "signaling overflowed the device");
            rows
        }
        Backend::Stream => {
            let hub_a = StreamHub::bind("127.0.0.1:0", u_max).expect("bind a");
            let hub_b = Arc::new(StreamHub::bind("127.0.0.1:0", u_max).expect("bind b"));
            let addr = hub_b.local_addr().expect("addr");
            rows_for(sizes, count, reps, |size| {
                let sreg = hub_a.register(SEND_SLOTS * size as u64);
                let rreg = hub_b.register(RECV_WINDOW * size as u64);
                let accept = {
                    let hub_b = hub_b.clone();
                    std::thread::spawn(move || hub_b.accept().expect("accept"))
                };
                let qa = hub_a.connect(addr).expect("connect");
                let qb = accept.join().expect("accept thread");
                (Arc::new(qa), Arc::new(qb), (sreg, rreg))
            })
        }
    }
}
