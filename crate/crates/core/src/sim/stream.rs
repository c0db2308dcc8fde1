//! TCP stream backend.
//!
//! Same verbs surface as the in-process device, framed over a socket so the
//! transmitter and benchmarks can run across real processes. One frame per
//! work request:
//!
//! ```text
//! magic   u32 LE  0x53524D41
//! type    u8      1=SEND 2=WRITE 3=READ_REQ 4=READ_RESP 5=CONNECT 6=CONNECT_ACK
//! qp_id   u32 LE
//! region  u32 LE  (target region for WRITE/READ; 0 otherwise)
//! offset  u64 LE
//! length  u32 LE  (payload bytes, or requested bytes for READ_REQ)
//! payload [length]u8
//! ```
//!
//! Semantics differ from the in-process device in two honest ways: payloads
//! are copied into the frame at post time, so source buffers are reusable as
//! soon as `post` returns, and a signaled completion certifies ordered
//! delivery into the socket rather than remote placement. TCP ordering plus
//! in-order apply on the reader thread preserves the FIFO guarantees the
//! record protocol relies on.

use std::collections::{HashMap, VecDeque};
use std::io::Write as _;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Error, Result};

use super::{
    ByteStore, CompletionEntry, CompletionKind, CompletionQueue, Port, QpId, RegionId, WorkOp,
    WorkRequest,
};

pub const FRAME_MAGIC: u32 = 0x5352_4D41;
pub const FRAME_HEADER_LEN: usize = 25;

pub const MSG_SEND: u8 = 1;
pub const MSG_WRITE: u8 = 2;
pub const MSG_READ_REQ: u8 = 3;
pub const MSG_READ_RESP: u8 = 4;
pub const MSG_CONNECT: u8 = 5;
pub const MSG_CONNECT_ACK: u8 = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub qp_id: QpId,
    pub region: RegionId,
    pub offset: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&FRAME_MAGIC.to_le_bytes());
        out.push(self.msg_type);
        out.extend_from_slice(&self.qp_id.to_le_bytes());
        out.extend_from_slice(&self.region.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn read_from(stream: &mut impl std::io::Read) -> Result<Frame> {
        let mut hdr = [0u8; FRAME_HEADER_LEN];
        stream.read_exact(&mut hdr)?;
        let magic = u32::from_le_bytes(hdr[0..4].try_into().unwrap());
        if magic != FRAME_MAGIC {
            return Err(Error::Stream(format!("bad frame magic {magic:#x}")));
        }
        let msg_type = hdr[4];
        let qp_id = u32::from_le_bytes(hdr[5..9].try_into().unwrap());
        let region = u32::from_le_bytes(hdr[9..13].try_into().unwrap());
        let offset = u64::from_le_bytes(hdr[13..21].try_into().unwrap());
        let length = u32::from_le_bytes(hdr[21..25].try_into().unwrap());
        let mut payload = vec![0u8; length as usize];
        stream.read_exact(&mut payload)?;
        Ok(Frame { msg_type, qp_id, region, offset, payload })
    }
}

struct StreamRegion {
    store: ByteStore,
}

/// One process's endpoint registry: regions plus a listener for peers.
pub struct StreamHub {
    listener: TcpListener,
    regions: Arc<RwLock<HashMap<RegionId, Arc<StreamRegion>>>>,
    next_region: AtomicU32,
    next_qp: AtomicU32,
    default_u_max: u32,
}

impl StreamHub {
    pub fn bind(addr: &str, default_u_max: u32) -> Result<StreamHub> {
        let listener = TcpListener::bind(addr)?;
        Ok(StreamHub {
            listener,
            regions: Arc::new(RwLock::new(HashMap::new())),
            next_region: AtomicU32::new(0),
            next_qp: AtomicU32::new(0),
            default_u_max,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn register(&self, len: u64) -> RegionId {
        let id = self.next_region.fetch_add(1, Ordering::Relaxed);
        self.regions
            .write()
            .unwrap()
            .insert(id, Arc::new(StreamRegion { store: ByteStore::new(len as usize) }));
        id
    }

    pub fn region_bytes(&self, id: RegionId, offset: usize, len: usize) -> Option<Vec<u8>> {
        let regions = self.regions.read().unwrap();
        let r = regions.get(&id)?;
        Some(r.store.to_vec(offset, len))
    }

    pub fn write_region(&self, id: RegionId, offset: usize, bytes: &[u8]) -> Result<()> {
        let regions = self.regions.read().unwrap();
        let r = regions
            .get(&id)
            .ok_or(Error::Stream(format!("no region {id}")))?;
        r.store.write(offset, bytes);
        Ok(())
    }

    /// Accept one inbound connection and return our endpoint for it.
    pub fn accept(&self) -> Result<StreamQp> {
        let (mut stream, _) = self.listener.accept()?;
        let hello = Frame::read_from(&mut stream)?;
        if hello.msg_type != MSG_CONNECT {
            return Err(Error::Stream("expected CONNECT".into()));
        }
        let my_id = self.next_qp.fetch_add(1, Ordering::Relaxed);
        let ack = Frame {
            msg_type: MSG_CONNECT_ACK,
            qp_id: my_id,
            region: 0,
            offset: 0,
            payload: Vec::new(),
        };
        stream.write_all(&ack.encode())?;
        StreamQp::start(stream, my_id, self.default_u_max, self.regions.clone())
    }

    /// Dial a peer hub and return our endpoint.
    pub fn connect(&self, addr: SocketAddr) -> Result<StreamQp> {
        let mut stream = TcpStream::connect(addr)?;
        let my_id = self.next_qp.fetch_add(1, Ordering::Relaxed);
        let hello = Frame {
            msg_type: MSG_CONNECT,
            qp_id: my_id,
            region: 0,
            offset: 0,
            payload: Vec::new(),
        };
        stream.write_all(&hello.encode())?;
        let ack = Frame::read_from(&mut stream)?;
        if ack.msg_type != MSG_CONNECT_ACK {
            return Err(Error::Stream("expected CONNECT_ACK".into()));
        }
        StreamQp::start(stream, my_id, self.default_u_max, self.regions.clone())
    }
}

struct PendingRead {
    region: Arc<StreamRegion>,
    offset: u64,
    len: u32,
    signaled: bool,
    user_tag: u64,
}

struct PostedRecv {
    region: Arc<StreamRegion>,
    offset: u64,
    len: u32,
    user_tag: u64,
}

struct StreamShared {
    regions: Arc<RwLock<HashMap<RegionId, Arc<StreamRegion>>>>,
    writer: Mutex<TcpStream>,
    send_cq: Arc<CompletionQueue>,
    recv_cq: Arc<CompletionQueue>,
    pending_reads: Mutex<VecDeque<PendingRead>>,
    rq: Mutex<VecDeque<PostedRecv>>,
    inbound: Mutex<VecDeque<Vec<u8>>>,
    closed: AtomicBool,
    id: QpId,
}

impl StreamShared {
    fn resolve(&self, id: RegionId, offset: u64, len: u32) -> Result<Arc<StreamRegion>> {
        let regions = self.regions.read().unwrap();
        let r = regions.get(&id).ok_or(Error::OutOfRange {
            region: id,
            offset,
            len: len as u64,
            cap: 0,
        })?;
        if offset + len as u64 > r.store.len() as u64 {
            return Err(Error::OutOfRange {
                region: id,
                offset,
                len: len as u64,
                cap: r.store.len() as u64,
            });
        }
        Ok(r.clone())
    }

    fn write_frame(&self, f: &Frame) -> Result<()> {
        if self.closed.load(Ordering::Relaxed) {
            return Err(Error::Stream("connection closed".into()));
        }
        let bytes = f.encode();
        let mut w = self.writer.lock().unwrap();
        w.write_all(&bytes)?;
        Ok(())
    }

    fn handle(&self, f: Frame) -> Result<()> {
        match f.msg_type {
            MSG_WRITE => {
                let r = self.resolve(f.region, f.offset, f.payload.len() as u32)?;
                r.store.write(f.offset as usize, &f.payload);
            }
            MSG_SEND => {
                let recv = self.rq.lock().unwrap().pop_front();
                match recv {
                    Some(recv) => self.deliver(recv, &f.payload),
                    None => self.inbound.lock().unwrap().push_back(f.payload),
                }
            }
            MSG_READ_RESP => {
                let pending = self
                    .pending_reads
                    .lock()
                    .unwrap()
                    .pop_front()
                    .ok_or(Error::Stream("READ_RESP with no pending read".into()))?;
                let n = pending.len.min(f.payload.len() as u32) as usize;
                pending.region.store.write(pending.offset as usize, &f.payload[..n]);
                if pending.signaled {
                    self.send_cq.push(CompletionEntry {
                        qp: self.id,
                        user_tag: pending.user_tag,
                        kind: CompletionKind::Read,
                    });
                }
            }
            other => return Err(Error::Stream(format!("unexpected frame type {other}"))),
        }
        Ok(())
    }

    fn deliver(&self, recv: PostedRecv, payload: &[u8]) {
        let n = (recv.len as usize).min(payload.len());
        recv.region.store.write(recv.offset as usize, &payload[..n]);
        self.recv_cq.push(CompletionEntry {
            qp: self.id,
            user_tag: recv.user_tag,
            kind: CompletionKind::Recv { len: n as u32 },
        });
    }
}

/// One endpoint of a framed TCP connection between two hubs.
pub struct StreamQp {
    shared: Arc<StreamShared>,
    u_max: u32,
    unsignaled_streak: Mutex<u32>,
    reader: Mutex<Option<std::thread::JoinHandle<()>>>,
}

impl StreamQp {
    fn start(
        stream: TcpStream,
        id: QpId,
        u_max: u32,
        regions: Arc<RwLock<HashMap<RegionId, Arc<StreamRegion>>>>,
    ) -> Result<StreamQp> {
        stream.set_nodelay(true)?;
        let reader_half = stream.try_clone()?;
        let shared = Arc::new(StreamShared {
            regions,
            writer: Mutex::new(stream),
            send_cq: CompletionQueue::new_for_stream(),
            recv_cq: CompletionQueue::new_for_stream(),
            pending_reads: Mutex::new(VecDeque::new()),
            rq: Mutex::new(VecDeque::new()),
            inbound: Mutex::new(VecDeque::new()),
            closed: AtomicBool::new(false),
            id,
        });
        let shared2 = shared.clone();
        let reader = std::thread::spawn(move || {
            let mut stream = reader_half;
            loop {
                let frame = match Frame::read_from(&mut stream) {
                    Ok(f) => f,
                    Err(_) => break,
                };
                if frame.msg_type == MSG_READ_REQ {
                    // Serve the read from our regions and reply in arrival
                    // order; the requester matches responses FIFO. The
                    // requested byte count rides in the 4-byte payload.
                    let want = if frame.payload.len() == 4 {
                        u32::from_le_bytes(frame.payload[..4].try_into().unwrap())
                    } else {
                        0
                    };
                    let resp = match shared2.resolve(frame.region, frame.offset, want) {
                        Ok(r) => r.store.to_vec(frame.offset as usize, want as usize),
                        Err(_) => Vec::new(),
                    };
                    let _ = shared2.write_frame(&Frame {
                        msg_type: MSG_READ_RESP,
                        qp_id: shared2.id,
                        region: frame.region,
                        offset: frame.offset,
                        payload: resp,
                    });
                    continue;
                }
                if shared2.handle(frame).is_err() {
                    break;
                }
            }
            shared2.closed.store(true, Ordering::Relaxed);
        });
        Ok(StreamQp {
            shared,
            u_max,
            unsignaled_streak: Mutex::new(0),
            reader: Mutex::new(Some(reader)),
        })
    }

    pub fn recv_cq(&self) -> &Arc<CompletionQueue> {
        &self.shared.recv_cq
    }

    pub fn post(&self, wr: WorkRequest) -> Result<()> {
        if let WorkOp::Recv { local } = wr.op {
            let region = self.shared.resolve(local.region, local.offset, local.len)?;
            let queued = self.shared.inbound.lock().unwrap().pop_front();
            match queued {
                Some(payload) => self.shared.deliver(
                    PostedRecv {
                        region,
                        offset: local.offset,
                        len: local.len,
                        user_tag: wr.user_tag,
                    },
                    &payload,
                ),
                None => self.shared.rq.lock().unwrap().push_back(PostedRecv {
                    region,
                    offset: local.offset,
                    len: local.len,
                    user_tag: wr.user_tag,
                }),
            }
            return Ok(());
        }

        {
            let mut streak = self.unsignaled_streak.lock().unwrap();
            if wr.signaled {
                *streak = 0;
            } else {
                if *streak + 1 > self.u_max {
                    return Err(Error::QpOverflow {
                        qp: self.shared.id,
                        streak: *streak + 1,
                        u_max: self.u_max,
                    });
                }
                *streak += 1;
            }
        }

        match wr.op {
            WorkOp::Send { local } => {
                let r = self.shared.resolve(local.region, local.offset, local.len)?;
                let payload = r.store.to_vec(local.offset as usize, local.len as usize);
                self.shared.write_frame(&Frame {
                    msg_type: MSG_SEND,
                    qp_id: self.shared.id,
                    region: 0,
                    offset: 0,
                    payload,
                })?;
                if wr.signaled {
                    self.complete(wr.user_tag, CompletionKind::Send);
                }
            }
            WorkOp::Write { local, remote } => {
                let r = self.shared.resolve(local.region, local.offset, local.len)?;
                let payload = r.store.to_vec(local.offset as usize, local.len as usize);
                self.shared.write_frame(&Frame {
                    msg_type: MSG_WRITE,
                    qp_id: self.shared.id,
                    region: remote.region,
                    offset: remote.offset,
                    payload,
                })?;
                if wr.signaled {
                    self.complete(wr.user_tag, CompletionKind::Write);
                }
            }
            WorkOp::Read { local, remote } => {
                let region = self.shared.resolve(local.region, local.offset, local.len)?;
                self.shared.pending_reads.lock().unwrap().push_back(PendingRead {
                    region,
                    offset: local.offset,
                    len: local.len,
                    signaled: wr.signaled,
                    user_tag: wr.user_tag,
                });
                self.shared.write_frame(&Frame {
                    msg_type: MSG_READ_REQ,
                    qp_id: self.shared.id,
                    region: remote.region,
                    offset: remote.offset,
                    payload: local.len.to_le_bytes().to_vec(),
                })?;
            }
            WorkOp::Nop => {
                if wr.signaled {
                    self.complete(wr.user_tag, CompletionKind::Nop);
                }
            }
            WorkOp::Recv { .. } => unreachable!(),
        }
        Ok(())
    }

    fn complete(&self, user_tag: u64, kind: CompletionKind) {
        self.shared.send_cq.push(CompletionEntry { qp: self.shared.id, user_tag, kind });
    }
}

impl Port for StreamQp {
    fn post(&self, wr: WorkRequest) -> Result<()> {
        StreamQp::post(self, wr)
    }

    fn send_cq(&self) -> &Arc<CompletionQueue> {
        &self.shared.send_cq
    }

    fn u_max(&self) -> u32 {
        self.u_max
    }
}

impl Drop for StreamQp {
    fn drop(&mut self) {
        self.shared.closed.store(true, Ordering::Relaxed);
        if let Ok(w) = self.shared.writer.lock() {
            let _ = w.shutdown(std::net::Shutdown::Both);
        }
        if let Some(t) = self.reader.lock().unwrap().take() {
            let _ = t.join();
        }
    }
}

impl CompletionQueue {
    fn new_for_stream() -> Arc<CompletionQueue> {
        CompletionQueue::new(0)
    }
}
