//! Search-tree nodes: one owner thread per node, atomic per-move slots.
//!
//! A slot starts UNEXPANDED, moves to PENDING when an expansion claims it,
//! and settles as either a child locator or a terminal marker. It never moves
//! backwards. Visit counters are plain relaxed atomics: structural mutation
//! stays on the owner thread, counters are read cross-thread for reports and
//! post-run audits only.

use crate::Player;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};

/// Where a node lives: owning thread (flat id) and index in its table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Locator {
    pub owner: u32,
    pub idx: u32,
}

impl Locator {
    pub fn pack(self) -> u64 {
        (self.owner as u64) << 32 | self.idx as u64
    }

    pub fn unpack(raw: u64) -> Locator {
        Locator { owner: (raw >> 32) as u32, idx: raw as u32 }
    }
}

/// Decoded state of one move slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Unexpanded,
    /// Claimed by an expansion; the child is being created elsewhere.
    Pending,
    /// The move ends the game immediately; no node is built for it.
    Terminal(Player),
    Child(Locator),
}

const RAW_UNEXPANDED: u64 = 0;
const RAW_PENDING: u64 = 1;
const RAW_TERM_P1: u64 = 2;
const RAW_TERM_P2: u64 = 3;
const RAW_CHILD_BASE: u64 = 4;

fn slot_encode(s: Slot) -> u64 {
    match s {
        Slot::Unexpanded => RAW_UNEXPANDED,
        Slot::Pending => RAW_PENDING,
        Slot::Terminal(Player::P1) => RAW_TERM_P1,
        Slot::Terminal(Player::P2) => RAW_TERM_P2,
        Slot::Child(loc) => loc.pack() + RAW_CHILD_BASE,
    }
}

fn slot_decode(raw: u64) -> Slot {
    match raw {
        RAW_UNEXPANDED => Slot::Unexpanded,
        RAW_PENDING => Slot::Pending,
        RAW_TERM_P1 => Slot::Terminal(Player::P1),
        RAW_TERM_P2 => Slot::Terminal(Player::P2),
        _ => Slot::Child(Locator::unpack(raw - RAW_CHILD_BASE)),
    }
}

/// A rollout parked at a PENDING slot, resumed in FIFO order once the child
/// locator arrives.
#[derive(Debug)]
pub struct Deferred {
    pub mi: u16,
    pub seq: u64,
    pub route: Vec<u8>,
}

/// One tree node. `state` and `moves` are fixed at creation; slots and
/// counters evolve. Only the owner thread expands, defers, or links slots.
pub struct Node<S> {
    pub state: S,
    pub to_move: Player,
    pub moves: Box<[u16]>,
    slots: Box<[AtomicU64]>,
    vis: Box<[AtomicU64]>,
    wins: Box<[AtomicU64]>,
    vis_n: AtomicU64,
    bp_hops: AtomicU64,
    deferred: Mutex<Vec<Deferred>>,
}

impl<S> Node<S> {
    pub fn new(state: S, to_move: Player, moves: Vec<u16>) -> Node<S> {
        let n = moves.len();
        Node {
            state,
            to_move,
            moves: moves.into_boxed_slice(),
            slots: (0..n).map(|_| AtomicU64::new(RAW_UNEXPANDED)).collect(),
            vis: (0..n).map(|_| AtomicU64::new(0)).collect(),
            wins: (0..n).map(|_| AtomicU64::new(0)).collect(),
            vis_n: AtomicU64::new(0),
            bp_hops: AtomicU64::new(0),
            deferred: Mutex::new(Vec::new()),
        }
    }

    pub fn slot(&self, mi: u16) -> Slot {
        slot_decode(self.slots[mi as usize].load(Ordering::Acquire))
    }

    /// Indices of moves still unexpanded.
    pub fn unexpanded(&self) -> Vec<u16> {
        (0..self.moves.len() as u16).filter(|&mi| self.slot(mi) == Slot::Unexpanded).collect()
    }

    /// UNEXPANDED to PENDING; owner only.
    pub fn claim(&self, mi: u16) {
        let prev = self.slots[mi as usize].swap(RAW_PENDING, Ordering::AcqRel);
        debug_assert_eq!(prev, RAW_UNEXPANDED, "claimed a non-unexpanded slot");
    }

    /// PENDING to a terminal marker; owner only.
    pub fn resolve_terminal(&self, mi: u16, winner: Player) {
        let prev = self.slots[mi as usize].swap(slot_encode(Slot::Terminal(winner)), Ordering::AcqRel);
        debug_assert_eq!(prev, RAW_PENDING, "terminal resolution out of order");
    }

    /// PENDING to the child locator; owner only.
    pub fn link_child(&self, mi: u16, child: Locator) {
        let prev = self.slots[mi as usize].swap(slot_encode(Slot::Child(child)), Ordering::AcqRel);
        debug_assert_eq!(prev, RAW_PENDING, "child linked out of order");
    }

    /// Count one selection through `mi`: the virtual loss. VIS_n and VIS_m
    /// move together, so VIS_n stays the sum of the per-move visits.
    pub fn count_visit(&self, mi: u16) {
        self.vis[mi as usize].fetch_add(1, Ordering::Relaxed);
        self.vis_n.fetch_add(1, Ordering::Relaxed);
    }

    /// Fold a backpropagated result into `mi`, in playout units.
    pub fn add_wins(&self, mi: u16, w: u64) {
        self.wins[mi as usize].fetch_add(w, Ordering::Relaxed);
        self.bp_hops.fetch_add(1, Ordering::Relaxed);
    }

    pub fn vis(&self, mi: u16) -> u64 {
        self.vis[mi as usize].load(Ordering::Relaxed)
    }

    pub fn wins(&self, mi: u16) -> u64 {
        self.wins[mi as usize].load(Ordering::Relaxed)
    }

    pub fn vis_n(&self) -> u64 {
        self.vis_n.load(Ordering::Relaxed)
    }

    /// Backpropagation arrivals; one per selection through this node once
    /// everything drains.
    pub fn bp_hops(&self) -> u64 {
        self.bp_hops.load(Ordering::Relaxed)
    }

    pub fn park(&self, d: Deferred) {
        self.deferred.lock().unwrap().push(d);
    }

    /// Pull every rollout parked on `mi`, preserving arrival order.
    pub fn take_parked(&self, mi: u16) -> Vec<Deferred> {
        let mut held = self.deferred.lock().unwrap();
        let mut out = Vec::new();
        let mut keep = Vec::with_capacity(held.len());
        for d in held.drain(..) {
            if d.mi == mi {
                out.push(d);
            } else {
                keep.push(d);
            }
        }
        *held = keep;
        out
    }

    pub fn parked_len(&self) -> usize {
        self.deferred.lock().unwrap().len()
    }
}

/// Exploration score of one move: exploitation rate plus the UCB1 bonus.
pub fn ucb_score(win_rate: f64, vis_m: u64, vis_n: u64, c: f64) -> f64 {
    win_rate + c * ((vis_n as f64).ln() / vis_m as f64).sqrt()
}

/// Argmax of [`ucb_score`] over `(win_rate, visits)` pairs; ties take the
/// lowest index. Callers guarantee every move has at least one visit.
pub fn ucb_pick(stats: &[(f64, u64)], vis_n: u64, c: f64) -> usize {
    debug_assert!(!stats.is_empty());
    debug_assert!(stats.iter().all(|s| s.1 > 0), "ucb over an unvisited move");
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, &(rate, vis)) in stats.iter().enumerate() {
        let s = ucb_score(rate, vis, vis_n, c);
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    best
}

const CHUNK: usize = 512;
const MAX_CHUNKS: usize = 1024;

type Chunk<S> = Box<[OnceLock<Node<S>>]>;

/// Append-only node table. The owner thread pushes; any thread in the same
/// address space may read published entries without locking. Entries land in
/// fixed chunks so readers never see a reallocation.
pub struct NodeTable<S> {
    len: AtomicU32,
    chunks: Box<[OnceLock<Chunk<S>>]>,
}

impl<S> NodeTable<S> {
    pub fn new() -> NodeTable<S> {
        NodeTable {
            len: AtomicU32::new(0),
            chunks: (0..MAX_CHUNKS).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn len(&self) -> u32 {
        self.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Publish a node and return its index. Owner thread only.
    pub fn push(&self, node: Node<S>) -> u32 {
        let idx = self.len.load(Ordering::Relaxed);
        assert!((idx as usize) < CHUNK * MAX_CHUNKS, "node table full");
        let chunk = self.chunks[idx as usize / CHUNK]
            .get_or_init(|| (0..CHUNK).map(|_| OnceLock::new()).collect());
        chunk[idx as usize % CHUNK].set(node).ok().expect("fresh slot already set");
        self.len.store(idx + 1, Ordering::Release);
        idx
    }

    pub fn get(&self, idx: u32) -> Option<&Node<S>> {
        if idx >= self.len() {
            return None;
        }
        self.chunks[idx as usize / CHUNK].get()?[idx as usize % CHUNK].get()
    }
}

impl<S> Default for NodeTable<S> {
    fn default() -> NodeTable<S> {
        NodeTable::new()
    }
}
