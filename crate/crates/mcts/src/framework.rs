//! Phased tree-parallel search over the invocation fabric.
//!
//! Every rollout is a chain of invocations. Selection hops from owner to
//! owner as small calls; expansion ships the child state to a uniformly
//! random owner with a payload call; evaluation requests land on a random
//! thread of the leaf owner's process through wait-free inboxes; and
//! backpropagation chains calls deepest-first so the root applies last.
//! Rollouts that reach a slot whose child is still being created park at
//! that slot and resume, in FIFO order, when the child locator arrives.
//!
//! Counting discipline: a node's VIS_n and the chosen move's VIS_m increment
//! together at selection time (the virtual loss), so VIS_n always equals the
//! sum of its per-move visits and the root's VIS_n equals the number of
//! rollouts. A child's own VIS_n therefore equals the parent's VIS_m for its
//! move minus exactly one: the creating rollout evaluated at the child
//! instead of selecting through it. Wins are stored in playout units
//! (`sims_per_request` playouts per rollout), and win rates are normalised
//! back to [0, 1] before entering the selection formula.

use crate::node::{Deferred, Locator, Node, NodeTable, Slot, ucb_pick};
use crate::{GameSpec, Player};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remi_core::fabric::queue::Inbox;
use remi_core::fabric::{
    CallIn, FunctionRegistry, RunReport, SyncMode, Tuning, Worker, FID_USER_BASE,
};
use remi_core::{Config, Error, Result};
use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub const FID_SELECT: u64 = FID_USER_BASE;
pub const FID_CREATE: u64 = FID_USER_BASE + 1;
pub const FID_NOTIFY: u64 = FID_USER_BASE + 2;
pub const FID_BACKPROP: u64 = FID_USER_BASE + 3;
pub const FID_PHASE: u64 = FID_USER_BASE + 4;
pub const FID_EXIT: u64 = FID_USER_BASE + 5;

/// Knobs for one search run.
#[derive(Clone, Debug)]
pub struct SearchConfig {
    /// Rollouts per phase: this many per thread of the root process.
    pub rollouts_per_thread: u32,
    /// Playouts folded into each evaluation request.
    pub sims_per_request: u32,
    /// Exploration constant in the selection formula.
    pub ucb_c: f64,
    pub phases: u32,
    pub seed: u64,
    /// Flat id of the thread that owns the root node.
    pub root_owner: u32,
    /// Issue throttle: rollouts in flight before issuing pauses.
    pub inflight_window: u32,
}

impl Default for SearchConfig {
    fn default() -> SearchConfig {
        SearchConfig {
            rollouts_per_thread: 4096,
            sims_per_request: 16,
            ucb_c: std::f64::consts::SQRT_2,
            phases: 1,
            seed: 1,
            root_owner: 0,
            inflight_window: 256,
        }
    }
}

/// Issue and evaluation counters for one finished phase, per thread.
#[derive(Clone, Debug)]
pub struct PhaseReport {
    pub phase: u32,
    pub elapsed: Duration,
    /// Rollouts issued by each thread.
    pub visits: Vec<u64>,
    /// Evaluation requests each thread executed.
    pub completions: Vec<u64>,
}

/// One move's counters in a [`TreeSnapshot`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MoveSnap {
    pub mv: u16,
    pub slot: Slot,
    pub vis: u64,
    /// Playout units: up to `sims_per_request` per visit.
    pub wins: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSnap {
    pub loc: Locator,
    pub to_move: Player,
    pub vis_n: u64,
    pub bp_hops: u64,
    pub moves: Vec<MoveSnap>,
}

/// Full post-run tree state, ordered by (owner, index). Bit-comparable
/// across runs for determinism checks.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TreeSnapshot {
    pub nodes: Vec<NodeSnap>,
}

impl TreeSnapshot {
    pub fn node(&self, loc: Locator) -> Option<&NodeSnap> {
        self.nodes.iter().find(|n| n.loc == loc)
    }
}

pub struct SearchOutcome {
    pub phases: Vec<PhaseReport>,
    pub tree: TreeSnapshot,
    pub root: Locator,
    /// Root move with the most visits.
    pub best_move: u16,
    /// Per root move: (move, visits, wins in playout units).
    pub root_stats: Vec<(u16, u64, u64)>,
    /// Rollout sequence numbers in root-application order, all phases.
    pub root_seqs: Vec<u64>,
    /// Rollouts that parked at a pending slot at least once.
    pub deferrals: u64,
    pub run: RunReport,
}

// ------------------------------------------------------------ wire formats

// Route entries are (owner u32, idx u32, move index u16), ten bytes each,
// root first. Backpropagation consumes them back to front.
const ROUTE_ENTRY: usize = 10;

fn route_push(route: &mut Vec<u8>, loc: Locator, mi: u16) {
    route.extend_from_slice(&loc.owner.to_le_bytes());
    route.extend_from_slice(&loc.idx.to_le_bytes());
    route.extend_from_slice(&mi.to_le_bytes());
}

fn route_last(route: &[u8]) -> (Locator, u16) {
    let at = route.len() - ROUTE_ENTRY;
    let owner = u32::from_le_bytes(route[at..at + 4].try_into().unwrap());
    let idx = u32::from_le_bytes(route[at + 4..at + 8].try_into().unwrap());
    let mi = u16::from_le_bytes(route[at + 8..at + 10].try_into().unwrap());
    (Locator { owner, idx }, mi)
}

fn encode_select(seq: u64, idx: u32, route: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + route.len());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&idx.to_le_bytes());
    out.extend_from_slice(route);
    out
}

fn encode_create(seq: u64, parent: Locator, mi: u16, route: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + route.len());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&parent.owner.to_le_bytes());
    out.extend_from_slice(&parent.idx.to_le_bytes());
    out.extend_from_slice(&mi.to_le_bytes());
    out.extend_from_slice(route);
    out
}

fn encode_notify(pidx: u32, mi: u16, child: Locator) -> Vec<u8> {
    let mut out = Vec::with_capacity(14);
    out.extend_from_slice(&pidx.to_le_bytes());
    out.extend_from_slice(&mi.to_le_bytes());
    out.extend_from_slice(&child.owner.to_le_bytes());
    out.extend_from_slice(&child.idx.to_le_bytes());
    out
}

fn encode_backprop(seq: u64, p1_wins: u16, route: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + route.len());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&p1_wins.to_le_bytes());
    out.extend_from_slice(route);
    out
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}

// ---------------------------------------------------------------- plumbing

/// An evaluation handed to a thread of the leaf owner's process.
struct SimReq {
    seq: u64,
    /// Absent for terminal moves, where the result is forced.
    leaf: Option<Locator>,
    fixed_p1: Option<u16>,
    route: Vec<u8>,
}

/// An invocation a handler wants sent. Handlers never post directly; the
/// worker loop drains these in order so back-pressure retries always happen
/// where progress can run.
struct Out {
    dest: u32,
    fid: u64,
    ctx: Vec<u8>,
    payload: Option<Vec<u8>>,
}

struct Shared<G: GameSpec> {
    game: G,
    start: G::State,
    scfg: SearchConfig,
    nthreads: u32,
    tpp: u32,
    root: Locator,
    /// Rollouts per phase.
    cap: u64,
    tables: Vec<NodeTable<G::State>>,
    sim_queues: Vec<Inbox<SimReq>>,
    outboxes: Vec<Mutex<VecDeque<Out>>>,
    rngs: Vec<Mutex<ChaCha8Rng>>,
    issued: AtomicU64,
    completed: AtomicU64,
    /// Current phase, 1-based; 0 before the first broadcast.
    phase: AtomicU32,
    exit: AtomicBool,
    visits: Vec<AtomicU64>,
    sims: Vec<AtomicU64>,
    deferrals: AtomicU64,
    root_seqs: Mutex<Vec<u64>>,
    reports: Mutex<Vec<PhaseReport>>,
}

impl<G: GameSpec> Shared<G> {
    fn push_out(&self, me: u32, out: Out) {
        self.outboxes[me as usize].lock().unwrap().push_back(out);
    }

    fn enqueue_sim(&self, me: u32, rng: &mut ChaCha8Rng, req: SimReq) {
        // uniform over the threads of this process, self included
        let base = me / self.tpp * self.tpp;
        let target = base + rng.gen_range(0..self.tpp);
        self.sim_queues[target as usize].push(req);
    }

    fn rollout_done(&self, seq: u64) {
        self.root_seqs.lock().unwrap().push(seq);
        self.completed.fetch_add(1, Ordering::AcqRel);
    }
}

// ---------------------------------------------------------------- handlers

fn on_select<G: GameSpec>(s: &Shared<G>, w: &mut Worker, c: &CallIn<'_>) {
    let seq = u64_at(c.context, 0);
    let idx = u32_at(c.context, 8);
    let route = c.context[12..].to_vec();
    descend(s, w, seq, idx, route);
}

/// Walk the tree from `idx` on the owner thread until the rollout leaves this
/// owner: expansion, a terminal move, a parked slot, or a hop to a remote
/// child.
fn descend<G: GameSpec>(s: &Shared<G>, w: &mut Worker, seq: u64, start: u32, mut route: Vec<u8>) {
    let me = w.flat();
    let mut idx = start;
    loop {
        let node = s.tables[me as usize].get(idx).expect("selection at a live node");
        let here = Locator { owner: me, idx };
        let open = node.unexpanded();
        if !open.is_empty() {
            // expansion wins over exploitation while any move is untried
            let mi = {
                let mut rng = s.rngs[me as usize].lock().unwrap();
                open[rng.gen_range(0..open.len())]
            };
            node.claim(mi);
            node.count_visit(mi);
            route_push(&mut route, here, mi);
            let child = s.game.apply(&node.state, node.moves[mi as usize]);
            if let Some(wnr) = s.game.winner(&child) {
                // the move ends the game: no node, result is forced
                node.resolve_terminal(mi, wnr);
                let p1 = if wnr == Player::P1 { s.scfg.sims_per_request as u16 } else { 0 };
                let mut rng = s.rngs[me as usize].lock().unwrap();
                s.enqueue_sim(me, &mut rng, SimReq { seq, leaf: None, fixed_p1: Some(p1), route });
            } else {
                let owner = {
                    let mut rng = s.rngs[me as usize].lock().unwrap();
                    rng.gen_range(0..s.nthreads)
                };
                let ctx = encode_create(seq, here, mi, &route);
                let payload = Some(s.game.encode(&child));
                s.push_out(me, Out { dest: owner, fid: FID_CREATE, ctx, payload });
            }
            return;
        }
        let spr = s.scfg.sims_per_request as f64;
        let stats: Vec<(f64, u64)> = (0..node.moves.len() as u16)
            .map(|mi| {
                let vis = node.vis(mi);
                (node.wins(mi) as f64 / (spr * vis as f64), vis)
            })
            .collect();
        let mi = ucb_pick(&stats, node.vis_n(), s.scfg.ucb_c) as u16;
        node.count_visit(mi);
        route_push(&mut route, here, mi);
        match node.slot(mi) {
            Slot::Pending => {
                s.deferrals.fetch_add(1, Ordering::Relaxed);
                node.park(Deferred { mi, seq, route });
                return;
            }
            Slot::Terminal(wnr) => {
                let p1 = if wnr == Player::P1 { s.scfg.sims_per_request as u16 } else { 0 };
                let mut rng = s.rngs[me as usize].lock().unwrap();
                s.enqueue_sim(me, &mut rng, SimReq { seq, leaf: None, fixed_p1: Some(p1), route });
                return;
            }
            Slot::Child(loc) if loc.owner == me => {
                idx = loc.idx;
            }
            Slot::Child(loc) => {
                let ctx = encode_select(seq, loc.idx, &route);
                s.push_out(me, Out { dest: loc.owner, fid: FID_SELECT, ctx, payload: None });
                return;
            }
            Slot::Unexpanded => unreachable!("unexpanded slot after the expansion check"),
        }
    }
}

fn on_create<G: GameSpec>(s: &Shared<G>, w: &mut Worker, c: &CallIn<'_>) {
    let me = w.flat();
    let seq = u64_at(c.context, 0);
    let parent = Locator { owner: u32_at(c.context, 8), idx: u32_at(c.context, 12) };
    let mi = u16_at(c.context, 16);
    let route = c.context[18..].to_vec();
    let state = s.game.decode(c.payload.expect("child state blob"));
    let to_move = s.game.to_move(&state);
    let moves = s.game.legal_moves(&state);
    debug_assert!(!moves.is_empty(), "terminal states never become nodes");
    let idx = s.tables[me as usize].push(Node::new(state, to_move, moves));
    let child = Locator { owner: me, idx };
    {
        let mut rng = s.rngs[me as usize].lock().unwrap();
        s.enqueue_sim(me, &mut rng, SimReq { seq, leaf: Some(child), fixed_p1: None, route });
    }
    let ctx = encode_notify(parent.idx, mi, child);
    s.push_out(me, Out { dest: parent.owner, fid: FID_NOTIFY, ctx, payload: None });
}

fn on_notify<G: GameSpec>(s: &Shared<G>, w: &mut Worker, c: &CallIn<'_>) {
    let me = w.flat();
    let pidx = u32_at(c.context, 0);
    let mi = u16_at(c.context, 4);
    let child = Locator { owner: u32_at(c.context, 6), idx: u32_at(c.context, 10) };
    let node = s.tables[me as usize].get(pidx).expect("notify for a live parent");
    node.link_child(mi, child);
    for d in node.take_parked(mi) {
        let ctx = encode_select(d.seq, child.idx, &d.route);
        s.push_out(me, Out { dest: child.owner, fid: FID_SELECT, ctx, payload: None });
    }
}

fn on_backprop<G: GameSpec>(s: &Shared<G>, w: &mut Worker, c: &CallIn<'_>) {
    let me = w.flat();
    let seq = u64_at(c.context, 0);
    let p1 = u16_at(c.context, 8);
    let mut route = c.context[10..].to_vec();
    let (loc, mi) = route_last(&route);
    debug_assert_eq!(loc.owner, me, "backprop hop at the wrong owner");
    route.truncate(route.len() - ROUTE_ENTRY);
    let node = s.tables[me as usize].get(loc.idx).expect("backprop at a live node");
    // the mover at this node is its side to move; credit its wins
    let spr = s.scfg.sims_per_request as u16;
    let w_here = if node.to_move == Player::P1 { p1 } else { spr - p1 };
    node.add_wins(mi, w_here as u64);
    if route.is_empty() {
        debug_assert_eq!(loc, s.root, "route must start at the root");
        s.rollout_done(seq);
    } else {
        let (next, _) = route_last(&route);
        let ctx = encode_backprop(seq, p1, &route);
        s.push_out(me, Out { dest: next.owner, fid: FID_BACKPROP, ctx, payload: None });
    }
}

fn register<G: GameSpec>(reg: &mut FunctionRegistry, sh: &Arc<Shared<G>>) -> Result<()> {
    let s = sh.clone();
    reg.register(FID_SELECT, move |w, c| on_select(&s, w, c))?;
    let s = sh.clone();
    reg.register(FID_CREATE, move |w, c| on_create(&s, w, c))?;
    let s = sh.clone();
    reg.register(FID_NOTIFY, move |w, c| on_notify(&s, w, c))?;
    let s = sh.clone();
    reg.register(FID_BACKPROP, move |w, c| on_backprop(&s, w, c))?;
    let s = sh.clone();
    reg.register(FID_PHASE, move |_, c| {
        s.phase.store(u32_at(c.context, 0), Ordering::Release);
    })?;
    let s = sh.clone();
    reg.register(FID_EXIT, move |_, _| {
        s.exit.store(true, Ordering::Release);
    })?;
    Ok(())
}

// ------------------------------------------------------------- worker loop

/// Send queued invocations until the fabric pushes back.
fn pump_outbox<G: GameSpec>(s: &Shared<G>, w: &mut Worker) -> Result<()> {
    let me = w.flat() as usize;
    loop {
        let Some(out) = s.outboxes[me].lock().unwrap().pop_front() else {
            return Ok(());
        };
        let sent = w.agg_call(out.dest, out.fid, &out.ctx, out.payload.as_deref(), None)?;
        if !sent {
            s.outboxes[me].lock().unwrap().push_front(out);
            return Ok(());
        }
    }
}

/// Run every queued evaluation: playouts from the leaf state, or the forced
/// result for terminal moves, then kick off the backpropagation chain.
fn serve_sims<G: GameSpec>(s: &Shared<G>, w: &mut Worker) -> Result<()> {
    let me = w.flat();
    while let Some(req) = s.sim_queues[me as usize].try_pop() {
        let p1 = match req.fixed_p1 {
            Some(p) => p,
            None => {
                let leaf = req.leaf.expect("evaluation without a leaf");
                // leaf owner shares this process; its table is readable here
                let node =
                    s.tables[leaf.owner as usize].get(leaf.idx).expect("evaluation at a live leaf");
                let mut rng = s.rngs[me as usize].lock().unwrap();
                (0..s.scfg.sims_per_request)
                    .filter(|_| s.game.playout(&node.state, &mut rng) == Player::P1)
                    .count() as u16
            }
        };
        s.sims[me as usize].fetch_add(1, Ordering::Relaxed);
        let (deep, _) = route_last(&req.route);
        let ctx = encode_backprop(req.seq, p1, &req.route);
        s.push_out(me, Out { dest: deep.owner, fid: FID_BACKPROP, ctx, payload: None });
    }
    Ok(())
}

fn run_worker<G: GameSpec>(s: &Arc<Shared<G>>, w: &mut Worker) -> Result<()> {
    let me = w.flat();
    let topo = w.topology();
    let issuing = topo.process_of(me) == topo.process_of(s.scfg.root_owner);
    let coordinator = me == s.scfg.root_owner;
    if coordinator {
        let to_move = s.game.to_move(&s.start);
        let moves = s.game.legal_moves(&s.start);
        let idx = s.tables[me as usize].push(Node::new(s.start.clone(), to_move, moves));
        debug_assert_eq!(idx, s.root.idx);
    }
    let sync = w.synchronizer(SyncMode::OnRemoteConsume);
    // coordinator-private phase bookkeeping
    let mut started = 0u32;
    let mut phase_t0 = Instant::now();
    let mut snap_visits = vec![0u64; s.nthreads as usize];
    let mut snap_sims = vec![0u64; s.nthreads as usize];
    loop {
        if s.exit.load(Ordering::Acquire) {
            break;
        }
        w.progress()?;
        pump_outbox(s, w)?;
        serve_sims(s, w)?;
        pump_outbox(s, w)?;
        // push out any batched remote calls; stragglers retry next round
        w.agg_flush(None)?;
        if issuing && s.phase.load(Ordering::Acquire) > 0 {
            let mut burst = 0;
            while burst < 32 {
                let issued = s.issued.load(Ordering::Relaxed);
                if issued >= s.cap
                    || issued.saturating_sub(s.completed.load(Ordering::Relaxed))
                        >= s.scfg.inflight_window as u64
                {
                    break;
                }
                let seq = s.issued.fetch_add(1, Ordering::AcqRel);
                if seq >= s.cap {
                    break;
                }
                s.visits[me as usize].fetch_add(1, Ordering::Relaxed);
                let ctx = encode_select(seq, s.root.idx, &[]);
                s.push_out(me, Out { dest: s.root.owner, fid: FID_SELECT, ctx, payload: None });
                burst += 1;
            }
            pump_outbox(s, w)?;
        }
        if coordinator {
            let current = s.phase.load(Ordering::Acquire);
            let phase_done = current == started && s.completed.load(Ordering::Acquire) >= s.cap;
            if started == 0 || phase_done {
                if started > 0 {
                    let visits: Vec<u64> = s
                        .visits
                        .iter()
                        .zip(&snap_visits)
                        .map(|(v, old)| v.load(Ordering::Relaxed) - old)
                        .collect();
                    let completions: Vec<u64> = s
                        .sims
                        .iter()
                        .zip(&snap_sims)
                        .map(|(v, old)| v.load(Ordering::Relaxed) - old)
                        .collect();
                    s.reports.lock().unwrap().push(PhaseReport {
                        phase: started,
                        elapsed: phase_t0.elapsed(),
                        visits,
                        completions,
                    });
                }
                if started == s.scfg.phases {
                    while !w.broadcast(FID_EXIT, &[], Some(&sync))? {
                        w.progress()?;
                    }
                    w.wait(&sync)?;
                    continue; // own handler set the exit flag
                }
                for (i, v) in s.visits.iter().enumerate() {
                    snap_visits[i] = v.load(Ordering::Relaxed);
                    snap_sims[i] = s.sims[i].load(Ordering::Relaxed);
                }
                s.issued.store(0, Ordering::Release);
                s.completed.store(0, Ordering::Release);
                started += 1;
                phase_t0 = Instant::now();
                let ctx = started.to_le_bytes();
                while !w.broadcast(FID_PHASE, &ctx, Some(&sync))? {
                    w.progress()?;
                }
                w.wait(&sync)?;
            }
        }
    }
    // ship anything still queued before the fabric tears down
    loop {
        let drained = w.agg_flush(None)?;
        if drained && s.outboxes[me as usize].lock().unwrap().is_empty() {
            return Ok(());
        }
        w.progress()?;
        pump_outbox(s, w)?;
    }
}

// ---------------------------------------------------------------- frontend

/// Run `scfg.phases` search phases from `start` over the given placement and
/// return the counters plus a full tree snapshot.
pub fn search<G: GameSpec>(
    game: G,
    start: G::State,
    cfg: &Config,
    tuning: Tuning,
    scfg: SearchConfig,
) -> Result<SearchOutcome> {
    let nthreads = cfg.total_threads();
    let tpp = cfg.threads_per_process;
    if scfg.root_owner >= nthreads {
        return Err(Error::Config(format!("root owner {} outside placement", scfg.root_owner)));
    }
    if scfg.phases == 0 || scfg.rollouts_per_thread == 0 || scfg.sims_per_request == 0 {
        return Err(Error::Config("phases, rollouts and playouts must be positive".into()));
    }
    if game.winner(&start).is_some() {
        return Err(Error::Config("search root is already decided".into()));
    }
    let root = Locator { owner: scfg.root_owner, idx: 0 };
    let cap = scfg.rollouts_per_thread as u64 * tpp as u64;
    let shared = Arc::new(Shared {
        game,
        start,
        nthreads,
        tpp,
        root,
        cap,
        tables: (0..nthreads).map(|_| NodeTable::new()).collect(),
        sim_queues: (0..nthreads).map(|_| Inbox::with_capacity(1 << 14)).collect(),
        outboxes: (0..nthreads).map(|_| Mutex::new(VecDeque::new())).collect(),
        rngs: (0..nthreads)
            .map(|f| {
                let stream = (f as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15);
                Mutex::new(ChaCha8Rng::seed_from_u64(scfg.seed ^ stream))
            })
            .collect(),
        issued: AtomicU64::new(0),
        completed: AtomicU64::new(0),
        phase: AtomicU32::new(0),
        exit: AtomicBool::new(false),
        visits: (0..nthreads).map(|_| AtomicU64::new(0)).collect(),
        sims: (0..nthreads).map(|_| AtomicU64::new(0)).collect(),
        deferrals: AtomicU64::new(0),
        root_seqs: Mutex::new(Vec::new()),
        reports: Mutex::new(Vec::new()),
        scfg,
    });
    let mut reg = FunctionRegistry::new();
    register(&mut reg, &shared)?;
    let body = shared.clone();
    let run = remi_core::fabric::launch(cfg, tuning, reg, move |w| run_worker(&body, w))?;

    let mut nodes = Vec::new();
    for (owner, table) in shared.tables.iter().enumerate() {
        for idx in 0..table.len() {
            let n = table.get(idx).expect("published node");
            let moves = (0..n.moves.len() as u16)
                .map(|mi| MoveSnap {
                    mv: n.moves[mi as usize],
                    slot: n.slot(mi),
                    vis: n.vis(mi),
                    wins: n.wins(mi),
                })
                .collect();
            nodes.push(NodeSnap {
                loc: Locator { owner: owner as u32, idx },
                to_move: n.to_move,
                vis_n: n.vis_n(),
                bp_hops: n.bp_hops(),
                moves,
            });
        }
    }
    let tree = TreeSnapshot { nodes };
    let root_snap = tree.node(root).expect("root node exists");
    let root_stats: Vec<(u16, u64, u64)> =
        root_snap.moves.iter().map(|m| (m.mv, m.vis, m.wins)).collect();
    let best_move = root_stats.iter().max_by_key(|&&(mv, vis, _)| (vis, std::cmp::Reverse(mv))).map(|&(mv, _, _)| mv).unwrap_or(0);
    let phases = shared.reports.lock().unwrap().clone();
    let root_seqs = shared.root_seqs.lock().unwrap().clone();
    let deferrals = shared.deferrals.load(Ordering::Relaxed);
    Ok(SearchOutcome { phases, tree, root, best_move, root_stats, root_seqs, deferrals, run })
}
