//! Whole-framework searches on small boards: count conservation, forced
//! results, determinism, and behaviour across placements and device modes.

use remi_core::fabric::Tuning;
use remi_core::Config;
use remi_mcts::framework::{search, SearchConfig, SearchOutcome};
use remi_mcts::hex::{Board, Hex};
use remi_mcts::node::{Locator, Slot};
use remi_mcts::Player;
use std::collections::HashMap;

fn run(
    n: u8,
    placement: (u32, u32, u32),
    tuning: Tuning,
    scfg: SearchConfig,
) -> SearchOutcome {
    let cfg = Config::with_placement(placement.0, placement.1, placement.2);
    search(Hex { n }, Board::new(n), &cfg, tuning, scfg).expect("search runs")
}

/// Post-drain audit: visit sums, one result fold per selection, edge counts
/// against child totals, forced wins on terminal moves, and one creation per
/// node.
fn audit(out: &SearchOutcome, spr: u64, rollouts: u64) {
    let by_loc: HashMap<Locator, _> =
        out.tree.nodes.iter().map(|n| (n.loc, n)).collect();
    let root = out.tree.node(out.root).expect("root snapshot");
    assert_eq!(root.vis_n, rollouts, "every rollout selects at the root exactly once");
    let mut edges = 0usize;
    for n in &out.tree.nodes {
        let sum: u64 = n.moves.iter().map(|m| m.vis).sum();
        assert_eq!(n.vis_n, sum, "visit sum at {:?}", n.loc);
        assert_eq!(n.bp_hops, n.vis_n, "result folds at {:?}", n.loc);
        for m in &n.moves {
            assert!(m.wins <= spr * m.vis, "win bound at {:?} move {}", n.loc, m.mv);
            match m.slot {
                Slot::Child(c) => {
                    edges += 1;
                    let ch = by_loc.get(&c).expect("child snapshot");
                    // the creating rollout evaluated at the child instead of
                    // selecting through it, hence the one-visit offset
                    assert_eq!(ch.vis_n + 1, m.vis, "edge into {:?}", c);
                    assert_eq!(ch.to_move, n.to_move.flip());
                }
                Slot::Terminal(w) => {
                    assert!(m.vis >= 1);
                    let expect = if w == n.to_move { spr * m.vis } else { 0 };
                    assert_eq!(m.wins, expect, "forced result at {:?} move {}", n.loc, m.mv);
                }
                Slot::Pending => panic!("pending slot after drain at {:?}", n.loc),
                Slot::Unexpanded => assert_eq!(m.vis, 0),
            }
        }
    }
    assert_eq!(edges + 1, out.tree.nodes.len(), "one creation per node plus the root");
}

#[test]
fn single_thread_phase_conserves_every_count() {
    let scfg = SearchConfig { rollouts_per_thread: 512, seed: 7, ..Default::default() };
    let out = run(3, (1, 1, 1), Tuning::default(), scfg);
    audit(&out, 16, 512);
    // exactly-once completion, checked by sequence tag
    let mut seqs = out.root_seqs.clone();
    seqs.sort_unstable();
    assert_eq!(seqs, (0..512).collect::<Vec<u64>>());
    assert_eq!(out.phases.len(), 1);
    assert_eq!(out.phases[0].visits.iter().sum::<u64>(), 512);
    assert_eq!(out.phases[0].completions.iter().sum::<u64>(), 512);
    // single-thread rollouts overlap, so some must have parked
    assert!(out.deferrals > 0);
}

#[test]
fn cap_is_respected_exactly() {
    let scfg = SearchConfig { rollouts_per_thread: 100, seed: 3, ..Default::default() };
    let out = run(3, (1, 1, 1), Tuning::default(), scfg);
    assert_eq!(out.tree.node(out.root).unwrap().vis_n, 100);
    assert_eq!(out.root_seqs.len(), 100);
}

#[test]
fn phases_accumulate_on_one_tree() {
    let scfg =
        SearchConfig { rollouts_per_thread: 64, phases: 3, seed: 11, ..Default::default() };
    let out = run(3, (1, 1, 1), Tuning::default(), scfg);
    audit(&out, 16, 3 * 64);
    assert_eq!(out.phases.len(), 3);
    for (i, ph) in out.phases.iter().enumerate() {
        assert_eq!(ph.phase as usize, i + 1);
        assert_eq!(ph.visits.iter().sum::<u64>(), 64, "phase {} issue total", ph.phase);
        assert_eq!(ph.completions.iter().sum::<u64>(), 64);
    }
}

#[test]
fn fixed_seed_single_thread_is_bit_identical() {
    let scfg = SearchConfig { rollouts_per_thread: 256, seed: 99, ..Default::default() };
    let a = run(3, (1, 1, 1), Tuning::default(), scfg.clone());
    let b = run(3, (1, 1, 1), Tuning::default(), scfg);
    assert_eq!(a.tree, b.tree);
    assert_eq!(a.root_seqs, b.root_seqs);
    assert_eq!(a.best_move, b.best_move);
}

#[test]
fn saturated_tiny_game_folds_forced_results() {
    // 1x1 Hex: the only move wins for P1 on the spot, every rollout is forced
    let scfg = SearchConfig { rollouts_per_thread: 40, seed: 5, ..Default::default() };
    let out = run(1, (1, 1, 1), Tuning::default(), scfg);
    audit(&out, 16, 40);
    assert_eq!(out.tree.nodes.len(), 1);
    let root = &out.tree.nodes[0];
    assert_eq!(root.moves[0].slot, Slot::Terminal(Player::P1));
    assert_eq!(root.moves[0].vis, 40);
    assert_eq!(root.moves[0].wins, 40 * 16);
    assert_eq!(out.best_move, 0);
}

#[test]
fn multithread_single_process_conserves_counts() {
    let scfg = SearchConfig { rollouts_per_thread: 192, seed: 21, ..Default::default() };
    let out = run(3, (1, 1, 4), Tuning::default(), scfg);
    audit(&out, 16, 4 * 192);
    // ownership is drawn uniformly over all threads, so with hundreds of
    // nodes every table should hold some
    for flat in 0..4 {
        assert!(
            out.tree.nodes.iter().any(|n| n.loc.owner == flat),
            "thread {flat} owns no nodes"
        );
    }
}

#[test]
fn multiprocess_placement_conserves_counts() {
    let scfg = SearchConfig { rollouts_per_thread: 96, seed: 17, ..Default::default() };
    let out = run(3, (1, 2, 2), Tuning::default(), scfg);
    audit(&out, 16, 2 * 96);
    assert_eq!(out.run.malformed_service_records, 0);
    assert_eq!(out.run.overflow_faults, 0);
}

#[test]
fn hostile_device_settings_change_nothing_observable() {
    let scfg = SearchConfig { rollouts_per_thread: 64, seed: 29, ..Default::default() };
    let out = run(3, (1, 2, 2), Tuning::stress(0xC0FFEE), scfg);
    audit(&out, 16, 2 * 64);
    assert!(out.run.splits_applied > 0, "write splitting never engaged");
}

#[test]
fn playout_count_scales_wins_bound() {
    let scfg = SearchConfig {
        rollouts_per_thread: 128,
        sims_per_request: 4,
        seed: 13,
        ..Default::default()
    };
    let out = run(3, (1, 1, 1), Tuning::default(), scfg);
    audit(&out, 4, 128);
}

#[test]
fn terminal_start_is_rejected() {
    let cfg = Config::with_placement(1, 1, 1);
    let mut b = Board::new(1);
    b.place(0);
    let err = search(Hex { n: 1 }, b, &cfg, Tuning::default(), SearchConfig::default());
    assert!(err.is_err());
}
