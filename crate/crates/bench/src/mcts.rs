//! Phased tree-search runs per placement, raw counters per phase.
//!
//! A placement string `MxPxT` spreads the search over M machines times P
//! processes times T threads, all inside one OS process. Each phase issues
//! `rollouts_per_thread` rollouts from every thread of the root process;
//! the row reports how many rollouts were issued (visits), how many
//! evaluation requests ran across all threads (completions), and the
//! rollout completion rate.

use remi_core::config::Config;
use remi_core::fabric::Tuning;
use remi_mcts::framework::{search, SearchConfig, SearchOutcome};
use remi_mcts::hex::{Board, Hex};

#[derive(Debug, Clone)]
pub struct Row {
    pub config: String,
    pub visits: u64,
    pub completions: u64,
    pub rollouts_per_sec: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Knobs {
    pub rollouts_per_thread: u32,
    pub sims_per_request: u32,
    pub ucb_c: f64,
    pub seed: u64,
    pub hex_n: u8,
}

impl Default for Knobs {
    fn default() -> Knobs {
        let d = SearchConfig::default();
        Knobs {
            rollouts_per_thread: d.rollouts_per_thread,
            sims_per_request: d.sims_per_request,
            ucb_c: d.ucb_c,
            seed: d.seed,
            hex_n: 7,
        }
    }
}

/// Run `phases` search phases on the placement and report one row each.
pub fn rows(placement: (u32, u32, u32), phases: u32, knobs: Knobs) -> Result<Vec<Row>, String> {
    let out = run(placement, phases, knobs)?;
    let label = format!("{}x{}x{}", placement.0, placement.1, placement.2);
    Ok(out
        .phases
        .iter()
        .map(|p| {
            let completions: u64 = p.completions.iter().sum();
            Row {
                config: label.clone(),
                visits: p.visits.iter().sum(),
                completions,
                rollouts_per_sec: completions as f64 / p.elapsed.as_secs_f64().max(1e-9),
            }
        })
        .collect())
}

pub fn run(placement: (u32, u32, u32), phases: u32, knobs: Knobs) -> Result<SearchOutcome, String> {
    if phases == 0 {
        return Err("phase count must be positive".into());
    }
    if !(1..=15).contains(&knobs.hex_n) {
        return Err(format!("board size {} is out of range 1..=15", knobs.hex_n));
    }
    let (m, p, t) = placement;
    let cfg = Config::with_placement(m, p, t);
    let scfg = SearchConfig {
        rollouts_per_thread: knobs.rollouts_per_thread,
        sims_per_request: knobs.sims_per_request,
        ucb_c: knobs.ucb_c,
        phases,
        seed: knobs.seed,
        ..SearchConfig::default()
    };
    let out = search(Hex { n: knobs.hex_n }, Board::new(knobs.hex_n), &cfg, Tuning::default(), scfg)
        .map_err(|e| format!("search failed: {e}"))?;

    // every issued rollout must land at the root exactly once
    let cap = knobs.rollouts_per_thread as u64 * t as u64;
    let root = out.tree.node(out.root).expect("root snapshot");
    assert_eq!(root.vis_n, cap * phases as u64, "root visits drifted from the phase caps");
    for r in &out.phases {
        assert_eq!(r.visits.iter().sum::<u64>(), cap, "phase issued a wrong visit count");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Knobs {
        Knobs { rollouts_per_thread: 128, sims_per_request: 4, hex_n: 5, ..Knobs::default() }
    }

    #[test]
    fn one_row_per_phase_with_conserved_visits() {
        let rows = rows((1, 1, 1), 3, small()).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_eq!(r.config, "1x1x1");
            assert_eq!(r.visits, 128);
            // every rollout runs exactly one evaluation within its phase
            assert_eq!(r.completions, r.visits);
            assert!(r.rollouts_per_sec > 0.0);
        }
    }

    #[test]
    fn thread_count_scales_the_phase_cap() {
        let rows = rows((1, 1, 2), 1, small()).unwrap();
        assert_eq!(rows[0].visits, 256);
    }

    #[test]
    fn bad_knobs_are_rejected() {
        assert!(rows((1, 1, 1), 0, small()).is_err());
        assert!(rows((1, 1, 1), 1, Knobs { hex_n: 0, ..small() }).is_err());
    }
}
