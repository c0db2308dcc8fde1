//! Distributed tree-parallel Monte-Carlo tree search on the invocation fabric.
//!
//! The tree is partitioned across worker threads: every node lives in exactly
//! one thread's table and is structurally mutated only there. Rollouts move
//! between owners as remote invocations (selection hops, child creation,
//! backpropagation), while evaluations are farmed out over process-local
//! inboxes. [`framework::search`] drives whole phases over a placement and
//! returns per-phase counters plus a full tree snapshot.

pub mod framework;
pub mod hex;
pub mod node;

use rand_chacha::ChaCha8Rng;

/// Side to move. Hex calls them vertical (P1, connects top to bottom) and
/// horizontal (P2, connects left to right); any two-player zero-sum game with
/// the same alternation fits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Player {
    P1,
    P2,
}

impl Player {
    pub fn flip(self) -> Player {
        match self {
            Player::P1 => Player::P2,
            Player::P2 => Player::P1,
        }
    }

    pub fn byte(self) -> u8 {
        match self {
            Player::P1 => 1,
            Player::P2 => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Player> {
        match b {
            1 => Some(Player::P1),
            2 => Some(Player::P2),
            _ => None,
        }
    }
}

/// A perfect-information two-player game the searcher can walk.
///
/// States ship between processes as byte blobs, so `encode`/`decode` must be
/// a bit-exact round trip. Terminal states (those with a winner) must report
/// no legal moves; the searcher never builds tree nodes for them.
pub trait GameSpec: Send + Sync + 'static {
    type State: Clone + Send + Sync + 'static;

    fn to_move(&self, s: &Self::State) -> Player;
    /// Move labels in ascending order; empty exactly when the state has a winner.
    fn legal_moves(&self, s: &Self::State) -> Vec<u16>;
    fn apply(&self, s: &Self::State, mv: u16) -> Self::State;
    fn winner(&self, s: &Self::State) -> Option<Player>;
    fn encode(&self, s: &Self::State) -> Vec<u8>;
    fn decode(&self, bytes: &[u8]) -> Self::State;

    /// One uniformly random playout to the end; games may override this with
    /// an incremental implementation.
    fn playout(&self, s: &Self::State, rng: &mut ChaCha8Rng) -> Player {
        use rand::Rng;
        let mut cur = s.clone();
        loop {
            if let Some(w) = self.winner(&cur) {
                return w;
            }
            let moves = self.legal_moves(&cur);
            let mv = moves[rng.gen_range(0..moves.len())];
            cur = self.apply(&cur, mv);
        }
    }
}
