//! Hex on an N by N rhombus.
//!
//! Cells are indexed row-major; each cell touches up to six neighbours:
//! (r-1,c), (r+1,c), (r,c-1), (r,c+1), (r-1,c+1), (r+1,c-1). P1 owns the top
//! and bottom edges, P2 the left and right. Connectivity runs on a union-find
//! with four virtual edge nodes, rebuilt for one-shot winner queries and kept
//! incrementally inside playouts so each placement costs near-constant time.

use crate::{GameSpec, Player};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

pub const EMPTY: u8 = 0;

/// Game state: side length, side to move, one byte per cell (0/1/2).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Board {
    n: u8,
    to_move: Player,
    cells: Vec<u8>,
}

impl Board {
    pub fn new(n: u8) -> Board {
        assert!((1..=15).contains(&n), "side length {n} out of range");
        Board { n, to_move: Player::P1, cells: vec![EMPTY; n as usize * n as usize] }
    }

    pub fn n(&self) -> u8 {
        self.n
    }

    pub fn to_move(&self) -> Player {
        self.to_move
    }

    pub fn cell(&self, i: u16) -> u8 {
        self.cells[i as usize]
    }

    /// Place a stone for the side to move and pass the turn.
    pub fn place(&mut self, cell: u16) {
        assert_eq!(self.cells[cell as usize], EMPTY, "cell {cell} occupied");
        self.cells[cell as usize] = self.to_move.byte();
        self.to_move = self.to_move.flip();
    }

    /// Empty cells in ascending order; none once somebody has won.
    pub fn legal_moves(&self) -> Vec<u16> {
        if self.winner().is_some() {
            return Vec::new();
        }
        (0..self.cells.len() as u16).filter(|&i| self.cells[i as usize] == EMPTY).collect()
    }

    /// Full connectivity query over the current stones.
    pub fn winner(&self) -> Option<Player> {
        let mut links = Links::new(self.n as u16);
        for (i, &c) in self.cells.iter().enumerate() {
            if let Some(p) = Player::from_byte(c) {
                links.place(i as u16, p);
            }
        }
        if links.connected(Player::P1) {
            Some(Player::P1)
        } else if links.connected(Player::P2) {
            Some(Player::P2)
        } else {
            None
        }
    }

    /// Uniformly random continuation to the end of the game. Keeps the
    /// union-find live across placements instead of re-solving per move, and
    /// stops the moment the mover connects: in Hex a placement can only ever
    /// finish the placer's own chain.
    pub fn playout(&self, rng: &mut ChaCha8Rng) -> Player {
        let mut links = Links::new(self.n as u16);
        for (i, &c) in self.cells.iter().enumerate() {
            if let Some(p) = Player::from_byte(c) {
                links.place(i as u16, p);
            }
        }
        // a terminal start never reaches the placement loop
        for p in [Player::P1, Player::P2] {
            if links.connected(p) {
                return p;
            }
        }
        let mut empties: Vec<u16> =
            (0..self.cells.len() as u16).filter(|&i| self.cells[i as usize] == EMPTY).collect();
        empties.shuffle(rng);
        // drawing without replacement each turn is the same distribution as
        // consuming one shuffled order
        let mut mover = self.to_move;
        for &cell in &empties {
            links.place(cell, mover);
            if links.connected(mover) {
                return mover;
            }
            mover = mover.flip();
        }
        unreachable!("a filled Hex board always has a winner")
    }

    /// Wire form: side length, side to move, then one byte per cell.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.cells.len());
        out.push(self.n);
        out.push(self.to_move.byte());
        out.extend_from_slice(&self.cells);
        out
    }

    pub fn decode(bytes: &[u8]) -> Board {
        assert!(bytes.len() >= 2, "board blob too short");
        let n = bytes[0];
        let to_move = Player::from_byte(bytes[1]).expect("bad side-to-move byte");
        let cells = bytes[2..].to_vec();
        assert_eq!(cells.len(), n as usize * n as usize, "board blob length mismatch");
        assert!(cells.iter().all(|&c| c <= 2), "bad cell byte");
        Board { n, to_move, cells }
    }
}

/// Neighbour cells of `cell` on an `n` by `n` board.
pub fn neighbors(n: u16, cell: u16) -> impl Iterator<Item = u16> {
    const DELTAS: [(i32, i32); 6] = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, 1), (1, -1)];
    let (r, c) = ((cell / n) as i32, (cell % n) as i32);
    DELTAS.iter().filter_map(move |&(dr, dc)| {
        let (nr, nc) = (r + dr, c + dc);
        (nr >= 0 && nr < n as i32 && nc >= 0 && nc < n as i32).then(|| (nr * n as i32 + nc) as u16)
    })
}

// Union-find over cells plus four virtual edge nodes, path halving with
// union by size.
struct Uf {
    parent: Vec<u16>,
    size: Vec<u16>,
}

impl Uf {
    fn new(len: usize) -> Uf {
        Uf { parent: (0..len as u16).collect(), size: vec![1; len] }
    }

    fn find(&mut self, mut x: u16) -> u16 {
        while self.parent[x as usize] != x {
            self.parent[x as usize] = self.parent[self.parent[x as usize] as usize];
            x = self.parent[x as usize];
        }
        x
    }

    fn join(&mut self, a: u16, b: u16) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
    }
}

/// Incremental connectivity: colors plus union-find with the edge nodes.
struct Links {
    n: u16,
    colors: Vec<u8>,
    uf: Uf,
}

impl Links {
    fn new(n: u16) -> Links {
        Links { n, colors: vec![EMPTY; (n * n) as usize], uf: Uf::new((n * n) as usize + 4) }
    }

    fn top(&self) -> u16 {
        self.n * self.n
    }

    fn place(&mut self, cell: u16, p: Player) {
        debug_assert_eq!(self.colors[cell as usize], EMPTY);
        self.colors[cell as usize] = p.byte();
        for nb in neighbors(self.n, cell) {
            if self.colors[nb as usize] == p.byte() {
                self.uf.join(cell, nb);
            }
        }
        let (r, c) = (cell / self.n, cell % self.n);
        let edge = self.top();
        match p {
            Player::P1 => {
                if r == 0 {
                    self.uf.join(cell, edge);
                }
                if r == self.n - 1 {
                    self.uf.join(cell, edge + 1);
                }
            }
            Player::P2 => {
                if c == 0 {
                    self.uf.join(cell, edge + 2);
                }
                if c == self.n - 1 {
                    self.uf.join(cell, edge + 3);
                }
            }
        }
    }

    fn connected(&mut self, p: Player) -> bool {
        let edge = self.top();
        match p {
            Player::P1 => self.uf.find(edge) == self.uf.find(edge + 1),
            Player::P2 => self.uf.find(edge + 2) == self.uf.find(edge + 3),
        }
    }
}

/// Hex as a searchable game.
pub struct Hex {
    pub n: u8,
}

impl GameSpec for Hex {
    type State = Board;

    fn to_move(&self, s: &Board) -> Player {
        s.to_move()
    }

    fn legal_moves(&self, s: &Board) -> Vec<u16> {
        s.legal_moves()
    }

    fn apply(&self, s: &Board, mv: u16) -> Board {
        let mut next = s.clone();
        next.place(mv);
        next
    }

    fn winner(&self, s: &Board) -> Option<Player> {
        s.winner()
    }

    fn encode(&self, s: &Board) -> Vec<u8> {
        s.encode()
    }

    fn decode(&self, bytes: &[u8]) -> Board {
        Board::decode(bytes)
    }

    fn playout(&self, s: &Board, rng: &mut ChaCha8Rng) -> Player {
        s.playout(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn board_from(n: u8, stones: &[(u16, Player)]) -> Board {
        let mut b = Board::new(n);
        for &(cell, p) in stones {
            b.cells[cell as usize] = p.byte();
        }
        let p1 = b.cells.iter().filter(|&&c| c == 1).count();
        let p2 = b.cells.iter().filter(|&&c| c == 2).count();
        b.to_move = if p1 <= p2 { Player::P1 } else { Player::P2 };
        b
    }

    // Path search over one color, used as an independent connectivity oracle.
    fn path_winner(n: u16, cells: &[u8]) -> Option<Player> {
        let reaches = |p: Player| -> bool {
            let byte = p.byte();
            let mut seen = vec![false; cells.len()];
            let mut stack: Vec<u16> = (0..n)
                .map(|i| if p == Player::P1 { i } else { i * n })
                .filter(|&i| cells[i as usize] == byte)
                .collect();
            for &s in &stack {
                seen[s as usize] = true;
            }
            while let Some(c) = stack.pop() {
                let far = if p == Player::P1 { c / n == n - 1 } else { c % n == n - 1 };
                if far {
                    return true;
                }
                for nb in neighbors(n, c) {
                    if !seen[nb as usize] && cells[nb as usize] == byte {
                        seen[nb as usize] = true;
                        stack.push(nb);
                    }
                }
            }
            false
        };
        if reaches(Player::P1) {
            Some(Player::P1)
        } else if reaches(Player::P2) {
            Some(Player::P2)
        } else {
            None
        }
    }

    #[test]
    fn vertical_chain_wins_for_p1() {
        let b = board_from(3, &[(1, Player::P1), (4, Player::P1), (7, Player::P1)]);
        assert_eq!(b.winner(), Some(Player::P1));
    }

    #[test]
    fn horizontal_chain_wins_for_p2() {
        let b = board_from(3, &[(3, Player::P2), (4, Player::P2), (5, Player::P2)]);
        assert_eq!(b.winner(), Some(Player::P2));
    }

    #[test]
    fn diagonal_bridge_counts_as_adjacent() {
        // (r-1,c+1) steps connect: cells 6, 4, 2 run bottom-left to top-right
        let b = board_from(3, &[(6, Player::P1), (4, Player::P1), (2, Player::P1)]);
        assert_eq!(b.winner(), Some(Player::P1));
        // the opposite diagonal is not adjacent
        let c = board_from(3, &[(0, Player::P1), (4, Player::P1), (8, Player::P1)]);
        assert_eq!(c.winner(), None);
    }

    #[test]
    fn neighbor_counts_match_geometry() {
        let count = |cell| neighbors(3, cell).count();
        assert_eq!(count(4), 6); // center
        assert_eq!(count(0), 2); // acute corner
        assert_eq!(count(2), 3); // obtuse corner
        assert_eq!(count(1), 4); // top edge
    }

    #[test]
    fn every_full_coloring_has_exactly_one_winner() {
        // all 2^9 ways to fill 3x3 agree with the path-search oracle
        for mask in 0u16..512 {
            let mut b = Board::new(3);
            for i in 0..9 {
                b.cells[i] = if mask >> i & 1 == 1 { 1 } else { 2 };
            }
            let expect = path_winner(3, &b.cells);
            assert!(expect.is_some(), "filled board without a winner: {mask:#b}");
            assert_eq!(b.winner(), expect, "mask {mask:#b}");
        }
    }

    #[test]
    fn forced_playout_is_deterministic() {
        // one empty cell completes the P1 chain, so every playout ends P1
        let b = board_from(3, &[(1, Player::P1), (7, Player::P1), (3, Player::P2), (5, Player::P2)]);
        assert_eq!(b.winner(), None);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut full = b.clone();
        for i in [0u16, 2, 6, 8] {
            full.cells[i as usize] = 2;
        }
        assert_eq!(full.cells.iter().filter(|&&c| c == EMPTY).count(), 1);
        for _ in 0..64 {
            assert_eq!(full.playout(&mut rng), Player::P1);
        }
    }

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let mut b = Board::new(5);
        b.place(12);
        b.place(7);
        b.place(13);
        let blob = b.encode();
        assert_eq!(blob.len(), 2 + 25);
        assert_eq!(Board::decode(&blob), b);
        assert_eq!(Board::decode(&blob).encode(), blob);
    }

    #[test]
    fn legal_moves_ascend_and_vanish_at_the_end() {
        let mut b = Board::new(2);
        assert_eq!(b.legal_moves(), vec![0, 1, 2, 3]);
        b.place(2);
        assert_eq!(b.legal_moves(), vec![0, 1, 3]);
        b.place(0);
        b.place(1); // P1 cells 2 and 1 bridge top to bottom on 2x2
        assert_eq!(b.winner(), Some(Player::P1));
        assert_eq!(b.legal_moves(), Vec::<u16>::new());
    }

    #[test]
    fn playout_matches_full_search_on_random_games() {
        // random mid-game positions: incremental links agree with winner()
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let mut b = Board::new(5);
            loop {
                let moves = b.legal_moves();
                if moves.is_empty() || rng.gen_bool(0.1) {
                    break;
                }
                b.place(moves[rng.gen_range(0..moves.len())]);
            }
            if let Some(w) = b.winner() {
                assert_eq!(b.playout(&mut rng), w);
            }
        }
    }

    proptest! {
        #[test]
        fn filled_boards_never_draw(n in 1u8..=7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = Board::new(n);
            for i in 0..b.cells.len() {
                b.cells[i] = if rng.gen_bool(0.5) { 1 } else { 2 };
            }
            prop_assert!(b.winner().is_some());
        }

        #[test]
        fn winner_is_stable_under_extra_stones_of_either_color(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = Board::new(4);
            while b.winner().is_none() {
                let moves = b.legal_moves();
                b.place(moves[rng.gen_range(0..moves.len())]);
            }
            let w = b.winner().unwrap();
            // a finished connection cannot be cut: filling the remaining
            // cells with arbitrary stones never flips the result
            let empties: Vec<u16> =
                (0..16).filter(|&i| b.cells[i as usize] == EMPTY).collect();
            for &e in &empties {
                b.cells[e as usize] = if rng.gen_bool(0.5) { 1 } else { 2 };
                prop_assert_eq!(b.winner(), Some(w));
            }
        }

        #[test]
        fn encode_decode_round_trips(n in 1u8..=9, moves in proptest::collection::vec(any::<u16>(), 0..40)) {
            let mut b = Board::new(n);
            for m in moves {
                let legal = b.legal_moves();
                if legal.is_empty() {
                    break;
                }
                b.place(legal[m as usize % legal.len()]);
            }
            prop_assert_eq!(Board::decode(&b.encode()), b);
        }
    }
}
