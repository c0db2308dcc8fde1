//! Measurement library behind the `remi-bench` binary.
//!
//! Three benches, one per experiment shape:
//!
//! * [`transport`]: message rate through a queue pair, manual selective
//!   signaling vs the transmitter, over the in-process device or the framed
//!   TCP backend;
//! * [`invoke`]: remote-invocation throughput per call mode (send path,
//!   one-sided channel, both aggregation flavors, and a no-serialization
//!   control) between two simulated machines;
//! * [`mcts`]: phased tree-search runs per placement, reporting raw visit
//!   and completion counters.
//!
//! Every run asserts its conservation property (bytes received == bytes
//!   sent, or visits at the root == sum of phase caps) before reporting a
//! number, so a silently lossy transport cannot produce a pretty row. Rates
//! are wall-clock means over a configurable repetition count.

pub mod invoke;
pub mod mcts;
pub mod transport;

/// Expand a size argument: either `a..b` (doubling from `a` while <= `b`)
/// or a comma-separated list. Sizes are bytes and must be positive.
pub fn parse_sizes(arg: &str) -> Result<Vec<u32>, String> {
    let sizes = if let Some((lo, hi)) = arg.split_once("..") {
        let lo: u32 = lo.trim().parse().map_err(|_| format!("bad size {lo:?}"))?;
        let hi: u32 = hi.trim().parse().map_err(|_| format!("bad size {hi:?}"))?;
        if lo == 0 || hi < lo {
            return Err(format!("bad size range {arg:?}"));
        }
        let mut v = Vec::new();
        let mut s = lo as u64;
        while s <= hi as u64 {
            v.push(s as u32);
            s *= 2;
        }
        v
    } else {
        arg.split(',')
            .map(|t| t.trim().parse::<u32>().map_err(|_| format!("bad size {t:?}")))
            .collect::<Result<Vec<u32>, String>>()?
    };
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(format!("bad size list {arg:?}"));
    }
    if let Some(&big) = sizes.iter().find(|&&s| s > (1 << 20)) {
        return Err(format!("size {big} exceeds the 1 MiB bench ceiling"));
    }
    Ok(sizes)
}

/// Parse an `MxPxT` placement string.
pub fn parse_placement(arg: &str) -> Result<(u32, u32, u32), String> {
    let parts: Vec<&str> = arg.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("placement {arg:?} is not of the form MxPxT"));
    }
    let mut dims = [0u32; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p
            .trim()
            .parse()
            .map_err(|_| format!("placement {arg:?} has a non-numeric dimension"))?;
        if *d == 0 {
            return Err(format!("placement {arg:?} has a zero dimension"));
        }
    }
    Ok((dims[0], dims[1], dims[2]))
}
