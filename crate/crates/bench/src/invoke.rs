//! Remote-invocation throughput per call mode, two simulated machines.
//!
//! Modes, all invoking the same empty counting function on the far thread:
//!
//! * `send`: framed SEND through the destination service, one record each;
//! * `write`: one-sided channel, one record each;
//! * `trad`: aggregator batching records and flushing at the byte mark;
//! * `ovfl`: aggregator passing records straight through, spilling only
//!   when the channel is full;
//! * `max-raw`: transmitter-driven SENDs of equally sized buffers with no
//!   record serialization at all, the copy-free control.
//!
//! A rep's clock runs from the first call until the destination counted
//! every invocation, so rates include function dispatch. Payload bytes are
//! summed on both ends and must match before a row is reported.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use remi_core::config::{AggMode, Config};
use remi_core::fabric::{launch, FunctionRegistry, Path, Tuning};
use remi_core::sim::CostModel;

use crate::transport;

pub const MODES: [&str; 5] = ["send", "write", "trad", "ovfl", "max-raw"];

const FID_SINK: u64 = 100;

#[derive(Debug, Clone)]
pub struct Row {
    pub size: u32,
    pub mode: &'static str,
    pub mb_per_sec: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Send,
    Write,
    Trad,
    Ovfl,
    MaxRaw,
}

pub fn parse_modes(arg: &str) -> Result<Vec<&'static str>, String> {
    let mut out = Vec::new();
    for t in arg.split(',') {
        let t = t.trim();
        match MODES.iter().find(|m| **m == t) {
            Some(&m) => out.push(m),
            None => return Err(format!("unknown invoke mode {t:?}")),
        }
    }
    if out.is_empty() {
        return Err("empty mode list".into());
    }
    Ok(out)
}

fn mode_of(name: &str) -> Mode {
    match name {
        "send" => Mode::Send,
        "write" => Mode::Write,
        "trad" => Mode::Trad,
        "ovfl" => Mode::Ovfl,
        "max-raw" => Mode::MaxRaw,
        other => unreachable!("mode {other} slipped past parsing"),
    }
}

/// One timed rep over a fresh two-machine fabric. Returns elapsed seconds;
/// panics if a byte went missing.
fn fabric_rep(mode: Mode, size: u32, count: u64) -> f64 {
    let mut cfg = Config::with_placement(2, 1, 1);
    cfg.agg_mode = if mode == Mode::Ovfl { AggMode::Ovfl } else { AggMode::Trad };
    let tuning = Tuning { cost: CostModel::nic_like(), ..Tuning::default() };

    let calls = Arc::new(AtomicU64::new(0));
    let bytes = Arc::new(AtomicU64::new(0));
    let stop = Arc::new(AtomicBool::new(false));
    let secs = Arc::new(Mutex::new(0.0f64));

    let mut reg = FunctionRegistry::new();
    {
        let calls = calls.clone();
        let bytes = bytes.clone();
        reg.register(FID_SINK, move |_w, c| {
            bytes.fetch_add(c.payload.map_or(0, |p| p.len()) as u64, Ordering::Relaxed);
            calls.fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
    }

    let body = {
        let calls = calls.clone();
        let stop = stop.clone();
        let secs = secs.clone();
        move |w: &mut remi_core::fabric::Worker| -> remi_core::Result<()> {
            if w.flat() != 0 {
                while !stop.load(Ordering::Acquire) {
                    w.progress()?;
                    std::thread::yield_now();
                }
                return Ok(());
            }
            let payload = vec![0xB7u8; size as usize];
            let t0 = Instant::now();
            for _ in 0..count {
                loop {
                    let ok = match mode {
                        Mode::Send => w.call_buffer_via(Path::Send, 1, FID_SINK, &[], &payload, None)?,
                        Mode::Write => {
                            w.call_buffer_via(Path::Channel, 1, FID_SINK, &[], &payload, None)?
                        }
                        Mode::Trad | Mode::Ovfl => w.agg_call(1, FID_SINK, &[], Some(&payload), None)?,
                        Mode::MaxRaw => unreachable!("max-raw skips the fabric"),
                    };
                    if ok {
                        break;
                    }
                    w.progress()?;
                }
            }
            if matches!(mode, Mode::Trad | Mode::Ovfl) {
                w.flush_aggregated()?;
            }
            while calls.load(Ordering::Relaxed) < count {
                w.progress()?;
                std::hint::spin_loop();
            }
            *secs.lock().unwrap() = t0.elapsed().as_secs_f64();
            stop.store(true, Ordering::Release);
            Ok(())
        }
    };

    let report = launch(&cfg, tuning, reg, body).expect("invoke bench run");
    assert_eq!(report.malformed_service_records, 0);
    assert_eq!(calls.load(Ordering::Relaxed), count, "invocation went missing");
    assert_eq!(
        bytes.load(Ordering::Relaxed),
        count * size as u64,
        "payload bytes lost in {mode:?}/{size}"
    );
    let s = *secs.lock().unwrap();
    assert!(s > 0.0);
    s
}

/// The no-serialization control: same byte volume pushed as raw transport
/// sends, reusing the transport bench machinery (which asserts its own
/// conservation).
fn max_raw_rate(size: u32, count: u64, reps: u32) -> f64 {
    let rows = transport::rows(transport::Backend::Sim, &[size], count, 64, reps);
    rows.iter()
        .find(|r| r.mode == "raw+auto")
        .expect("transmitter row")
        .mb_per_sec
}

/// Measure every requested (size, mode) cell, `reps` reps each, mean rate.
pub fn rows(sizes: &[u32], modes: &[&'static str], count: u64, reps: u32) -> Vec<Row> {
    assert!(count > 0 && reps > 0);
    let mut out = Vec::new();
    for &size in sizes {
        for &name in modes {
            let mode = mode_of(name);
            let mb_per_sec = if mode == Mode::MaxRaw {
                max_raw_rate(size, count, reps)
            } else {
                let secs: f64 = (0..reps).map(|_| fabric_rep(mode, size, count)).sum();
                (count * size as u64) as f64 / (secs / reps as f64) / 1e6
            };
            out.push(Row { size, mode: name, mb_per_sec });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_lists_parse() {
        assert_eq!(parse_modes("send,write,trad,ovfl,max-raw").unwrap().len(), 5);
        assert_eq!(parse_modes("trad").unwrap(), vec!["trad"]);
        assert!(parse_modes("sendd").is_err());
        assert!(parse_modes("").is_err());
    }

    #[test]
    fn every_cell_gets_a_row() {
        let rows = rows(&[8, 64], &["send", "trad"], 300, 1);
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].size, rows[0].mode), (8, "send"));
        assert_eq!((rows[3].size, rows[3].mode), (64, "trad"));
        assert!(rows.iter().all(|r| r.mb_per_sec > 0.0));
    }

    #[test]
    fn one_sided_modes_run_end_to_end() {
        let rows = rows(&[32], &["write", "ovfl", "max-raw"], 300, 1);
        assert_eq!(rows.len(), 3);
    }
}
