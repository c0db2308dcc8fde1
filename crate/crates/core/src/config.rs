//! Runtime configuration shared by every layer.
//!
//! Values come from a flat `key = value` rendezvous file (one assignment per
//! line, `#` comments) or are built programmatically. Every knob has a default
//! so an empty file is a valid configuration.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggMode {
    Trad,
    Ovfl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RingGrowth {
    Linear,
    Exponential,
}

#[derive(Debug, Clone)]
pub struct Config {
    // placement
    pub machines: u32,
    pub processes_per_machine: u32,
    pub threads_per_process: u32,
    pub zones_per_machine: u32,

    // transmitter
    pub u_max: u32,

    // registered-memory allocators
    pub slab_size: u32,
    pub unit_size: u32,
    pub ring_initial: u32,
    pub ring_growth: RingGrowth,
    pub ring_max: u32,

    // messenger
    pub chunk_size: u32,
    pub c: u32,
    pub c_max: u32,
    /// Blocked ring-advance attempts before the sender falls back to reading
    /// the receiver's consumed offset directly. 0 disables the pull path.
    pub consumed_pull_threshold: u32,

    // aggregator
    pub agg_mode: AggMode,
    pub agg_flush_bytes: u32,
    pub agg_exceed_cap: u32,

    // fabric service
    pub service_recv_slots: u32,
    pub service_recv_size: u32,
    pub send_backlog_cap: u32,
    pub drain_timeout_ms: u64,

    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            machines: 1,
            processes_per_machine: 1,
            threads_per_process: 1,
            zones_per_machine: 1,
            u_max: 64,
            slab_size: 1 << 20,
            unit_size: 64 << 10,
            ring_initial: 4,
            ring_growth: RingGrowth::Exponential,
            ring_max: 64,
            chunk_size: 64 << 10,
            c: 2,
            c_max: 16,
            consumed_pull_threshold: 0,
            agg_mode: AggMode::Trad,
            agg_flush_bytes: 4096,
            agg_exceed_cap: 1 << 20,
            service_recv_slots: 256,
            service_recv_size: 8 << 10,
            send_backlog_cap: 1024,
            drain_timeout_ms: 10_000,
            seed: 0,
        }
    }
}

impl Config {
    pub fn with_placement(machines: u32, processes: u32, threads: u32) -> Self {
        Config {
            machines,
            processes_per_machine: processes,
            threads_per_process: threads,
            ..Config::default()
        }
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, e)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad numeric value {:?}", v))
        }
        match key {
            "machines" => self.machines = num(value)?,
            "processes_per_machine" => self.processes_per_machine = num(value)?,
            "threads_per_process" => self.threads_per_process = num(value)?,
            "zones_per_machine" => self.zones_per_machine = num(value)?,
            "u_max" => self.u_max = num(value)?,
            "slab_size" => self.slab_size = num(value)?,
            "unit_size" => self.unit_size = num(value)?,
            "ring_initial" => self.ring_initial = num(value)?,
            "ring_max" => self.ring_max = num(value)?,
            "ring_growth" => {
                self.ring_growth = match value {
                    "linear" => RingGrowth::Linear,
                    "exponential" => RingGrowth::Exponential,
                    other => return Err(format!("bad ring_growth {:?}", other)),
                }
            }
            "chunk_size" => self.chunk_size = num(value)?,
            "c" => self.c = num(value)?,
            "c_max" => self.c_max = num(value)?,
            "consumed_pull_threshold" => self.consumed_pull_threshold = num(value)?,
            "agg_mode" => {
                self.agg_mode = match value {
                    "trad" => AggMode::Trad,
                    "ovfl" => AggMode::Ovfl,
                    other => return Err(format!("bad agg_mode {:?}", other)),
                }
            }
            "agg_flush_bytes" => self.agg_flush_bytes = num(value)?,
            "agg_exceed_cap" => self.agg_exceed_cap = num(value)?,
            "service_recv_slots" => self.service_recv_slots = num(value)?,
            "service_recv_size" => self.service_recv_size = num(value)?,
            "send_backlog_cap" => self.send_backlog_cap = num(value)?,
            "drain_timeout_ms" => self.drain_timeout_ms = num(value)?,
            "seed" => self.seed = num(value)?,
            other => return Err(format!("unknown key {:?}", other)),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.machines == 0 || self.processes_per_machine == 0 || self.threads_per_process == 0 {
            return bad("placement dimensions must be positive".into());
        }
        if self.u_max == 0 {
            return bad("u_max must be positive".into());
        }
        if self.c == 0 || self.c_max < self.c {
            return bad(format!("need 0 < c <= c_max, got c={} c_max={}", self.c, self.c_max));
        }
        if self.chunk_size < 256 || self.chunk_size % 8 != 0 {
            return bad(format!("chunk_size {} must be >= 256 and 8-aligned", self.chunk_size));
        }
        if self.ring_initial == 0 || self.ring_max < self.ring_initial {
            return bad("need 0 < ring_initial <= ring_max".into());
        }
        if self.unit_size < 64 || self.slab_size < self.unit_size {
            return bad("need 64 <= unit_size <= slab_size".into());
        }
        Ok(())
    }

    pub fn total_processes(&self) -> u32 {
        self.machines * self.processes_per_machine
    }

    pub fn total_threads(&self) -> u32 {
        self.total_processes() * self.threads_per_process
    }
}
