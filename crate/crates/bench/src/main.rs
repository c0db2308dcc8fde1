//! `remi-bench`: CSV micro-benchmarks for the invocation middleware.
//!
//! Three subcommands, each printing a fixed-schema CSV with a header row:
//!
//! ```text
//! remi-bench transport --sizes 8..65536 --count 1000
//! remi-bench invoke    --sizes 8,64,256 --modes send,write,trad,ovfl,max-raw
//! remi-bench mcts      --placement 1x1x4 --phases 2
//! ```
//!
//! Exit codes: 0 on success, 2 on a configuration error.

use std::io::Write;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use remi_bench::{invoke, mcts, parse_placement, parse_sizes, transport};

#[derive(Parser)]
#[command(name = "remi-bench", about = "transport, invocation and tree-search benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Sim,
    Stream,
}

#[derive(Args)]
struct OutArg {
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Queue-pair message rate: manual signaling vs the transmitter.
    Transport {
        /// `a..b` doubles from a to b inclusive; or a comma list.
        #[arg(long, default_value = "8..65536")]
        sizes: String,
        /// Messages per repetition.
        #[arg(long, default_value_t = 2000)]
        count: u64,
        /// Unsignaled-post budget per queue pair.
        #[arg(long, default_value_t = 64)]
        u_max: u32,
        /// Repetitions averaged per row.
        #[arg(long, default_value_t = 3)]
        reps: u32,
        /// In-process device or framed TCP loopback.
        #[arg(long, value_enum, default_value_t = BackendArg::Sim)]
        backend: BackendArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Call throughput per mode between two simulated machines.
    Invoke {
        #[arg(long, default_value = "8,64,256")]
        sizes: String,
        /// Comma list from: send, write, trad, ovfl, max-raw.
        #[arg(long, default_value = "send,write,trad,ovfl,max-raw")]
        modes: String,
        /// Calls per repetition.
        #[arg(long, default_value_t = 5000)]
        count: u64,
        #[arg(long, default_value_t = 3)]
        reps: u32,
        #[command(flatten)]
        out: OutArg,
    },
    /// Phased tree-search run; one CSV row per phase.
    Mcts {
        /// Placement as machines x processes x threads, e.g. 1x1x4.
        #[arg(long)]
        placement: String,
        #[arg(long, default_value_t = 1)]
        phases: u32,
        /// Rollouts per phase issued by each root-process thread.
        #[arg(long, default_value_t = 4096)]
        rollouts: u32,
        /// Playouts folded into one evaluation request.
        #[arg(long, default_value_t = 16)]
        spr: u32,
        #[arg(long, default_value_t = std::f64::consts::SQRT_2)]
        ucb_c: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Hex board edge length.
        #[arg(long, default_value_t = 7)]
        hex_n: u8,
        #[command(flatten)]
        out: OutArg,
    },
}

fn emit(out: &OutArg, csv: String) -> ExitCode {
    match &out.out {
        None => {
            print!("{csv}");
            ExitCode::SUCCESS
        }
        Some(path) => match std::fs::File::create(path).and_then(|mut f| f.write_all(csv.as_bytes())) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("remi-bench: cannot write {}: {e}", path.display());
                ExitCode::from(2)
            }
        },
    }
}

fn config_error(msg: &str) -> ExitCode {
    eprintln!("remi-bench: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Transport { sizes, count, u_max, reps, backend, out } => {
            let sizes = match parse_sizes(&sizes) {
                Ok(s) => s,
                Err(e) => return config_error(&e),
            };
            if count == 0 || reps == 0 || u_max == 0 {
                return config_error("count, reps and u_max must be positive");
            }
            let backend = match backend {
                BackendArg::Sim => transport::Backend::Sim,
                BackendArg::Stream => transport::Backend::Stream,
            };
            let rows = transport::rows(backend, &sizes, count, u_max, reps);
            let mut csv = String::from("mode,size,msgs_per_sec,mb_per_sec\n");
            for r in rows {
                csv.push_str(&format!("{},{},{:.2},{:.2}\n", r.mode, r.size, r.msgs_per_sec, r.mb_per_sec));
            }
            emit(&out, csv)
        }
        Cmd::Invoke { sizes, modes, count, reps, out } => {
            let sizes = match parse_sizes(&sizes) {
                Ok(s) => s,
                Err(e) => return config_error(&e),
            };
            let modes = match invoke::parse_modes(&modes) {
                Ok(m) => m,
                Err(e) => return config_error(&e),
            };
            if count == 0 || reps == 0 {
                return config_error("count and reps must be positive");
            }
            // record framing has to fit the receiving side: service recv
            // slots bound the send path, chunk capacity bounds the rest
            let cap = if modes.contains(&"send") { 8 << 10 } else { 60 << 10 };
            if let Some(&big) = sizes.iter().find(|&&s| s > cap) {
                return config_error(&format!("payload {big} exceeds the {cap}-byte cap for these modes"));
            }
            let rows = invoke::rows(&sizes, &modes, count, reps);
            let mut csv = String::from("size,mode,mb_per_sec\n");
            for r in rows {
                csv.push_str(&format!("{},{},{:.2}\n", r.size, r.mode, r.mb_per_sec));
            }
            emit(&out, csv)
        }
        Cmd::Mcts { placement, phases, rollouts, spr, ucb_c, seed, hex_n, out } => {
            let placement = match parse_placement(&placement) {
                Ok(p) => p,
                Err(e) => return config_error(&e),
            };
            if rollouts == 0 || spr == 0 || !(ucb_c.is_finite() && ucb_c >= 0.0) {
                return config_error("rollouts and spr must be positive, ucb-c nonnegative");
            }
            let knobs = mcts::Knobs {
                rollouts_per_thread: rollouts,
                sims_per_request: spr,
                ucb_c,
                seed,
                hex_n,
            };
            let rows = match mcts::rows(placement, phases, knobs) {
                Ok(r) => r,
                Err(e) => return config_error(&e),
            };
            let mut csv = String::from("config,visits,completions,rollouts_per_sec\n");
            for r in rows {
                csv.push_str(&format!("{},{},{},{:.2}\n", r.config, r.visits, r.completions, r.rollouts_per_sec));
            }
            emit(&out, csv)
        }
    }
}
