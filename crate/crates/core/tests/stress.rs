//! Whole-stack runs under hostile device settings: a background completion
//! engine with jitter, plus seeded splitting of unsignaled writes. Anything
//! that leans on premature visibility or eager completion fails here.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use remi_core::fabric::{launch, FunctionRegistry, Path, SyncMode, Tuning, FID_USER_BASE};
use remi_core::Config;

const FID_COUNT: u64 = FID_USER_BASE;
const FID_SUM: u64 = FID_USER_BASE + 1;
const FID_BCAST: u64 = FID_USER_BASE + 2;
const FID_ECHO: u64 = FID_USER_BASE + 3;
const FID_FETCH: u64 = FID_USER_BASE + 4;

#[test]
fn mixed_primitives_under_deferred_jitter_and_splits() {
    let mut cfg = Config::with_placement(2, 2, 2);
    cfg.chunk_size = 1024;
    cfg.c = 2;
    cfg.c_max = 16;
    let n = 8u32;

    // one in-order lane per (src, dst) pair; the handler fails on any
    // duplicate, loss, or reorder
    let seqs: Arc<Vec<AtomicU32>> = Arc::new((0..n * n).map(|_| AtomicU32::new(0)).collect());
    let counted = Arc::new(AtomicU64::new(0));
    let summed = Arc::new(AtomicU64::new(0));
    let bcasts = Arc::new(AtomicU32::new(0));
    let fetched = Arc::new(AtomicU64::new(0));

    let mut reg = FunctionRegistry::new();
    {
        let seqs = seqs.clone();
        let counted = counted.clone();
        reg.register(FID_COUNT, move |w, c| {
            let seq = u32::from_le_bytes(c.context[..4].try_into().unwrap());
            let src = u32::from_le_bytes(c.context[4..8].try_into().unwrap());
            assert_eq!(src, c.src);
            let lane = &seqs[(src * n + w.flat()) as usize];
            assert_eq!(lane.fetch_add(1, Ordering::Relaxed), seq, "lane {src}->{}", w.flat());
            counted.fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
    }
    {
        let summed = summed.clone();
        reg.register(FID_SUM, move |_, c| {
            summed.fetch_add(u64::from_le_bytes(c.context[..8].try_into().unwrap()), Ordering::Relaxed);
        })
        .unwrap();
    }
    {
        let bcasts = bcasts.clone();
        reg.register(FID_BCAST, move |_, _| {
            bcasts.fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
    }
    reg.register_func(FID_ECHO, |_, c| {
        let mut v = c.context.to_vec();
        v.extend_from_slice(c.context);
        v
    })
    .unwrap();
    {
        let fetched = fetched.clone();
        reg.register(FID_FETCH, move |_, c| {
            let p = c.payload.expect("fetched bytes");
            fetched.fetch_add(p.iter().map(|&b| b as u64).sum::<u64>(), Ordering::Relaxed);
        })
        .unwrap();
    }

    let report = launch(&cfg, Tuning::stress(0x5EED), reg, move |w| {
        let me = w.flat();
        let sync = w.synchronizer(SyncMode::OnRemoteConsume);
        let mut next = vec![0u32; n as usize];

        for k in 0..120u32 {
            let dst = (me + 1 + (k % (n - 1))) % n;
            let path = if (me + dst) % 2 == 0 { Path::Send } else { Path::Channel };
            let mut ctx = [0u8; 8];
            ctx[..4].copy_from_slice(&next[dst as usize].to_le_bytes());
            ctx[4..].copy_from_slice(&me.to_le_bytes());
            while !w.call_via(path, dst, FID_COUNT, &ctx, Some(&sync))? {
                w.progress()?;
            }
            next[dst as usize] += 1;
        }

        for k in 1..=30u64 {
            while !w.agg_call((me + 1) % n, FID_SUM, &k.to_le_bytes(), None, Some(&sync))? {
                w.progress()?;
            }
        }
        w.flush_aggregated()?;

        if me == 3 {
            while !w.broadcast(FID_BCAST, &[], Some(&sync))? {
                w.progress()?;
            }
        }

        let half = (me + n / 2) % n;
        let path = if me % 2 == 0 { Path::Send } else { Path::Channel };
        let origin = w.alloc(64)?;
        let ticket = loop {
            if let Some(t) = w.call_return(path, half, FID_ECHO, &me.to_le_bytes(), &origin, None)? {
                break t;
            }
            w.progress()?;
        };

        let blob = w.alloc(512)?;
        blob.write(0, &vec![me as u8; 512]);
        while !w.call_fetch(path, half, FID_FETCH, &[], &blob, false, Some(&sync))? {
            w.progress()?;
        }

        while !ticket.done() {
            w.progress()?;
        }
        assert_eq!(ticket.succeeded(), Some(true));
        assert_eq!(ticket.value_len(), 8);
        assert_eq!(&origin.to_vec()[..4], &me.to_le_bytes());
        w.wait(&sync)?;
        Ok(())
    })
    .unwrap();

    assert_eq!(counted.load(Ordering::Relaxed), 8 * 120);
    assert_eq!(summed.load(Ordering::Relaxed), 8 * 465);
    assert_eq!(bcasts.load(Ordering::Relaxed), 8);
    // sum over flats of 512 * flat
    assert_eq!(fetched.load(Ordering::Relaxed), 512 * 28);
    assert_eq!(report.malformed_service_records, 0);
    assert_eq!(report.overflow_faults, 0);
    assert!(report.splits_applied > 0, "split hook never fired");
}

#[test]
fn many_senders_grow_one_receivers_rings() {
    let mut cfg = Config::with_placement(1, 3, 1);
    cfg.chunk_size = 512;
    cfg.c = 2;
    cfg.c_max = 8;
    let per_sender = 400u32;

    let seqs: Arc<Vec<AtomicU32>> = Arc::new((0..3).map(|_| AtomicU32::new(0)).collect());
    let total = Arc::new(AtomicU32::new(0));
    let mut reg = FunctionRegistry::new();
    {
        let seqs = seqs.clone();
        let total = total.clone();
        reg.register(FID_COUNT, move |_, c| {
            let seq = u32::from_le_bytes(c.context[..4].try_into().unwrap());
            assert_eq!(seqs[c.src as usize].fetch_add(1, Ordering::Relaxed), seq);
            total.fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
    }

    let t2 = total.clone();
    let report = launch(&cfg, Tuning::stress(0xBEEF), reg, move |w| {
        if w.flat() == 0 {
            while t2.load(Ordering::Relaxed) < 2 * per_sender {
                w.progress()?;
            }
        } else {
            let sync = w.synchronizer(SyncMode::OnRemoteConsume);
            for i in 0..per_sender {
                while !w.call_via(Path::Channel, 0, FID_COUNT, &i.to_le_bytes(), Some(&sync))? {
                    w.progress()?;
                }
            }
            w.wait(&sync)?;
        }
        Ok(())
    })
    .unwrap();

    assert_eq!(total.load(Ordering::Relaxed), 2 * per_sender);
    // both senders' records plus their shutdown markers arrive at worker 0
    assert_eq!(report.workers[0].channel_records, 2 * (per_sender as u64 + 1));
}

#[test]
fn broadcast_trees_of_every_arity_cover_all_threads() {
    let cfg = Config::with_placement(1, 4, 2);
    let n = 8u32;
    let hits = Arc::new(AtomicU32::new(0));
    let mut reg = FunctionRegistry::new();
    {
        let hits = hits.clone();
        reg.register(FID_BCAST, move |_, _| {
            hits.fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
    }

    let round = Arc::new(AtomicU32::new(0));
    let r2 = round.clone();
    let h2 = hits.clone();
    launch(&cfg, Tuning::default(), reg, move |w| {
        for (i, arity) in (1u32..=8).enumerate() {
            let root = arity % n;
            if w.flat() == root {
                let sync = w.synchronizer(SyncMode::OnRemoteConsume);
                while !w.broadcast_tree(Path::Channel, arity, FID_BCAST, &[], None, Some(&sync))? {
                    w.progress()?;
                }
                w.wait(&sync)?;
                assert_eq!(h2.swap(0, Ordering::Relaxed), n, "arity {arity}");
                r2.store(i as u32 + 1, Ordering::Release);
            } else {
                while r2.load(Ordering::Acquire) <= i as u32 {
                    w.progress()?;
                }
            }
        }
        Ok(())
    })
    .unwrap();
}
