//! Bounded multi-producer inbox.
//!
//! Ticket-sequenced ring (Vyukov style): producers claim a slot with one
//! fetch_add and stamp it ready with a release store, so the fast path takes
//! no lock and never spins while the ring has room. Each worker thread owns
//! one inbox; the service thread and local peers push into it, the worker
//! drains it. Per-producer FIFO order is preserved, which the invocation
//! paths rely on for their ordering guarantees.

use std::cell::UnsafeCell;
use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicUsize, Ordering};

struct Cell<T> {
    seq: AtomicUsize,
    value: UnsafeCell<MaybeUninit<T>>,
}

pub struct Inbox<T> {
    buf: Box<[Cell<T>]>,
    mask: usize,
    enq: AtomicUsize,
    deq: AtomicUsize,
}

unsafe impl<T: Send> Send for Inbox<T> {}
unsafe impl<T: Send> Sync for Inbox<T> {}

impl<T> Inbox<T> {
    pub fn with_capacity(cap: usize) -> Inbox<T> {
        let cap = cap.next_power_of_two().max(2);
        let buf = (0..cap)
            .map(|i| Cell {
                seq: AtomicUsize::new(i),
                value: UnsafeCell::new(MaybeUninit::uninit()),
            })
            .collect();
        Inbox { buf, mask: cap - 1, enq: AtomicUsize::new(0), deq: AtomicUsize::new(0) }
    }

    pub fn capacity(&self) -> usize {
        self.buf.len()
    }

    pub fn len(&self) -> usize {
        self.enq
            .load(Ordering::Relaxed)
            .saturating_sub(self.deq.load(Ordering::Relaxed))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Claim the next ticket and publish `v`. Waits only when the ring is
    /// full, i.e. the consumer is more than `capacity` items behind.
    pub fn push(&self, v: T) {
        let ticket = self.enq.fetch_add(1, Ordering::Relaxed);
        let cell = &self.buf[ticket & self.mask];
        while cell.seq.load(Ordering::Acquire) != ticket {
            std::hint::spin_loop();
            std::thread::yield_now();
        }
        unsafe { (*cell.value.get()).write(v) };
        cell.seq.store(ticket + 1, Ordering::Release);
    }

    pub fn try_pop(&self) -> Option<T> {
        loop {
            let head = self.deq.load(Ordering::Relaxed);
            let cell = &self.buf[head & self.mask];
            if cell.seq.load(Ordering::Acquire) != head + 1 {
                return None; // next item not published yet
            }
            if self
                .deq
                .compare_exchange_weak(head, head + 1, Ordering::Relaxed, Ordering::Relaxed)
                .is_err()
            {
                continue;
            }
            let v = unsafe { (*cell.value.get()).assume_init_read() };
            // free the slot for the producer one lap ahead
            cell.seq.store(head + self.buf.len(), Ordering::Release);
            return Some(v);
        }
    }
}

impl<T> Drop for Inbox<T> {
    fn drop(&mut self) {
        while self.try_pop().is_some() {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn single_producer_is_fifo() {
        let q = Inbox::with_capacity(8);
        for i in 0..6 {
            q.push(i);
        }
        for i in 0..6 {
            assert_eq!(q.try_pop(), Some(i));
        }
        assert_eq!(q.try_pop(), None);
    }

    #[test]
    fn wraps_many_laps_with_tiny_capacity() {
        let q = Inbox::with_capacity(4);
        for i in 0..1000 {
            q.push(i);
            assert_eq!(q.try_pop(), Some(i));
        }
        assert!(q.is_empty());
    }

    #[test]
    fn producers_interleave_without_loss_and_stay_fifo_per_producer() {
        let q = Arc::new(Inbox::with_capacity(64));
        let producers = 4u64;
        let per = 10_000u64;

        let drainer = {
            let q = q.clone();
            std::thread::spawn(move || {
                let mut last = vec![-1i64; producers as usize];
                let mut seen = 0u64;
                while seen < producers * per {
                    if let Some(v) = q.try_pop() {
                        let (p, i) = ((v >> 32) as usize, (v & 0xFFFF_FFFF) as i64);
                        assert!(i > last[p], "producer {p} reordered: {i} after {}", last[p]);
                        last[p] = i;
                        seen += 1;
                    } else {
                        std::hint::spin_loop();
                    }
                }
                assert_eq!(q.try_pop(), None);
            })
        };
        let handles: Vec<_> = (0..producers)
            .map(|p| {
                let q = q.clone();
                std::thread::spawn(move || {
                    for i in 0..per {
                        q.push(p << 32 | i);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        drainer.join().unwrap();
    }

    #[test]
    fn drop_releases_unconsumed_items() {
        let q = Inbox::with_capacity(8);
        let payload = Arc::new(());
        for _ in 0..5 {
            q.push(payload.clone());
        }
        assert_eq!(Arc::strong_count(&payload), 6);
        drop(q);
        assert_eq!(Arc::strong_count(&payload), 1);
    }
}
