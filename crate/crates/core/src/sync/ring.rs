use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_queue::ArrayQueue;

use crate::error::{Error, Result};

fn check_capacity(capacity: usize) -> Result<()> {
    if capacity == 0 || !capacity.is_power_of_two() {
        return Err(Error::invalid(format!(
            "ring capacity {capacity} must be a power of two"
        )));
    }
    Ok(())
}

/// Bounded FIFO that overwrites its oldest entry when full.
#[derive(Debug, Clone)]
pub struct RingBuffer<T> {
    slots: Vec<Option<T>>,
    head: u64,
    tail: u64,
    overflows: u64,
}

impl<T> RingBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        check_capacity(capacity)?;
        Ok(Self {
            slots: (0..capacity).map(|_| None).collect(),
            head: 0,
            tail: 0,
            overflows: 0,
        })
    }

    fn mask(&self) -> u64 {
        self.slots.len() as u64 - 1
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        (self.tail - self.head) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.tail == self.head
    }

    /// Items lost to overwriting so far.
    pub fn overflows(&self) -> u64 {
        self.overflows
    }

    /// Appends `item`, returning the evicted oldest entry if the buffer was
    /// full.
    pub fn push(&mut self, item: T) -> Option<T> {
        let evicted = if self.len() == self.capacity() {
            self.overflows += 1;
            let idx = (self.head & self.mask()) as usize;
            let old = self.slots[idx].take();
            self.head += 1;
            old
        } else {
            None
        };
        let idx = (self.tail & self.mask()) as usize;
        self.slots[idx] = Some(item);
        self.tail += 1;
        evicted
    }

    pub fn pop(&mut self) -> Option<T> {
        if self.is_empty() {
            return None;
        }
        let idx = (self.head & self.mask()) as usize;
        self.head += 1;
        self.slots[idx].take()
    }

    pub fn drain(&mut self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len());
        while let Some(v) = self.pop() {
            out.push(v);
        }
        out
    }
}

struct Shared<T> {
    queue: ArrayQueue<T>,
    overflows: AtomicU64,
}

/// Write end of a lock-free single-producer/single-consumer ring.
pub struct RingProducer<T> {
    shared: Arc<Shared<T>>,
}

/// Read end of a lock-free single-producer/single-consumer ring.
pub struct RingConsumer<T> {
    shared: Arc<Shared<T>>,
}

/// Overwrite-oldest ring shared between one producer and one consumer
/// context. The ends are not `Clone`.
pub fn spsc_ring<T>(capacity: usize) -> Result<(RingProducer<T>, RingConsumer<T>)> {
    check_capacity(capacity)?;
    let shared = Arc::new(Shared {
        queue: ArrayQueue::new(capacity),
        overflows: AtomicU64::new(0),
    });
    Ok((
        RingProducer {
            shared: Arc::clone(&shared),
        },
        RingConsumer { shared },
    ))
}

impl<T> RingProducer<T> {
    pub fn push(&self, item: T) -> Option<T> {
        let evicted = self.shared.queue.force_push(item);
        if evicted.is_some() {
            self.shared.overflows.fetch_add(1, Ordering::Relaxed);
        }
        evicted
    }

    pub fn overflows(&self) -> u64 {
        self.shared.overflows.load(Ordering::Relaxed)
    }
}

impl<T> RingConsumer<T> {
    pub fn pop(&self) -> Option<T> {
        self.shared.queue.pop()
    }

    pub fn len(&self) -> usize {
        self.shared.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shared.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.shared.queue.capacity()
    }

    pub fn overflows(&self) -> u64 {
        self.shared.overflows.load(Ordering::Relaxed)
    }

    pub fn drain(&self) -> Vec<T> {
        std::iter::from_fn(|| self.pop()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn capacity_must_be_power_of_two() {
        assert!(RingBuffer::<u8>::new(0).is_err());
        assert!(RingBuffer::<u8>::new(12).is_err());
        assert!(spsc_ring::<u8>(3).is_err());
        assert_eq!(RingBuffer::<u8>::new(16).unwrap().capacity(), 16);
    }

    #[test]
    fn fifo_without_overflow() {
        let mut r = RingBuffer::new(8).unwrap();
        for i in 0..5 {
            assert!(r.push(i).is_none());
        }
        assert_eq!(r.pop(), Some(0));
        r.push(5);
        assert_eq!(r.drain(), vec![1, 2, 3, 4, 5]);
        assert_eq!(r.overflows(), 0);
        assert!(r.pop().is_none());
    }

    proptest! {
        #[test]
        fn keeps_last_capacity_items(log_cap in 0u32..6, n in 0usize..200) {
            let cap = 1usize << log_cap;
            let mut r = RingBuffer::new(cap).unwrap();
            for i in 0..n {
                r.push(i);
            }
            let expect: Vec<usize> = (n.saturating_sub(cap)..n).collect();
            prop_assert_eq!(r.overflows() as usize, n.saturating_sub(cap));
            prop_assert_eq!(r.drain(), expect);
        }

        #[test]
        fn spsc_matches_sequential_ring(log_cap in 0u32..6, n in 0usize..200) {
            let cap = 1usize << log_cap;
            let (tx, rx) = spsc_ring(cap).unwrap();
            for i in 0..n {
                tx.push(i);
            }
            prop_assert_eq!(rx.overflows() as usize, n.saturating_sub(cap));
            prop_assert_eq!(rx.drain(), (n.saturating_sub(cap)..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn concurrent_producer_consumer_preserves_order() {
        let (tx, rx) = spsc_ring::<u64>(64).unwrap();
        let n = 200_000u64;
        let producer = std::thread::spawn(move || {
            for i in 0..n {
                tx.push(i);
            }
            tx.overflows()
        });
        let mut seen = Vec::new();
        loop {
            match rx.pop() {
                Some(v) => seen.push(v),
                None if producer.is_finished() => {
                    seen.extend(rx.drain());
                    break;
                }
                None => std::thread::yield_now(),
            }
        }
        let overflows = producer.join().unwrap();
        assert!(seen.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(seen.len() as u64 + overflows, n);
        assert_eq!(*seen.last().unwrap(), n - 1);
    }
}
