//! Priority queue ordered by (time, insertion sequence).

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use crate::time::SimTime;

/// Handle returned by [`EventQueue::push`], usable for cancellation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

struct Entry<T> {
    time: SimTime,
    seq: u64,
    payload: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

pub struct EventQueue<T> {
    heap: BinaryHeap<Reverse<Entry<T>>>,
    cancelled: BTreeSet<u64>,
    next_seq: u64,
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        Self { heap: BinaryHeap::new(), cancelled: BTreeSet::new(), next_seq: 0 }
    }
}

impl<T> EventQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: SimTime, payload: T) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry { time, seq, payload }));
        EventId(seq)
    }

    /// Marks a pending event so it is skipped when reached. Returns false if
    /// it was already cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        self.cancelled.insert(id.0)
    }

    pub fn pop(&mut self) -> Option<(SimTime, EventId, T)> {
        while let Some(Reverse(e)) = self.heap.pop() {
            if self.cancelled.remove(&e.seq) {
                continue;
            }
            return Some((e.time, EventId(e.seq), e.payload));
        }
        None
    }

    pub fn peek_time(&mut self) -> Option<SimTime> {
        while let Some(Reverse(e)) = self.heap.peek() {
            if self.cancelled.contains(&e.seq) {
                let seq = e.seq;
                self.heap.pop();
                self.cancelled.remove(&seq);
                continue;
            }
            return Some(e.time);
        }
        None
    }

    /// Number of entries still queued, cancelled ones included.
    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
