//! Discrete-event kernel: a virtual clock, a `(time, sequence)` ordered event
//! queue and seeded random substreams.
//!
//! Time is an integer count of nanoseconds so event ordering never depends
//! on floating point rounding. Events scheduled for the same instant are
//! dispatched in insertion order.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A point in time or a duration, in nanoseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Nanos(pub u64);

impl Nanos {
    pub const ZERO: Nanos = Nanos(0);

    pub const fn from_micros(us: u64) -> Self {
        Nanos(us * 1_000)
    }

    /// Rounds to the nearest nanosecond; negative inputs clamp to zero.
    pub fn from_micros_f64(us: f64) -> Self {
        Nanos((us * 1_000.0).round().max(0.0) as u64)
    }

    pub fn as_micros_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn saturating_sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0.saturating_sub(rhs.0))
    }
}

impl Add for Nanos {
    type Output = Nanos;
    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

impl AddAssign for Nanos {
    fn add_assign(&mut self, rhs: Nanos) {
        self.0 += rhs.0;
    }
}

impl Sub for Nanos {
    type Output = Nanos;
    fn sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

impl fmt::Display for Nanos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}us", self.as_micros_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    time: Nanos,
    seq: u64,
}

/// Why [`Engine::run_until`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Quiescent,
    ReachedEnd,
}

pub struct Engine<E> {
    now: Nanos,
    next_seq: u64,
    heap: BinaryHeap<Reverse<(Key, EventSlot<E>)>>,
    cancelled: HashSet<u64>,
    dispatched: u64,
}

// Wrapper so the heap orders on the key only.
struct EventSlot<E>(E);

impl<E> PartialEq for EventSlot<E> {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
impl<E> Eq for EventSlot<E> {}
impl<E> PartialOrd for EventSlot<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for EventSlot<E> {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Self {
            now: Nanos::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            cancelled: HashSet::new(),
            dispatched: 0,
        }
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Enqueues `event` at `now + delay`.
    pub fn schedule(&mut self, delay: Nanos, event: E) -> EventId {
        self.schedule_at(self.now + delay, event)
    }

    pub fn schedule_at(&mut self, at: Nanos, event: E) -> EventId {
        assert!(at >= self.now, "cannot schedule into the past ({at} < {})", self.now);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap
            .push(Reverse((Key { time: at, seq }, EventSlot(event))));
        EventId(seq)
    }

    /// Returns false if the event was already dispatched or cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if id.0 >= self.next_seq {
            return false;
        }
        let pending = self.heap.iter().any(|Reverse((k, _))| k.seq == id.0);
        pending && self.cancelled.insert(id.0)
    }

    /// Pops the next live event at or before `end`, advancing the clock.
    pub fn next_event(&mut self, end: Option<Nanos>) -> Option<(Nanos, E)> {
        loop {
            let Reverse((key, _)) = self.heap.peek()?;
            if end.is_some_and(|end| key.time > end) {
                return None;
            }
            let Reverse((key, EventSlot(ev))) = self.heap.pop().expect("peeked");
            if self.cancelled.remove(&key.seq) {
                continue;
            }
            debug_assert!(key.time >= self.now);
            self.now = key.time;
            self.dispatched += 1;
            return Some((key.time, ev));
        }
    }

    /// Dispatches events in order until the queue drains or the next event
    /// lies beyond `end`. When stopping at `end` the clock is advanced to it.
    pub fn run_until<F>(&mut self, end: Option<Nanos>, mut handler: F) -> (Nanos, StopReason)
    where
        F: FnMut(&mut Engine<E>, E),
    {
        while let Some((_, ev)) = self.next_event(end) {
            handler(self, ev);
        }
        if self.pending() == 0 {
            (self.now, StopReason::Quiescent)
        } else {
            let end = end.expect("live events remain only when bounded");
            self.now = self.now.max(end);
            (self.now, StopReason::ReachedEnd)
        }
    }
}

/// Stochastic sources that draw from independent substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    InterFragment,
    Retry,
    SizeDraw,
    MixDraw,
    Arrival,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::InterFragment => 1,
            Stream::Retry => 2,
            Stream::SizeDraw => 3,
            Stream::MixDraw => 4,
            Stream::Arrival => 5,
        }
    }
}

/// Seeded generator for one named substream of one actor (e.g. a client).
pub fn substream(seed: u64, stream: Stream, actor: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream.id() << 32) | (actor & 0xFFFF_FFFF));
    rng
}
