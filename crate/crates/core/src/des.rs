//! Discrete-event kernel: integer-nanosecond clock, a `(fire_at, seq)` ordered
//! event queue, and named random streams derived from one master seed.
//!
//! The engine is generic over the event payload; the payload itself names the
//! handler it is meant for, so dispatch is a `match` in the caller's handler.
//!
//! # Random streams
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`, counter
//! based). Its 32-byte key is derived from `(master_seed, label)`:
//!
//! 1. `h = FNV-1a-64(label bytes)`
//! 2. `x = master_seed ^ h.rotate_left(17)`
//! 3. four successive SplitMix64 outputs seeded with `x`, little-endian, form the key.
//!
//! Adding a new consumer with a new label never perturbs existing streams.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Virtual time (or a virtual duration) in integer nanoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000_000)
    }

    /// Rounds to the nearest nanosecond; negative and non-finite inputs map to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        if !s.is_finite() || s <= 0.0 {
            return SimTime::ZERO;
        }
        SimTime((s * 1e9).round() as u64)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        Self::from_secs_f64(ms * 1e-3)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 * 1e-6
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_add(rhs.0).expect("virtual clock overflow"))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        *self = *self + rhs;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_sub(rhs.0).expect("negative virtual duration"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

/// Identifier of a scheduled event; equal to its tie-breaking sequence number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

struct Scheduled<E> {
    fire_at: SimTime,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // BinaryHeap is a max-heap; invert so the earliest (fire_at, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

/// A handler failure annotated with the event that triggered it.
#[derive(Debug, thiserror::Error)]
#[error("handler failed on event #{seq} at {fire_at}: {source}")]
pub struct EventFailure<Er: std::error::Error + 'static> {
    pub fire_at: SimTime,
    pub seq: u64,
    #[source]
    pub source: Er,
}

/// Bookkeeping for the no-event-loss invariant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EventCounters {
    pub scheduled: u64,
    pub processed: u64,
    pub pending: u64,
}

/// Single-threaded event loop.
pub struct Engine<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Scheduled<E>>,
    processed: u64,
    trace: u64,
    rngs: RngRegistry,
}

impl<E> Engine<E> {
    pub fn new(master_seed: u64) -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            processed: 0,
            trace: FNV_OFFSET,
            rngs: RngRegistry::new(master_seed),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn master_seed(&self) -> u64 {
        self.rngs.master_seed
    }

    /// Enqueues `payload` to fire `delay` after the current instant.
    pub fn schedule(&mut self, delay: SimTime, payload: E) -> EventId {
        let at = self.now + delay;
        self.push(at, payload)
    }

    /// Enqueues at an absolute instant, which must not lie in the past.
    pub fn schedule_at(&mut self, at: SimTime, payload: E) -> EventId {
        assert!(at >= self.now, "cannot schedule in the past ({at} < {})", self.now);
        self.push(at, payload)
    }

    fn push(&mut self, fire_at: SimTime, payload: E) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Scheduled { fire_at, seq, payload });
        EventId(seq)
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|s| s.fire_at)
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Processes every event with `fire_at <= t_end` in `(fire_at, seq)` order.
    ///
    /// Afterwards the clock reads `t_end` if later events are still pending,
    /// otherwise the time of the last processed event.
    pub fn run_until<F, Er>(&mut self, t_end: SimTime, mut handler: F) -> Result<u64, EventFailure<Er>>
    where
        F: FnMut(&mut Engine<E>, E) -> Result<(), Er>,
        Er: std::error::Error + 'static,
    {
        let mut count = 0;
        while let Some(head) = self.queue.peek() {
            if head.fire_at > t_end {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            debug_assert!(ev.fire_at >= self.now);
            self.now = ev.fire_at;
            self.processed += 1;
            self.trace = fnv_fold(self.trace, ev.fire_at.0);
            self.trace = fnv_fold(self.trace, ev.seq);
            count += 1;
            handler(self, ev.payload).map_err(|source| EventFailure { fire_at: ev.fire_at, seq: ev.seq, source })?;
        }
        if !self.queue.is_empty() && t_end > self.now {
            self.now = t_end;
        }
        Ok(count)
    }

    pub fn counters(&self) -> EventCounters {
        EventCounters { scheduled: self.next_seq, processed: self.processed, pending: self.queue.len() as u64 }
    }

    /// Running FNV digest over every processed `(fire_at, seq)` pair.
    pub fn trace_digest(&self) -> u64 {
        self.trace
    }

    pub fn rng(&mut self, label: &str) -> &mut RngStream {
        self.rngs.stream(label)
    }

    pub fn rngs(&mut self) -> &mut RngRegistry {
        &mut self.rngs
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_fold(mut h: u64, word: u64) -> u64 {
    for b in word.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// 64-bit FNV-1a hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the 32-byte ChaCha key for `(master_seed, label)`.
pub fn derive_seed(master_seed: u64, label: &str) -> [u8; 32] {
    let mut x = master_seed ^ fnv1a(label.as_bytes()).rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut x).to_le_bytes());
    }
    key
}

/// A labelled, independently seeded random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, label: &str) -> Self {
        RngStream { label: label.to_owned(), rng: ChaCha8Rng::from_seed(derive_seed(master_seed, label)) }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.standard_normal()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// Lazily created streams keyed by label.
#[derive(Clone, Debug)]
pub struct RngRegistry {
    master_seed: u64,
    streams: BTreeMap<String, RngStream>,
}

impl RngRegistry {
    pub fn new(master_seed: u64) -> Self {
        RngRegistry { master_seed, streams: BTreeMap::new() }
    }

    pub fn stream(&mut self, label: &str) -> &mut RngStream {
        if !self.streams.contains_key(label) {
            self.streams.insert(label.to_owned(), RngStream::new(self.master_seed, label));
        }
        self.streams.get_mut(label).expect("inserted above")
    }
}
