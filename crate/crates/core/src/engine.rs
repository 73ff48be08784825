//! Deterministic discrete-event engine.
//!
//! The engine owns the virtual clock and a priority queue of pending events
//! ordered by `(fire_time, seq)`. `seq` is assigned at insertion and never
//! reused, so events scheduled for the same instant fire in insertion order.
//! Handlers receive `&mut Engine` and may schedule or cancel further events.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::ops::{Add, AddAssign, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Virtual time in integer microseconds since simulation start.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_us(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    pub const fn as_us(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
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
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Identifies the entity an event is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

impl EntityId {
    /// The logically centralized control plane.
    pub const CONTROL: EntityId = EntityId(u32::MAX);
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == EntityId::CONTROL {
            f.write_str("control")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Payloads expose a short kind label for the event trace.
pub trait EventKind {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event<P> {
    pub fire_time: SimTime,
    pub seq: u64,
    pub target: EntityId,
    pub payload: P,
}

/// Returned by [`Engine::schedule`]; permits cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn seq(self) -> u64 {
        self.0
    }
}

struct Entry<P>(Event<P>);

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.fire_time == other.0.fire_time && self.0.seq == other.0.seq
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first.
        other
            .0
            .fire_time
            .cmp(&self.0.fire_time)
            .then(other.0.seq.cmp(&self.0.seq))
    }
}

/// One fired event, as written to `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub seq: u64,
    pub target: EntityId,
    pub kind: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub events_fired: u64,
    pub final_clock: SimTime,
}

pub const DEFAULT_MAX_EVENTS: u64 = 100_000_000;

pub struct Engine<P> {
    clock: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Entry<P>>,
    live: HashSet<u64>,
    fired: u64,
    max_events: u64,
    trace: Option<Vec<TraceRecord>>,
}

impl<P: EventKind> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: EventKind> Engine<P> {
    pub fn new() -> Self {
        Engine {
            clock: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            live: HashSet::new(),
            fired: 0,
            max_events: DEFAULT_MAX_EVENTS,
            trace: None,
        }
    }

    pub fn with_max_events(mut self, max_events: u64) -> Self {
        self.max_events = max_events;
        self
    }

    /// Record every fired event for later dumping.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    /// Number of pending, non-cancelled events.
    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn events_fired(&self) -> u64 {
        self.fired
    }

    pub fn schedule(
        &mut self,
        fire_time: SimTime,
        target: EntityId,
        payload: P,
    ) -> Result<EventHandle, SimError> {
        if fire_time < self.clock {
            return Err(SimError::ScheduledInPast {
                at: fire_time,
                now: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.live.insert(seq);
        self.heap.push(Entry(Event {
            fire_time,
            seq,
            target,
            payload,
        }));
        Ok(EventHandle(seq))
    }

    pub fn schedule_in(
        &mut self,
        delay: SimTime,
        target: EntityId,
        payload: P,
    ) -> Result<EventHandle, SimError> {
        self.schedule(self.clock + delay, target, payload)
    }

    /// Returns false if the event already fired or was already cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.live.remove(&handle.0)
    }

    /// Fire every event with `fire_time <= t_end` in `(fire_time, seq)` order.
    ///
    /// When `t_end` is finite the clock ends at `t_end`; with `SimTime::MAX`
    /// it stays at the last fired event.
    pub fn run_until<F, E>(&mut self, t_end: SimTime, mut handler: F) -> Result<RunStats, E>
    where
        F: FnMut(&mut Engine<P>, Event<P>) -> Result<(), E>,
        E: From<SimError>,
    {
        let start_fired = self.fired;
        while let Some(top) = self.heap.peek() {
            if top.0.fire_time > t_end {
                break;
            }
            let Entry(event) = self.heap.pop().expect("peeked");
            if !self.live.remove(&event.seq) {
                continue;
            }
            debug_assert!(event.fire_time >= self.clock);
            self.clock = event.fire_time;
            self.fired += 1;
            if self.fired - start_fired > self.max_events {
                return Err(SimError::Livelock {
                    limit: self.max_events,
                    at: self.clock,
                }
                .into());
            }
            if let Some(trace) = self.trace.as_mut() {
                trace.push(TraceRecord {
                    t: event.fire_time.0,
                    seq: event.seq,
                    target: event.target,
                    kind: event.payload.kind().to_string(),
                });
            }
            handler(self, event)?;
        }
        if t_end != SimTime::MAX && t_end > self.clock {
            self.clock = t_end;
        }
        Ok(RunStats {
            events_fired: self.fired - start_fired,
            final_clock: self.clock,
        })
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Option<Vec<TraceRecord>> {
        self.trace.take()
    }
}

/// Write trace records as newline-delimited JSON.
pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Named RNG substreams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StreamId {
    Workload,
    Predictor,
    Dispatcher,
    Flip,
}

impl StreamId {
    fn index(self) -> u64 {
        match self {
            StreamId::Workload => 1,
            StreamId::Predictor => 2,
            StreamId::Dispatcher => 3,
            StreamId::Flip => 4,
        }
    }
}

/// Each stream is an independent ChaCha stream under the master seed, so
/// drawing from one never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    master: u64,
}

impl RngStreams {
    pub fn new(master: u64) -> Self {
        RngStreams { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, id: StreamId) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(id.index());
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[derive(Debug, Clone, PartialEq)]
    struct Tick(u32);

    impl EventKind for Tick {
        fn kind(&self) -> &'static str {
            "tick"
        }
    }

    fn collect(engine: &mut Engine<Tick>, t_end: SimTime) -> Vec<u32> {
        let mut seen = Vec::new();
        engine
            .run_until(t_end, |_, ev| {
                seen.push(ev.payload.0);
                Ok::<_, SimError>(())
            })
            .unwrap();
        seen
    }

    #[test]
    fn schedule_on_empty_queue() {
        let mut engine = Engine::new();
        engine
            .schedule(SimTime::ZERO, EntityId(0), Tick(0))
            .unwrap();
        assert_eq!(engine.len(), 1);
    }

    #[test]
    fn same_time_pops_in_insertion_order() {
        let mut engine = Engine::new();
        for i in 0..5 {
            engine.schedule(SimTime(10), EntityId(0), Tick(i)).unwrap();
        }
        assert_eq!(collect(&mut engine, SimTime::MAX), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn cancelled_event_never_fires() {
        let mut engine = Engine::new();
        let h = engine.schedule(SimTime(5), EntityId(0), Tick(1)).unwrap();
        engine.schedule(SimTime(6), EntityId(0), Tick(2)).unwrap();
        assert!(engine.cancel(h));
        assert!(!engine.cancel(h));
        assert_eq!(engine.len(), 1);
        assert_eq!(collect(&mut engine, SimTime::MAX), vec![2]);
    }

    #[test]
    fn cancel_after_fire_is_noop() {
        let mut engine = Engine::new();
        let h = engine.schedule(SimTime(1), EntityId(0), Tick(1)).unwrap();
        collect(&mut engine, SimTime::MAX);
        assert!(!engine.cancel(h));
    }

    #[test]
    fn rejects_past_events() {
        let mut engine = Engine::new();
        engine.schedule(SimTime(10), EntityId(0), Tick(0)).unwrap();
        collect(&mut engine, SimTime::MAX);
        let err = engine
            .schedule(SimTime(9), EntityId(0), Tick(1))
            .unwrap_err();
        assert!(matches!(err, SimError::ScheduledInPast { .. }));
    }

    #[test]
    fn empty_run_advances_clock_to_end() {
        let mut engine: Engine<Tick> = Engine::new();
        let stats = engine
            .run_until(SimTime(100), |_, _| Ok::<_, SimError>(()))
            .unwrap();
        assert_eq!(stats.events_fired, 0);
        assert_eq!(engine.now(), SimTime(100));
    }

    #[test]
    fn run_until_stops_at_horizon() {
        let mut engine = Engine::new();
        for t in 1..=3 {
            engine
                .schedule(SimTime(t), EntityId(0), Tick(t as u32))
                .unwrap();
        }
        assert_eq!(collect(&mut engine, SimTime(2)), vec![1, 2]);
        assert_eq!(engine.now(), SimTime(2));
        assert_eq!(engine.len(), 1);
        assert_eq!(collect(&mut engine, SimTime::MAX), vec![3]);
        assert_eq!(engine.now(), SimTime(3));
    }

    #[test]
    fn handlers_can_schedule_follow_ups() {
        let mut engine = Engine::new();
        engine.schedule(SimTime(0), EntityId(0), Tick(0)).unwrap();
        let mut seen = Vec::new();
        engine
            .run_until(SimTime::MAX, |eng, ev| {
                seen.push((eng.now().0, ev.payload.0));
                if ev.payload.0 < 3 {
                    eng.schedule_in(SimTime(10), EntityId(0), Tick(ev.payload.0 + 1))?;
                }
                Ok::<_, SimError>(())
            })
            .unwrap();
        assert_eq!(seen, vec![(0, 0), (10, 1), (20, 2), (30, 3)]);
    }

    #[test]
    fn livelock_is_detected() {
        let mut engine = Engine::new().with_max_events(50);
        engine.schedule(SimTime(0), EntityId(0), Tick(0)).unwrap();
        let err = engine
            .run_until(SimTime::MAX, |eng, _| {
                eng.schedule_in(SimTime::ZERO, EntityId(0), Tick(0))?;
                Ok::<_, SimError>(())
            })
            .unwrap_err();
        assert!(matches!(err, SimError::Livelock { limit: 50, .. }));
    }

    #[test]
    fn clock_never_goes_backwards() {
        let mut engine = Engine::new();
        let mut rng = RngStreams::new(7).stream(StreamId::Workload);
        for i in 0..500 {
            engine
                .schedule(SimTime(rng.gen_range(0..1000)), EntityId(0), Tick(i))
                .unwrap();
        }
        let mut last = SimTime::ZERO;
        engine
            .run_until(SimTime::MAX, |eng, ev| {
                assert!(eng.now() >= last);
                assert_eq!(eng.now(), ev.fire_time);
                last = eng.now();
                Ok::<_, SimError>(())
            })
            .unwrap();
    }

    #[test]
    fn trace_replay_is_identical() {
        fn run(seed: u64) -> String {
            let mut engine = Engine::new().with_trace();
            let mut rng = RngStreams::new(seed).stream(StreamId::Workload);
            for i in 0..100 {
                engine
                    .schedule(SimTime(rng.gen_range(0..50)), EntityId(i % 3), Tick(i))
                    .unwrap();
            }
            engine
                .run_until(SimTime::MAX, |_, _| Ok::<_, SimError>(()))
                .unwrap();
            let mut buf = Vec::new();
            write_trace(&mut buf, engine.trace().unwrap()).unwrap();
            String::from_utf8(buf).unwrap()
        }
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
        let first = run(11).lines().next().unwrap().to_string();
        let rec: TraceRecord = serde_json::from_str(&first).unwrap();
        assert_eq!(rec.kind, "tick");
    }

    #[test]
    fn streams_are_independent_of_interleaving() {
        let streams = RngStreams::new(42);
        let mut a = streams.stream(StreamId::Workload);
        let solo: Vec<u64> = (0..10).map(|_| a.gen()).collect();

        let mut a = streams.stream(StreamId::Workload);
        let mut b = streams.stream(StreamId::Predictor);
        let mut interleaved = Vec::new();
        for _ in 0..10 {
            let _: u64 = b.gen();
            interleaved.push(a.gen::<u64>());
            let _: u64 = b.gen();
        }
        assert_eq!(solo, interleaved);

        let mut p = streams.stream(StreamId::Predictor);
        let first_p: u64 = p.gen();
        assert_ne!(first_p, solo[0]);
    }
}
