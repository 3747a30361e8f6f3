//! Renewal clocks and the event queue that drives a trial.
//!
//! Each node owns a gradient clock of rate `μ_i`; one global clock of rate `β`
//! fires regularization syncs. Popping an event immediately schedules the next
//! arrival of the same clock.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Inter-arrival law. Every option has mean `1/rate`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClockDistribution {
    #[default]
    Exponential,
    FixedInterval,
    /// Uniform on `[lo/rate, hi/rate]` with `lo + hi = 2`.
    UniformInterval { lo: f64, hi: f64 },
}

impl ClockDistribution {
    pub fn validate(&self) -> Result<()> {
        if let ClockDistribution::UniformInterval { lo, hi } = *self {
            if !(lo >= 0.0 && hi >= lo && ((lo + hi) - 2.0).abs() < 1e-12) {
                return Err(Error::config(format!(
                    "uniform interval [{lo}, {hi}] must satisfy 0 <= lo <= hi and lo + hi = 2"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenewalClock {
    pub rate: f64,
    pub distribution: ClockDistribution,
    pub next_fire: f64,
}

impl RenewalClock {
    /// Clock whose first arrival is one inter-arrival after time zero.
    pub fn start(rate: f64, distribution: ClockDistribution, rng: &mut SimRng) -> Self {
        let mut c = RenewalClock {
            rate,
            distribution,
            next_fire: 0.0,
        };
        c.next_fire = c.interval(rng);
        c
    }

    fn interval(&self, rng: &mut SimRng) -> f64 {
        match self.distribution {
            ClockDistribution::Exponential => {
                Exp::new(self.rate).expect("positive rate").sample(rng)
            }
            ClockDistribution::FixedInterval => 1.0 / self.rate,
            ClockDistribution::UniformInterval { lo, hi } => {
                if lo == hi {
                    lo / self.rate
                } else {
                    rng.random_range(lo..hi) / self.rate
                }
            }
        }
    }

    fn advance(&mut self, rng: &mut SimRng, fired: u64) {
        self.next_fire = match self.distribution {
            // Multiply rather than accumulate so deterministic clocks hit k/rate exactly.
            ClockDistribution::FixedInterval => (fired + 1) as f64 / self.rate,
            _ => self.next_fire + self.interval(rng),
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    RegularizationSync,
    GradientAt(usize),
}

impl EventKind {
    /// Tie-break rank: sync first, then ascending node id.
    fn rank(self) -> (u8, usize) {
        match self {
            EventKind::RegularizationSync => (0, 0),
            EventKind::GradientAt(i) => (1, i),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    time: f64,
    kind: EventKind,
    clock: usize,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // Reversed so the max-heap yields the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.kind.rank().cmp(&self.kind.rank()))
    }
}

/// Pending arrivals of every clock in one trial.
#[derive(Debug, Clone)]
pub struct EventQueue {
    clocks: Vec<RenewalClock>,
    kinds: Vec<EventKind>,
    fired: Vec<u64>,
    heap: BinaryHeap<Pending>,
}

/// One gradient clock per entry of `mus` plus a sync clock when `beta > 0`.
pub fn schedule_init(
    mus: &[f64],
    beta: f64,
    distribution: ClockDistribution,
    rng: &mut SimRng,
) -> Result<EventQueue> {
    distribution.validate()?;
    if let Some(i) = mus.iter().position(|m| !(*m > 0.0 && m.is_finite())) {
        return Err(Error::config(format!("node {i}: rate must be positive, got {}", mus[i])));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::config(format!("sync rate must be nonnegative, got {beta}")));
    }
    let mut q = EventQueue {
        clocks: Vec::new(),
        kinds: Vec::new(),
        fired: Vec::new(),
        heap: BinaryHeap::new(),
    };
    if beta > 0.0 {
        q.push_clock(RenewalClock::start(beta, distribution, rng), EventKind::RegularizationSync);
    }
    for (i, &mu) in mus.iter().enumerate() {
        q.push_clock(RenewalClock::start(mu, distribution, rng), EventKind::GradientAt(i));
    }
    Ok(q)
}

impl EventQueue {
    fn push_clock(&mut self, clock: RenewalClock, kind: EventKind) {
        let idx = self.clocks.len();
        self.heap.push(Pending {
            time: clock.next_fire,
            kind,
            clock: idx,
        });
        self.clocks.push(clock);
        self.kinds.push(kind);
        self.fired.push(0);
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Time of the next event without consuming it.
    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|p| p.time)
    }

    /// Pops the earliest event and schedules that clock's next arrival.
    pub fn next_event(&mut self, rng: &mut SimRng) -> Result<Event> {
        let p = self
            .heap
            .pop()
            .ok_or_else(|| Error::contract("next_event on an empty queue"))?;
        self.fired[p.clock] += 1;
        let clock = &mut self.clocks[p.clock];
        clock.advance(rng, self.fired[p.clock]);
        self.heap.push(Pending {
            time: clock.next_fire,
            kind: self.kinds[p.clock],
            clock: p.clock,
        });
        Ok(Event {
            time: p.time,
            kind: p.kind,
        })
    }
}

/// Writes events as CSV `time,kind,node`. `node` is empty for syncs.
pub fn write_trace<W: Write>(events: &[Event], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "kind", "node"])?;
    for e in events {
        let (kind, node) = match e.kind {
            EventKind::RegularizationSync => ("sync", String::new()),
            EventKind::GradientAt(i) => ("gradient", i.to_string()),
        };
        w.write_record([e.time.to_string(), kind.to_string(), node])?;
    }
    w.flush()?;
    Ok(())
}
