//! Clock-offset estimation from ping/pong exchanges and timestamp
//! correction onto the hub timeline.
//!
//! An exchange is the classic four-timestamp probe: the requester stamps
//! `t0` on send and `t3` on receipt, the responder stamps `t1` on receipt and
//! `t2` on reply. With symmetric one-way delays the offset estimate is exact;
//! under any asymmetry its error is bounded by half the round-trip time,
//! which is why the window estimator keeps the least-delayed exchange.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

/// Interval between hub-initiated probes.
pub const PING_INTERVAL_S: f64 = 5.0;
/// Number of recent exchanges the offset estimator considers.
pub const OFFSET_WINDOW: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("non-causal exchange: round trip {0} s")]
    NonCausal(f64),
    #[error("empty measurement window")]
    EmptyWindow,
    #[error("empty offset table")]
    EmptyTable,
    #[error("offset entries must be strictly increasing in time ({prev} then {next})")]
    Unordered { prev: f64, next: f64 },
}

/// A source of seconds on some local timeline.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

/// Monotonic seconds since construction.
#[derive(Debug, Clone)]
pub struct MonotonicClock {
    start: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock { start: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// Clock set explicitly; drives time-accelerated simulations.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    bits: Arc<AtomicU64>,
}

impl ManualClock {
    pub fn new(t: f64) -> Self {
        ManualClock { bits: Arc::new(AtomicU64::new(t.to_bits())) }
    }

    pub fn set(&self, t: f64) {
        self.bits.store(t.to_bits(), Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::SeqCst))
    }
}

/// One four-timestamp exchange. `offset` is responder time minus requester
/// time; for producer-initiated probes answered by the hub that is
/// hub time minus producer time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetMeasurement {
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub offset: f64,
    pub rtt: f64,
}

pub fn measure_offset(t0: f64, t1: f64, t2: f64, t3: f64) -> Result<OffsetMeasurement, SyncError> {
    let rtt = (t3 - t0) - (t2 - t1);
    // zero-delay exchanges can come out a few ulps negative
    let eps = 1e-9 * (1.0 + t0.abs().max(t1.abs()));
    if !(rtt >= -eps) || t3 < t0 || t2 < t1 {
        return Err(SyncError::NonCausal(rtt));
    }
    let rtt = rtt.max(0.0);
    let offset = ((t1 - t0) + (t2 - t3)) / 2.0;
    Ok(OffsetMeasurement { t0, t1, t2, t3, offset, rtt })
}

/// A measurement expressed as hub minus producer offset, stamped with the hub
/// time at which it completed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedMeasurement {
    pub measured_at: f64,
    pub offset: f64,
    pub rtt: f64,
}

impl TimedMeasurement {
    /// Builds from a hub-initiated probe: hub sends at `hub_send`, the producer
    /// stamps receipt and reply on its own clock, the hub receives at
    /// `hub_recv`.
    pub fn from_hub_probe(hub_send: f64, prod_recv: f64, prod_send: f64, hub_recv: f64) -> Result<Self, SyncError> {
        let m = measure_offset(hub_send, prod_recv, prod_send, hub_recv)?;
        Ok(TimedMeasurement { measured_at: hub_recv, offset: -m.offset, rtt: m.rtt })
    }

    /// Builds from a producer-initiated probe answered by the hub.
    pub fn from_producer_probe(m: &OffsetMeasurement, measured_at: f64) -> Self {
        TimedMeasurement { measured_at, offset: m.offset, rtt: m.rtt }
    }
}

/// Offset of the least-delayed measurement; ties go to the latest one.
pub fn select_offset(window: &[TimedMeasurement]) -> Result<f64, SyncError> {
    window
        .iter()
        .reduce(|best, m| {
            if m.rtt < best.rtt || (m.rtt == best.rtt && m.measured_at >= best.measured_at) {
                m
            } else {
                best
            }
        })
        .map(|m| m.offset)
        .ok_or(SyncError::EmptyWindow)
}

/// Sliding window over the most recent exchanges of one producer.
#[derive(Debug, Clone)]
pub struct OffsetEstimator {
    window: VecDeque<TimedMeasurement>,
    capacity: usize,
}

impl Default for OffsetEstimator {
    fn default() -> Self {
        Self::new(OFFSET_WINDOW)
    }
}

impl OffsetEstimator {
    pub fn new(capacity: usize) -> Self {
        OffsetEstimator { window: VecDeque::with_capacity(capacity), capacity: capacity.max(1) }
    }

    /// Adds a measurement and returns the current best offset.
    pub fn push(&mut self, m: TimedMeasurement) -> f64 {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(m);
        let (a, b) = self.window.as_slices();
        let all: Vec<TimedMeasurement> = a.iter().chain(b).copied().collect();
        select_offset(&all).expect("window is non-empty")
    }

    pub fn last(&self) -> Option<&TimedMeasurement> {
        self.window.back()
    }

    /// The exchange the current estimate comes from: minimum rtt, latest
    /// on ties.
    pub fn selected(&self) -> Option<&TimedMeasurement> {
        self.window.iter().rev().min_by(|a, b| a.rtt.total_cmp(&b.rtt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetEntry {
    pub measured_at: f64,
    pub offset: f64,
}

/// Time-ordered offset estimates for one source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OffsetTable {
    entries: Vec<OffsetEntry>,
}

impl OffsetTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<OffsetEntry>) -> Result<Self, SyncError> {
        let mut t = OffsetTable::new();
        for e in entries {
            t.push(e.measured_at, e.offset)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, measured_at: f64, offset: f64) -> Result<(), SyncError> {
        if let Some(last) = self.entries.last() {
            if !(measured_at > last.measured_at) {
                return Err(SyncError::Unordered { prev: last.measured_at, next: measured_at });
            }
        }
        self.entries.push(OffsetEntry { measured_at, offset });
        Ok(())
    }

    pub fn entries(&self) -> &[OffsetEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Offset at `t`, linearly interpolated between bracketing entries and
    /// held constant outside the measured range.
    pub fn offset_at(&self, t: f64) -> Result<f64, SyncError> {
        let e = &self.entries;
        let first = e.first().ok_or(SyncError::EmptyTable)?;
        let last = e.last().unwrap();
        if t <= first.measured_at {
            return Ok(first.offset);
        }
        if t >= last.measured_at {
            return Ok(last.offset);
        }
        let hi = e.partition_point(|x| x.measured_at <= t);
        let (a, b) = (&e[hi - 1], &e[hi]);
        let w = (t - a.measured_at) / (b.measured_at - a.measured_at);
        Ok(a.offset + w * (b.offset - a.offset))
    }
}

/// Maps a producer timestamp onto the hub timeline.
pub fn correct_timestamp(raw_t: f64, table: &OffsetTable) -> Result<f64, SyncError> {
    Ok(raw_t + table.offset_at(raw_t)?)
}
