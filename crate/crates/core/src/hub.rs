//! In-process hub: session registry, stream registration, clock sync
//! bookkeeping and fan-out to subscribers.
//!
//! All mutation happens under one lock, so every subscriber sees records in a
//! single global order. That order is FIFO per stream; cross-stream order is
//! arrival order and is reconstructed offline from corrected timestamps.

use crate::clock::{Clock, OffsetEstimator, OffsetTable, SyncError, TimedMeasurement, OFFSET_WINDOW};
use crate::model::{
    validate_stream_info, DeclViolation, MarkerOrigin, MarkerSample, Sample, StreamInfo, StreamKind,
    MARKER_STREAM_ID,
};
use crate::recorder::{
    DeclaredStream, Footer, MarkerRecord, NumericChunk, OffsetRecord, Record, RecorderError, RecordingWriter,
    HUB_SOURCE_REF,
};
use crate::wire::{Hello, SessionRole, SubscribeFilter};
use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};
use thiserror::Error;

/// Default per-subscriber queue depth.
pub const DEFAULT_QUEUE_CAPACITY: usize = 65536;
pub const OVERFLOW_MARKER: &str = "RECORDER-OVERFLOW";
pub const SOURCE_LOST_PREFIX: &str = "SOURCE-LOST:";

pub type SessionId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum HubError {
    #[error("bad-decl: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    BadDecl(Vec<DeclViolation>),
    #[error("duplicate-stream: {source_id}/{name}")]
    DuplicateStream { source_id: String, name: String },
    #[error("unknown-stream: {0}")]
    UnknownStream(u32),
    #[error("empty-marker")]
    EmptyMarker,
    #[error("unknown-session: {0}")]
    UnknownSession(SessionId),
    #[error("session-not-active: {0}")]
    NotActive(SessionId),
    #[error("bad-chunk: {0}")]
    BadChunk(String),
    #[error("sync: {0}")]
    Sync(#[from] SyncError),
}

impl HubError {
    /// Code sent back in ERR frames.
    pub fn code(&self) -> &'static str {
        match self {
            HubError::BadDecl(_) => "bad-decl",
            HubError::DuplicateStream { .. } => "duplicate-stream",
            HubError::UnknownStream(_) => "unknown-stream",
            HubError::EmptyMarker => "empty-marker",
            HubError::UnknownSession(_) => "unknown-session",
            HubError::NotActive(_) => "session-not-active",
            HubError::BadChunk(_) => "bad-chunk",
            HubError::Sync(_) => "bad-sync",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionState {
    Handshaking,
    Active,
    Closed,
}

#[derive(Debug, Clone)]
pub struct HubConfig {
    pub queue_capacity: usize,
    pub offset_window: usize,
}

impl Default for HubConfig {
    fn default() -> Self {
        HubConfig { queue_capacity: DEFAULT_QUEUE_CAPACITY, offset_window: OFFSET_WINDOW }
    }
}

/// What subscribers receive.
#[derive(Debug, Clone, PartialEq)]
pub enum HubEvent {
    Record(Record),
    /// Run metadata destined for the recording footer.
    Metadata { key: String, value: serde_json::Value },
}

pub struct Subscription {
    pub id: u64,
    pub rx: Receiver<HubEvent>,
}

struct SessionState {
    identity: Option<Hello>,
    state: ConnectionState,
    streams: Vec<u32>,
    estimator: OffsetEstimator,
    table: OffsetTable,
}

impl SessionState {
    fn source_id(&self) -> &str {
        self.identity.as_ref().map_or("?", |h| h.source_id.as_str())
    }
}

struct StreamEntry {
    info: StreamInfo,
    session: SessionId,
    pushed: u64,
    last_receive_t: Option<f64>,
}

struct Subscriber {
    id: u64,
    filter: SubscribeFilter,
    tx: Sender<HubEvent>,
}

struct HubState {
    sessions: BTreeMap<SessionId, SessionState>,
    streams: BTreeMap<u32, StreamEntry>,
    subscribers: Vec<Subscriber>,
    next_session: SessionId,
    next_stream: u32,
    next_subscriber: u64,
    markers: u64,
    overflowed: Vec<u64>,
}

/// Snapshot row for monitors.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStatus {
    pub stream_id: u32,
    pub source_ref: SessionId,
    pub info: StreamInfo,
    pub last_rtt: Option<f64>,
    pub last_offset: Option<f64>,
    pub pushed: u64,
}

/// Where a marker came from; hub-local markers are stamped on the hub clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerSource {
    Hub,
    Session(SessionId),
}

#[derive(Clone)]
pub struct Hub {
    state: Arc<Mutex<HubState>>,
    clock: Arc<dyn Clock>,
    cfg: HubConfig,
}

impl Hub {
    pub fn new(clock: Arc<dyn Clock>, cfg: HubConfig) -> Self {
        Hub {
            state: Arc::new(Mutex::new(HubState {
                sessions: BTreeMap::new(),
                streams: BTreeMap::new(),
                subscribers: Vec::new(),
                next_session: 1,
                next_stream: 1,
                next_subscriber: 1,
                markers: 0,
                overflowed: Vec::new(),
            })),
            clock,
            cfg,
        }
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    fn lock(&self) -> MutexGuard<'_, HubState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// A new connection awaiting HELLO.
    pub fn connect(&self) -> SessionId {
        let mut st = self.lock();
        let id = st.next_session;
        st.next_session += 1;
        st.sessions.insert(
            id,
            SessionState {
                identity: None,
                state: ConnectionState::Handshaking,
                streams: Vec::new(),
                estimator: OffsetEstimator::new(self.cfg.offset_window),
                table: OffsetTable::new(),
            },
        );
        id
    }

    pub fn hello(&self, session: SessionId, hello: Hello) -> Result<(), HubError> {
        let mut st = self.lock();
        let s = st.sessions.get_mut(&session).ok_or(HubError::UnknownSession(session))?;
        if s.state == ConnectionState::Closed {
            return Err(HubError::NotActive(session));
        }
        s.identity = Some(hello);
        s.state = ConnectionState::Active;
        Ok(())
    }

    /// Connect and handshake in one step.
    pub fn open_session(&self, source_id: &str) -> SessionId {
        let id = self.connect();
        self.hello(id, Hello { source_id: source_id.to_string(), role: SessionRole::Producer })
            .expect("fresh session");
        id
    }

    pub fn session_state(&self, session: SessionId) -> Option<ConnectionState> {
        self.lock().sessions.get(&session).map(|s| s.state)
    }

    pub fn register_stream(&self, session: SessionId, info: StreamInfo) -> Result<u32, HubError> {
        let violations = validate_stream_info(&info);
        if !violations.is_empty() {
            return Err(HubError::BadDecl(violations));
        }
        if info.kind == StreamKind::Marker {
            // Markers travel on the reserved stream; a producer cannot own one.
            return Err(HubError::BadDecl(vec![]));
        }
        let mut st = self.lock();
        let s = st.sessions.get(&session).ok_or(HubError::UnknownSession(session))?;
        if s.state == ConnectionState::Closed {
            return Err(HubError::NotActive(session));
        }
        let dup = st.streams.values().any(|e| {
            e.info.source_id == info.source_id
                && e.info.name == info.name
                && st.sessions.get(&e.session).is_some_and(|s| s.state != ConnectionState::Closed)
        });
        if dup {
            return Err(HubError::DuplicateStream { source_id: info.source_id, name: info.name });
        }
        let id = st.next_stream;
        st.next_stream += 1;
        st.streams.insert(id, StreamEntry { info: info.clone(), session, pushed: 0, last_receive_t: None });
        st.sessions.get_mut(&session).unwrap().streams.push(id);
        let rec = Record::Decl(DeclaredStream { stream_id: id, source_ref: session, info });
        self.broadcast(&mut st, HubEvent::Record(rec));
        Ok(id)
    }

    pub fn route_chunk(&self, session: SessionId, stream_id: u32, samples: Vec<Sample>) -> Result<(), HubError> {
        let mut st = self.lock();
        let s = st.sessions.get(&session).ok_or(HubError::UnknownSession(session))?;
        if s.state != ConnectionState::Active {
            return Err(HubError::NotActive(session));
        }
        let entry = match st.streams.get(&stream_id) {
            Some(e) if e.session == session => e,
            _ => return Err(HubError::UnknownStream(stream_id)),
        };
        let mut prev = f64::NEG_INFINITY;
        for (i, smp) in samples.iter().enumerate() {
            if !smp.fits(&entry.info) {
                return Err(HubError::BadChunk(format!("sample {i} does not match the declaration")));
            }
            if smp.raw_timestamp < prev {
                return Err(HubError::BadChunk(format!("timestamp decreases at sample {i}")));
            }
            prev = smp.raw_timestamp;
        }
        let now = self.clock.now();
        let entry = st.streams.get_mut(&stream_id).unwrap();
        entry.pushed += samples.len() as u64;
        entry.last_receive_t = Some(now);
        let rec = Record::Chunk(NumericChunk { stream_id, samples, hub_receive_t: now });
        self.broadcast(&mut st, HubEvent::Record(rec));
        Ok(())
    }

    /// Appends a marker to the reserved stream. `raw_t = None` stamps it with
    /// the hub clock.
    pub fn inject_marker(
        &self,
        source: MarkerSource,
        label: &str,
        origin: MarkerOrigin,
        raw_t: Option<f64>,
    ) -> Result<MarkerSample, HubError> {
        if label.is_empty() {
            return Err(HubError::EmptyMarker);
        }
        let mut st = self.lock();
        let source_ref = match source {
            MarkerSource::Hub => HUB_SOURCE_REF,
            MarkerSource::Session(id) => {
                let s = st.sessions.get(&id).ok_or(HubError::UnknownSession(id))?;
                if s.state != ConnectionState::Active {
                    return Err(HubError::NotActive(id));
                }
                id
            }
        };
        let t = raw_t.unwrap_or_else(|| self.clock.now());
        let marker = MarkerSample::new(t, label, origin);
        st.markers += 1;
        self.broadcast(&mut st, HubEvent::Record(Record::Marker(MarkerRecord { marker: marker.clone(), source_ref })));
        Ok(marker)
    }

    /// Records a hub-initiated exchange with a producer.
    pub fn record_probe(
        &self,
        session: SessionId,
        hub_send: f64,
        prod_recv: f64,
        prod_send: f64,
        hub_recv: f64,
    ) -> Result<TimedMeasurement, HubError> {
        let m = TimedMeasurement::from_hub_probe(hub_send, prod_recv, prod_send, hub_recv)?;
        let mut st = self.lock();
        let s = st.sessions.get_mut(&session).ok_or(HubError::UnknownSession(session))?;
        if s.state == ConnectionState::Closed {
            return Err(HubError::NotActive(session));
        }
        let offset = s.estimator.push(m);
        if s.table.entries().last().is_some_and(|e| e.measured_at >= m.measured_at) {
            // Out-of-order completion; the estimate still feeds the window.
            return Ok(m);
        }
        s.table.push(m.measured_at, offset)?;
        let rec = Record::Offset(OffsetRecord { source_ref: session, measured_at: m.measured_at, offset });
        self.broadcast(&mut st, HubEvent::Record(rec));
        Ok(m)
    }

    /// Closes a session. Without a BYE the hub announces the lost source.
    pub fn close_session(&self, session: SessionId, graceful: bool) {
        let mut st = self.lock();
        let Some(s) = st.sessions.get_mut(&session) else { return };
        if s.state == ConnectionState::Closed {
            return;
        }
        let was_identified = s.identity.is_some();
        s.state = ConnectionState::Closed;
        if !graceful && was_identified {
            let label = format!("{SOURCE_LOST_PREFIX}{}", s.source_id());
            let marker = MarkerSample::new(self.clock.now(), label, MarkerOrigin::Auto);
            st.markers += 1;
            let rec = Record::Marker(MarkerRecord { marker, source_ref: HUB_SOURCE_REF });
            self.broadcast(&mut st, HubEvent::Record(rec));
        }
    }

    pub fn offset_table(&self, session: SessionId) -> Option<OffsetTable> {
        self.lock().sessions.get(&session).map(|s| s.table.clone())
    }

    /// Streams of sessions that are not closed, with their sync diagnostics.
    pub fn list_streams(&self) -> Vec<StreamStatus> {
        let st = self.lock();
        st.streams
            .iter()
            .filter_map(|(id, e)| {
                let s = st.sessions.get(&e.session)?;
                if s.state == ConnectionState::Closed {
                    return None;
                }
                let last = s.estimator.last();
                Some(StreamStatus {
                    stream_id: *id,
                    source_ref: e.session,
                    info: e.info.clone(),
                    last_rtt: last.map(|m| m.rtt),
                    last_offset: s.table.entries().last().map(|e| e.offset),
                    pushed: e.pushed,
                })
            })
            .collect()
    }

    /// Total samples accepted per stream; stream 0 counts markers.
    pub fn pushed_counts(&self) -> BTreeMap<u32, u64> {
        let st = self.lock();
        let mut out: BTreeMap<u32, u64> = st.streams.iter().map(|(id, e)| (*id, e.pushed)).collect();
        if st.markers > 0 {
            out.insert(MARKER_STREAM_ID, st.markers);
        }
        out
    }

    /// Adds a subscriber. Declarations of live streams are replayed so the
    /// subscriber can decode their chunks; sample data is not.
    pub fn subscribe(&self, filter: SubscribeFilter) -> Subscription {
        self.subscribe_with_capacity(filter, self.cfg.queue_capacity)
    }

    pub fn subscribe_with_capacity(&self, filter: SubscribeFilter, capacity: usize) -> Subscription {
        let (tx, rx) = bounded(capacity.max(1));
        let mut st = self.lock();
        let id = st.next_subscriber;
        st.next_subscriber += 1;
        if filter == SubscribeFilter::All {
            for (sid, e) in &st.streams {
                if st.sessions.get(&e.session).is_some_and(|s| s.state != ConnectionState::Closed) {
                    let rec = Record::Decl(DeclaredStream { stream_id: *sid, source_ref: e.session, info: e.info.clone() });
                    let _ = tx.try_send(HubEvent::Record(rec));
                }
            }
        }
        st.subscribers.push(Subscriber { id, filter, tx });
        Subscription { id, rx }
    }

    pub fn unsubscribe(&self, id: u64) {
        self.lock().subscribers.retain(|s| s.id != id);
    }

    /// Ids of subscribers dropped for falling behind.
    pub fn overflowed_subscribers(&self) -> Vec<u64> {
        self.lock().overflowed.clone()
    }

    pub fn set_metadata(&self, key: &str, value: serde_json::Value) {
        let mut st = self.lock();
        self.broadcast(&mut st, HubEvent::Metadata { key: key.to_string(), value });
    }

    /// Drops every subscriber, which ends their receive loops once drained.
    pub fn shutdown(&self) {
        self.lock().subscribers.clear();
    }

    fn broadcast(&self, st: &mut HubState, ev: HubEvent) {
        let mut dropped: Vec<u64> = Vec::new();
        for sub in &st.subscribers {
            let wanted = match (&ev, sub.filter) {
                (_, SubscribeFilter::All) => true,
                (HubEvent::Record(Record::Marker(_)), SubscribeFilter::MarkerOnly) => true,
                _ => false,
            };
            if !wanted {
                continue;
            }
            match sub.tx.try_send(ev.clone()) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) => {
                    log::warn!("subscriber {} overflowed; disconnecting", sub.id);
                    st.overflowed.push(sub.id);
                    dropped.push(sub.id);
                }
                Err(TrySendError::Disconnected(_)) => dropped.push(sub.id),
            }
        }
        if dropped.is_empty() {
            return;
        }
        let overflow = dropped.iter().any(|id| st.overflowed.contains(id));
        let gone: HashSet<u64> = dropped.into_iter().collect();
        st.subscribers.retain(|s| !gone.contains(&s.id));
        if overflow {
            let marker = MarkerSample::new(self.clock.now(), OVERFLOW_MARKER, MarkerOrigin::Auto);
            st.markers += 1;
            let rec = HubEvent::Record(Record::Marker(MarkerRecord { marker, source_ref: HUB_SOURCE_REF }));
            self.broadcast(st, rec);
        }
    }
}

/// Drains a subscription into a recording until the hub shuts down, then
/// writes the footer.
pub fn run_recorder<W: Write>(sub: Subscription, mut writer: RecordingWriter<W>) -> Result<(W, Footer), RecorderError> {
    for ev in sub.rx.iter() {
        match ev {
            HubEvent::Record(r) => writer.write(&r)?,
            HubEvent::Metadata { key, value } => writer.set_metadata(key, value),
        }
    }
    writer.finish()
}
