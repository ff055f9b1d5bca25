//! WebSocket bridge for the browser monitor.
//!
//! Hub to client, JSON text frames:
//! `{"type":"streams","payload":[{"id","name","source_id","rate","offset","rtt"}]}`,
//! `{"type":"samples","id","t":[..],"v":[[..],..]}` (decimated),
//! `{"type":"marker","t","label","origin"}`, `{"type":"zone","value"}`.
//! Client to hub: `{"type":"inject","label"}` only; anything else is
//! answered with `{"type":"error","message"}`.

use std::collections::BTreeMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use syncrec_core::hub::{Hub, HubEvent, MarkerSource};
use syncrec_core::model::{MarkerOrigin, Sample, StreamInfo};
use syncrec_core::recorder::Record;
use syncrec_core::twin::Zone;
use syncrec_core::wire::SubscribeFilter;
use tungstenite::{Message, WebSocket};

pub const DEFAULT_BRIDGE_PORT: u16 = 16572;

#[derive(Debug, Clone)]
pub struct BridgeConfig {
    /// Upper bound of points per second per channel sent to a client.
    pub max_points_per_sec: f64,
    pub flush_interval: Duration,
    pub streams_interval: Duration,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            max_points_per_sec: 30.0,
            flush_interval: Duration::from_millis(100),
            streams_interval: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone)]
struct Bucket {
    index: i64,
    first_t: f64,
    last_t: f64,
    min: Vec<f32>,
    max: Vec<f32>,
    n: usize,
}

impl Bucket {
    fn points(&self) -> Vec<(f64, Vec<f32>)> {
        if self.n == 1 {
            vec![(self.first_t, self.min.clone())]
        } else {
            vec![(self.first_t, self.min.clone()), (self.last_t, self.max.clone())]
        }
    }
}

/// Min/max decimation into fixed time buckets: each bucket yields at most a
/// min point and a max point, so bucket width is `2 / max_points_per_sec`.
#[derive(Debug, Clone)]
pub struct Decimator {
    width: f64,
    open: BTreeMap<u32, Bucket>,
}

impl Decimator {
    pub fn new(max_points_per_sec: f64) -> Self {
        Decimator { width: 2.0 / max_points_per_sec, open: BTreeMap::new() }
    }

    /// Feeds samples; returns points of buckets that closed.
    pub fn push(&mut self, stream_id: u32, samples: &[Sample]) -> Vec<(f64, Vec<f32>)> {
        let mut out = Vec::new();
        for s in samples {
            let idx = (s.raw_timestamp / self.width).floor() as i64;
            match self.open.get_mut(&stream_id) {
                Some(b) if b.index == idx => {
                    b.last_t = s.raw_timestamp;
                    for (i, v) in s.values.iter().enumerate() {
                        b.min[i] = b.min[i].min(*v);
                        b.max[i] = b.max[i].max(*v);
                    }
                    b.n += 1;
                    continue;
                }
                Some(b) if idx < b.index => continue,
                Some(b) => out.extend(b.points()),
                None => {}
            }
            self.open.insert(
                stream_id,
                Bucket {
                    index: idx,
                    first_t: s.raw_timestamp,
                    last_t: s.raw_timestamp,
                    min: s.values.clone(),
                    max: s.values.clone(),
                    n: 1,
                },
            );
        }
        out
    }
}

pub struct BridgeHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    clients: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl BridgeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let clients: Vec<_> = std::mem::take(&mut *self.clients.lock().unwrap_or_else(|p| p.into_inner()));
        for h in clients {
            let _ = h.join();
        }
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

pub fn spawn_bridge(hub: Hub, addr: impl ToSocketAddrs, cfg: BridgeConfig) -> io::Result<BridgeHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let clients: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
    let accept = {
        let (stop, clients) = (stop.clone(), clients.clone());
        thread::Builder::new().name("bridge-accept".into()).spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let (hub, stop, cfg) = (hub.clone(), stop.clone(), cfg.clone());
                        let h = thread::spawn(move || {
                            if let Err(e) = serve_client(hub, stream, stop, cfg) {
                                log::debug!("bridge client {peer}: {e}");
                            }
                        });
                        let mut c = clients.lock().unwrap_or_else(|p| p.into_inner());
                        c.retain(|h| !h.is_finished());
                        c.push(h);
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(e) => {
                        log::warn!("bridge accept failed: {e}");
                        thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        })?
    };
    Ok(BridgeHandle { addr: local, stop, accept: Some(accept), clients })
}

fn zone_name(z: Zone) -> &'static str {
    match z {
        Zone::Normal => "Normal",
        Zone::Reduced => "Reduced",
        Zone::Stop => "Stop",
    }
}

/// Reply to a client text frame, if one is due.
fn handle_client_text(hub: &Hub, text: &str) -> Option<Value> {
    let v: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return Some(json!({"type": "error", "message": format!("bad json: {e}")})),
    };
    if v.get("type").and_then(Value::as_str) != Some("inject") {
        return Some(json!({"type": "error", "message": "only inject messages are accepted"}));
    }
    let label = v.get("label").and_then(Value::as_str).unwrap_or("");
    match hub.inject_marker(MarkerSource::Hub, label, MarkerOrigin::Investigator, None) {
        Ok(_) => None,
        Err(e) => Some(json!({"type": "error", "message": e.code()})),
    }
}

fn send_json(ws: &mut WebSocket<TcpStream>, v: &Value) -> tungstenite::Result<()> {
    ws.send(Message::Text(v.to_string().into()))
}

struct ClientState {
    infos: BTreeMap<u32, StreamInfo>,
    zone_channel: BTreeMap<u32, usize>,
    zone: Option<Zone>,
    decimator: Decimator,
    pending: BTreeMap<u32, Vec<(f64, Vec<f32>)>>,
}

impl ClientState {
    /// Applies a hub event; returns messages to send immediately.
    fn apply(&mut self, ev: HubEvent) -> Vec<Value> {
        let mut out = Vec::new();
        match ev {
            HubEvent::Record(Record::Decl(d)) => {
                if let Some(i) = d.info.channel_labels.iter().position(|l| l == "zone") {
                    self.zone_channel.insert(d.stream_id, i);
                }
                self.infos.insert(d.stream_id, d.info);
            }
            HubEvent::Record(Record::Chunk(c)) => {
                if let Some(ch) = self.zone_channel.get(&c.stream_id) {
                    for s in &c.samples {
                        let z = Zone::from_code(s.values[*ch]);
                        if z.is_some() && z != self.zone {
                            self.zone = z;
                            out.push(json!({"type": "zone", "value": zone_name(z.unwrap())}));
                        }
                    }
                }
                let pts = self.decimator.push(c.stream_id, &c.samples);
                if !pts.is_empty() {
                    self.pending.entry(c.stream_id).or_default().extend(pts);
                }
            }
            HubEvent::Record(Record::Marker(m)) => out.push(json!({
                "type": "marker",
                "t": m.marker.raw_timestamp,
                "label": m.marker.label,
                "origin": m.marker.origin.to_string(),
            })),
            HubEvent::Record(Record::Offset(_)) | HubEvent::Metadata { .. } => {}
        }
        out
    }

    fn flush(&mut self) -> Vec<Value> {
        std::mem::take(&mut self.pending)
            .into_iter()
            .map(|(id, pts)| {
                let t: Vec<f64> = pts.iter().map(|p| p.0).collect();
                let v: Vec<&Vec<f32>> = pts.iter().map(|p| &p.1).collect();
                json!({"type": "samples", "id": id, "t": t, "v": v})
            })
            .collect()
    }
}

fn streams_message(hub: &Hub) -> Value {
    let payload: Vec<Value> = hub
        .list_streams()
        .into_iter()
        .map(|s| {
            json!({
                "id": s.stream_id,
                "name": s.info.name,
                "source_id": s.info.source_id,
                "rate": s.info.nominal_rate_hz,
                "offset": s.last_offset,
                "rtt": s.last_rtt,
            })
        })
        .collect();
    json!({"type": "streams", "payload": payload})
}

fn serve_client(hub: Hub, stream: TcpStream, stop: Arc<AtomicBool>, cfg: BridgeConfig) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_mut().set_read_timeout(Some(Duration::from_millis(10)))?;
    let sub = hub.subscribe(SubscribeFilter::All);
    let mut st = ClientState {
        infos: BTreeMap::new(),
        zone_channel: BTreeMap::new(),
        zone: None,
        decimator: Decimator::new(cfg.max_points_per_sec),
        pending: BTreeMap::new(),
    };
    send_json(&mut ws, &streams_message(&hub))?;
    let mut next_flush = Instant::now() + cfg.flush_interval;
    let mut next_streams = Instant::now() + cfg.streams_interval;
    let result = loop {
        if stop.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            break Ok(());
        }
        match ws.read() {
            Ok(Message::Text(t)) => {
                if let Some(reply) = handle_client_text(&hub, t.as_str()) {
                    send_json(&mut ws, &reply)?;
                }
            }
            Ok(Message::Close(_)) => break Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break Ok(()),
            Err(e) => break Err(e),
        }
        let mut now_msgs = Vec::new();
        for ev in sub.rx.try_iter() {
            now_msgs.extend(st.apply(ev));
        }
        for m in &now_msgs {
            send_json(&mut ws, m)?;
        }
        let now = Instant::now();
        if now >= next_flush {
            for m in st.flush() {
                send_json(&mut ws, &m)?;
            }
            next_flush = now + cfg.flush_interval;
        }
        if now >= next_streams {
            send_json(&mut ws, &streams_message(&hub))?;
            next_streams = now + cfg.streams_interval;
        }
    };
    hub.unsubscribe(sub.id);
    result
}
