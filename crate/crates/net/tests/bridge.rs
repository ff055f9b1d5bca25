use std::collections::BTreeMap;
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use syncrec_core::clock::MonotonicClock;
use syncrec_core::hub::{Hub, HubConfig, HubEvent};
use syncrec_core::model::{MarkerOrigin, Sample, StreamInfo};
use syncrec_core::recorder::Record;
use syncrec_core::wire::SubscribeFilter;
use syncrec_net::{spawn_bridge, BridgeConfig};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Ws = WebSocket<MaybeTlsStream<TcpStream>>;

fn connect(addr: std::net::SocketAddr) -> Ws {
    let (ws, _) = tungstenite::connect(format!("ws://{addr}")).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_millis(50))).unwrap();
    }
    ws
}

fn read_for(ws: &mut Ws, dur: Duration, mut stop: impl FnMut(&Value) -> bool) -> Vec<Value> {
    let deadline = Instant::now() + dur;
    let mut out = Vec::new();
    while Instant::now() < deadline {
        match ws.read() {
            Ok(Message::Text(t)) => {
                let v: Value = serde_json::from_str(t.as_str()).unwrap();
                let done = stop(&v);
                out.push(v);
                if done {
                    break;
                }
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => panic!("{e}"),
        }
    }
    out
}

fn hub() -> Hub {
    Hub::new(Arc::new(MonotonicClock::new()), HubConfig::default())
}

#[test]
fn injected_marker_echoes_as_investigator_and_is_recorded() {
    let hub = hub();
    let rec = hub.subscribe(SubscribeFilter::All);
    let bridge = spawn_bridge(hub.clone(), "127.0.0.1:0", BridgeConfig::default()).unwrap();
    let mut ws = connect(bridge.local_addr());
    let first = read_for(&mut ws, Duration::from_secs(2), |v| v["type"] == "streams");
    assert_eq!(first.last().unwrap()["payload"], json!([]));
    ws.send(Message::Text(json!({"type": "inject", "label": "subject looked away"}).to_string().into())).unwrap();
    let got = read_for(&mut ws, Duration::from_secs(2), |v| v["type"] == "marker");
    let m = got.last().unwrap();
    assert_eq!(m["label"], "subject looked away");
    assert_eq!(m["origin"], "investigator");
    let recorded: Vec<_> = rec
        .rx
        .try_iter()
        .filter_map(|e| match e {
            HubEvent::Record(Record::Marker(m)) => Some(m),
            _ => None,
        })
        .collect();
    assert_eq!(recorded.len(), 1);
    assert_eq!(recorded[0].marker.origin, MarkerOrigin::Investigator);
}

#[test]
fn empty_inject_and_foreign_messages_are_rejected() {
    let hub = hub();
    let bridge = spawn_bridge(hub.clone(), "127.0.0.1:0", BridgeConfig::default()).unwrap();
    let mut ws = connect(bridge.local_addr());
    ws.send(Message::Text(json!({"type": "inject", "label": ""}).to_string().into())).unwrap();
    let got = read_for(&mut ws, Duration::from_secs(2), |v| v["type"] == "error");
    assert_eq!(got.last().unwrap()["message"], "empty-marker");
    ws.send(Message::Text(json!({"type": "zone", "value": "Stop"}).to_string().into())).unwrap();
    let got = read_for(&mut ws, Duration::from_secs(2), |v| v["type"] == "error");
    assert_eq!(got.last().unwrap()["type"], "error");
    assert!(hub.pushed_counts().is_empty());
}

#[test]
fn rapid_injections_keep_order() {
    let hub = hub();
    let rec = hub.subscribe(SubscribeFilter::MarkerOnly);
    let bridge = spawn_bridge(hub.clone(), "127.0.0.1:0", BridgeConfig::default()).unwrap();
    let mut ws = connect(bridge.local_addr());
    for i in 0..10 {
        ws.send(Message::Text(json!({"type": "inject", "label": format!("note {i}")}).to_string().into())).unwrap();
    }
    let mut seen = 0;
    read_for(&mut ws, Duration::from_secs(3), |v| {
        if v["type"] == "marker" {
            seen += 1;
        }
        seen == 10
    });
    let labels: Vec<String> = rec
        .rx
        .try_iter()
        .filter_map(|e| match e {
            HubEvent::Record(Record::Marker(m)) => Some(m.marker.label),
            _ => None,
        })
        .collect();
    assert_eq!(labels, (0..10).map(|i| format!("note {i}")).collect::<Vec<_>>());
}

#[test]
fn four_streams_are_decimated_to_thirty_points_per_second() {
    let hub = hub();
    let bridge = spawn_bridge(hub.clone(), "127.0.0.1:0", BridgeConfig::default()).unwrap();
    let mut ws = connect(bridge.local_addr());
    read_for(&mut ws, Duration::from_secs(2), |v| v["type"] == "streams");
    // 32 + 64 + 148 + 256 = 500 samples/s combined
    let rates = [32.0, 64.0, 148.0, 256.0];
    let session = hub.open_session("fixture");
    let ids: Vec<u32> = rates
        .iter()
        .enumerate()
        .map(|(i, r)| hub.register_stream(session, StreamInfo::numeric(&format!("s{i}"), "fixture", *r, &["a", "b"], "au")).unwrap())
        .collect();
    let seconds = 4.0;
    let tick = 0.05;
    let start = Instant::now();
    let mut next = vec![0u64; 4];
    let mut t = 0.0;
    while t < seconds {
        t += tick;
        for (i, r) in rates.iter().enumerate() {
            let mut chunk = Vec::new();
            while (next[i] as f64) / r < t {
                let st = next[i] as f64 / r;
                chunk.push(Sample::new(st, vec![(st * 3.0).sin() as f32, st as f32]));
                next[i] += 1;
            }
            hub.route_chunk(session, ids[i], chunk).unwrap();
        }
        let due = start + Duration::from_secs_f64(t);
        if let Some(d) = due.checked_duration_since(Instant::now()) {
            thread::sleep(d);
        }
    }
    hub.inject_marker(syncrec_core::hub::MarkerSource::Hub, "done", MarkerOrigin::Investigator, None).unwrap();
    let msgs = read_for(&mut ws, Duration::from_secs(3), |v| v["type"] == "marker");
    thread::sleep(Duration::from_millis(200));
    let mut msgs = msgs;
    msgs.extend(read_for(&mut ws, Duration::from_millis(300), |_| false));
    let mut points: BTreeMap<u64, usize> = BTreeMap::new();
    for m in msgs.iter().filter(|m| m["type"] == "samples") {
        let n = m["t"].as_array().unwrap().len();
        assert_eq!(m["v"].as_array().unwrap().len(), n);
        assert_eq!(m["v"][0].as_array().unwrap().len(), 2);
        *points.entry(m["id"].as_u64().unwrap()).or_default() += n;
    }
    assert_eq!(points.len(), 4, "{points:?}");
    for (id, n) in &points {
        let rate = *n as f64 / seconds;
        assert!(rate <= 30.0 + 0.5, "stream {id}: {rate} points/s");
    }
    // the slow stream is not thinned below its own rate by much
    assert!(points[&(ids[3] as u64)] as f64 / seconds > 25.0);
}

#[test]
fn zone_changes_are_forwarded() {
    let hub = hub();
    let bridge = spawn_bridge(hub.clone(), "127.0.0.1:0", BridgeConfig::default()).unwrap();
    let mut ws = connect(bridge.local_addr());
    read_for(&mut ws, Duration::from_secs(2), |v| v["type"] == "streams");
    let s = hub.open_session("twin");
    let id = hub
        .register_stream(s, StreamInfo::numeric("separation", "twin", 50.0, &["zone", "distance", "directed_speed"], "m"))
        .unwrap();
    let rows = [0.0, 0.0, 1.0, 2.0, 2.0, 0.0];
    let samples = rows.iter().enumerate().map(|(i, z)| Sample::new(i as f64 * 0.02, vec![*z, 1.0, 0.0])).collect();
    hub.route_chunk(s, id, samples).unwrap();
    let mut zones = Vec::new();
    read_for(&mut ws, Duration::from_secs(2), |v| {
        if v["type"] == "zone" {
            zones.push(v["value"].as_str().unwrap().to_string());
        }
        zones.len() == 4
    });
    assert_eq!(zones, vec!["Normal", "Reduced", "Stop", "Normal"]);
}
