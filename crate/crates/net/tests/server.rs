use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use syncrec_core::experiment::ExperimentLink;
use syncrec_core::hub::{run_recorder, Hub, HubConfig, HubEvent, Subscription, SOURCE_LOST_PREFIX};
use syncrec_core::model::{MarkerOrigin, MarkerSample, Sample, StreamInfo};
use syncrec_core::recorder::{read_recording_file, Record, RecordingWriter};
use syncrec_core::wire::{Message, SubscribeFilter};
use syncrec_net::{spawn_server, ProducerClient, RemoteLink, ServerConfig, ShiftedClock, SubscriberClient};

struct Rig {
    hub: Hub,
    start: Instant,
    server: syncrec_net::ServerHandle,
}

fn rig_with(cfg: ServerConfig) -> Rig {
    let start = Instant::now();
    let hub = Hub::new(Arc::new(ShiftedClock::new(start, 100.0)), HubConfig::default());
    let server = spawn_server(hub.clone(), "127.0.0.1:0", cfg).unwrap();
    Rig { hub, start, server }
}

fn rig() -> Rig {
    rig_with(ServerConfig::default())
}

impl Rig {
    fn producer(&self, source: &str, offset: f64) -> ProducerClient {
        let clock = Arc::new(ShiftedClock::new(self.start, 100.0 - offset));
        ProducerClient::connect(self.server.local_addr(), source, clock).unwrap()
    }
}

fn gsr(source: &str) -> StreamInfo {
    StreamInfo::numeric("gsr", source, 32.0, &["conductance"], "uS")
}

fn wait_until(mut f: impl FnMut() -> bool, what: &str) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !f() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        thread::sleep(Duration::from_millis(5));
    }
}

fn drain(sub: &Subscription) -> Vec<Record> {
    sub.rx
        .try_iter()
        .filter_map(|e| match e {
            HubEvent::Record(r) => Some(r),
            _ => None,
        })
        .collect()
}

#[test]
fn ten_concurrent_producers_get_distinct_ids() {
    let r = rig();
    let sub = r.hub.subscribe(SubscribeFilter::All);
    let addr = r.server.local_addr();
    let start = r.start;
    let handles: Vec<_> = (0..10)
        .map(|i| {
            thread::spawn(move || {
                let clock = Arc::new(ShiftedClock::new(start, 100.0));
                let p = ProducerClient::connect(addr, &format!("dev-{i}"), clock).unwrap();
                let id = p.declare(&gsr(&format!("dev-{i}"))).unwrap();
                (id, p)
            })
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let ids: BTreeSet<u32> = results.iter().map(|(id, _)| *id).collect();
    assert_eq!(ids, (1..=10).collect());
    let decls: Vec<u32> = drain(&sub)
        .into_iter()
        .filter_map(|r| match r {
            Record::Decl(d) => Some(d.stream_id),
            _ => None,
        })
        .collect();
    assert_eq!(decls.len(), 10);
    assert_eq!(decls.iter().copied().collect::<BTreeSet<_>>(), ids);
    for (_, p) in results {
        p.bye().unwrap();
    }
}

#[test]
fn duplicate_and_invalid_declarations_are_refused() {
    let r = rig();
    let p = r.producer("dev", 0.0);
    assert_eq!(p.declare(&gsr("dev")).unwrap(), 1);
    let e = p.declare(&gsr("dev")).unwrap_err().to_string();
    assert!(e.contains("duplicate-stream"), "{e}");
    let mut bad = gsr("dev");
    bad.name = "other".into();
    bad.channel_count = 3;
    assert!(p.declare(&bad).unwrap_err().to_string().contains("bad-decl"));
    p.bye().unwrap();
}

#[test]
fn soak_four_producers_lossless_and_ordered() {
    let r = rig();
    let sub = r.hub.subscribe(SubscribeFilter::All);
    let mut remote = SubscriberClient::connect(r.server.local_addr(), SubscribeFilter::All).unwrap();
    // let the subscription register before data flows
    wait_until(|| r.hub.list_streams().is_empty() && remote.next(Duration::from_millis(50)).unwrap().is_none(), "subscriber");
    let addr = r.server.local_addr();
    let start = r.start;
    let handles: Vec<_> = (0..4u64)
        .map(|i| {
            thread::spawn(move || {
                let clock = Arc::new(ShiftedClock::new(start, 100.0));
                let p = ProducerClient::connect(addr, &format!("soak-{i}"), clock).unwrap();
                let id = p.declare(&gsr(&format!("soak-{i}"))).unwrap();
                let mut k = 0u64;
                let mut chunk = 1 + i as usize;
                while k < 2500 {
                    let n = chunk.min((2500 - k) as usize);
                    let samples = (0..n).map(|j| Sample::new((k + j as u64) as f64, vec![(k + j as u64) as f32])).collect();
                    p.push(id, samples).unwrap();
                    k += n as u64;
                    chunk = chunk * 7 % 37 + 1;
                }
                p.bye().unwrap();
                id
            })
        })
        .collect();
    let ids: Vec<u32> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    wait_until(|| r.hub.pushed_counts().values().sum::<u64>() == 10_000, "pushes");

    let mut per_stream: BTreeMap<u32, Vec<f32>> = BTreeMap::new();
    for rec in drain(&sub) {
        if let Record::Chunk(c) = rec {
            per_stream.entry(c.stream_id).or_default().extend(c.samples.iter().map(|s| s.values[0]));
        }
    }
    let mut remote_counts: BTreeMap<u32, Vec<f32>> = BTreeMap::new();
    let deadline = Instant::now() + Duration::from_secs(10);
    while remote_counts.values().map(Vec::len).sum::<usize>() < 10_000 && Instant::now() < deadline {
        if let Some(Message::SampleChunk(c)) = remote.next(Duration::from_millis(100)).unwrap() {
            remote_counts.entry(c.stream_id).or_default().extend(c.samples.iter().map(|s| s.values[0]));
        }
    }
    let expected: Vec<f32> = (0..2500).map(|k| k as f32).collect();
    for id in ids {
        assert_eq!(per_stream[&id], expected);
        assert_eq!(remote_counts[&id], expected);
    }
}

#[test]
fn unknown_stream_is_an_error_but_session_survives() {
    let r = rig();
    let sub = r.hub.subscribe(SubscribeFilter::All);
    let p = r.producer("dev", 0.0);
    let id = p.declare(&gsr("dev")).unwrap();
    p.push(999, vec![Sample::new(1.0, vec![1.0])]).unwrap();
    p.push(id, vec![Sample::new(2.0, vec![2.0])]).unwrap();
    wait_until(|| r.hub.pushed_counts().get(&id) == Some(&1), "valid chunk");
    wait_until(|| p.errors() == vec!["unknown-stream".to_string()], "error frame");
    let chunks = drain(&sub).into_iter().filter(|r| matches!(r, Record::Chunk(_))).count();
    assert_eq!(chunks, 1);
    p.bye().unwrap();
}

#[test]
fn abrupt_close_reports_lost_source_and_bye_does_not() {
    let r = rig();
    let sub = r.hub.subscribe(SubscribeFilter::MarkerOnly);
    let a = r.producer("polite", 0.0);
    a.declare(&gsr("polite")).unwrap();
    a.bye().unwrap();
    let b = r.producer("flaky", 0.0);
    b.declare(&gsr("flaky")).unwrap();
    b.abort();
    wait_until(|| r.hub.list_streams().is_empty(), "sessions closed");
    wait_until(|| !sub.rx.is_empty(), "lost marker");
    let labels: Vec<String> = drain(&sub)
        .into_iter()
        .filter_map(|r| match r {
            Record::Marker(m) => Some(m.marker.label),
            _ => None,
        })
        .collect();
    assert_eq!(labels, vec![format!("{SOURCE_LOST_PREFIX}flaky")]);
}

#[test]
fn churn_never_lists_closed_sessions() {
    let r = rig();
    let stable = r.producer("stable", 0.0);
    let stable_id = stable.declare(&gsr("stable")).unwrap();
    for round in 0..20 {
        let p = r.producer(&format!("churn-{round}"), 0.0);
        let id = p.declare(&gsr(&format!("churn-{round}"))).unwrap();
        assert!(r.hub.list_streams().iter().any(|s| s.stream_id == id));
        if round % 2 == 0 {
            p.bye().unwrap();
        } else {
            p.abort();
        }
        wait_until(|| r.hub.list_streams().iter().all(|s| s.stream_id != id), "closed stream gone");
        assert!(r.hub.list_streams().iter().any(|s| s.stream_id == stable_id));
    }
    stable.bye().unwrap();
}

#[test]
fn pings_estimate_the_producer_offset() {
    let r = rig_with(ServerConfig { ping_interval: Duration::from_millis(50), ..Default::default() });
    let p = r.producer("dev", 0.05);
    p.declare(&gsr("dev")).unwrap();
    p.wait_for_pings(5, Duration::from_secs(5)).unwrap();
    let status = r.hub.list_streams();
    let off = status[0].last_offset.unwrap();
    assert!((off - 0.05).abs() < 0.002, "offset {off}");
    assert!(status[0].last_rtt.unwrap() < 0.05);
    p.bye().unwrap();
}

#[test]
fn markers_from_two_sessions_are_ordered_after_correction() {
    let r = rig();
    let sub = r.hub.subscribe(SubscribeFilter::All);
    let a = r.producer("a", -0.3);
    let b = r.producer("b", 0.2);
    a.wait_for_pings(1, Duration::from_secs(5)).unwrap();
    b.wait_for_pings(1, Duration::from_secs(5)).unwrap();
    a.marker(&MarkerSample::new(a.clock().now(), "first", MarkerOrigin::Investigator)).unwrap();
    thread::sleep(Duration::from_millis(1));
    b.marker(&MarkerSample::new(b.clock().now(), "second", MarkerOrigin::Investigator)).unwrap();
    wait_until(|| r.hub.pushed_counts().get(&0) == Some(&2), "markers");
    a.bye().unwrap();
    b.bye().unwrap();
    let mut w = RecordingWriter::new(Vec::new()).unwrap();
    for rec in drain(&sub) {
        w.write(&rec).unwrap();
    }
    let (bytes, _) = w.finish().unwrap();
    let rec = syncrec_core::recorder::read_recording(&bytes).unwrap();
    // raw order is inverted by the offsets; corrected order is not
    let raw: Vec<&str> = {
        let mut m: Vec<_> = rec.markers().collect();
        m.sort_by(|x, y| x.marker.raw_timestamp.total_cmp(&y.marker.raw_timestamp));
        m.iter().map(|m| m.marker.label.as_str()).collect()
    };
    assert_eq!(raw, vec!["second", "first"]);
    let c = syncrec_core::epoch::correct_recording(&rec).unwrap();
    let labels: Vec<&str> = c.markers.iter().map(|m| m.label.as_str()).collect();
    assert_eq!(labels, vec!["first", "second"]);
}

#[test]
fn end_to_end_recording_is_lossless() {
    let r = rig_with(ServerConfig { ping_interval: Duration::from_millis(100), ..Default::default() });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.srec");
    let writer = RecordingWriter::create(&path).unwrap();
    let sub = r.hub.subscribe(SubscribeFilter::All);
    let recorder = thread::spawn(move || run_recorder(sub, writer));
    let p = r.producer("dev", 0.01);
    let id = p.declare(&gsr("dev")).unwrap();
    for k in 0..50 {
        let t = p.clock().now();
        p.push(id, (0..20).map(|j| Sample::new(t + j as f64 * 1e-3, vec![(k * 20 + j) as f32])).collect()).unwrap();
    }
    p.marker(&MarkerSample::new(p.clock().now(), "Experiment end", MarkerOrigin::Auto)).unwrap();
    p.bye().unwrap();
    wait_until(|| r.hub.pushed_counts().get(&0) == Some(&1), "marker");
    r.hub.shutdown();
    let (_, footer) = recorder.join().unwrap().unwrap();
    let rec = read_recording_file(&path).unwrap();
    assert_eq!(footer.counts[&id], 1000);
    assert_eq!(rec.scanned_counts(), r.hub.pushed_counts());
    let values: Vec<f32> = rec.samples(id).iter().map(|s| s.values[0]).collect();
    assert_eq!(values, (0..1000).map(|v| v as f32).collect::<Vec<_>>());
}

#[test]
fn remote_link_unreachable_hub_fails_up_front() {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    assert!(RemoteLink::connect(addr, BTreeMap::new()).is_err());
}

#[test]
fn remote_link_streams_and_marks() {
    let r = rig();
    let sub = r.hub.subscribe(SubscribeFilter::All);
    let mut offsets = BTreeMap::new();
    offsets.insert("dev".to_string(), 0.1);
    let mut link = RemoteLink::connect(r.server.local_addr(), offsets).unwrap();
    let h = link.open_source("dev", &[gsr("dev")]).unwrap();
    link.advance(0.05).unwrap();
    let t = link.producer_time(&h, 0.05);
    link.push(&h, 0, vec![Sample::new(t, vec![1.0])]).unwrap();
    link.marker(&h, "Experiment start", MarkerOrigin::Auto, t).unwrap();
    link.set_metadata("subject_id", serde_json::json!("S1")).unwrap();
    assert!(link.finish().unwrap().is_none());
    assert_eq!(link.metadata()["subject_id"], "S1");
    wait_until(|| r.hub.list_streams().is_empty(), "bye");
    let recs = drain(&sub);
    assert!(recs.iter().any(|r| matches!(r, Record::Marker(m) if m.marker.label == "Experiment start")));
    assert!(recs.iter().any(|r| matches!(r, Record::Offset(o) if (o.offset - 100.1).abs() < 0.01)));
}
