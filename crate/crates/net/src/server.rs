//! Thread-per-connection TCP front end for a [`Hub`].

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use syncrec_core::clock::PING_INTERVAL_S;
use syncrec_core::hub::{Hub, HubEvent, MarkerSource, SessionId, Subscription};
use syncrec_core::recorder::Record;
use syncrec_core::wire::{DeclPayload, FrameDecoder, Message, SampleChunk, SessionRole};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub ping_interval: Duration,
    /// How often blocked reads wake up to check for pings and shutdown.
    pub poll: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { ping_interval: Duration::from_secs_f64(PING_INTERVAL_S), poll: Duration::from_millis(20) }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    conns: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, closes every connection and waits for the threads.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let conns: Vec<_> = std::mem::take(&mut *self.conns.lock().unwrap_or_else(|p| p.into_inner()));
        for h in conns {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

pub fn spawn_server(hub: Hub, addr: impl ToSocketAddrs, cfg: ServerConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
    let accept = {
        let (stop, conns) = (stop.clone(), conns.clone());
        thread::Builder::new().name("hub-accept".into()).spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        log::debug!("connection from {peer}");
                        let (hub, stop, cfg) = (hub.clone(), stop.clone(), cfg.clone());
                        let h = thread::spawn(move || {
                            if let Err(e) = serve_connection(hub, stream, stop, cfg) {
                                log::debug!("connection {peer} ended: {e}");
                            }
                        });
                        let mut c = conns.lock().unwrap_or_else(|p| p.into_inner());
                        c.retain(|h| !h.is_finished());
                        c.push(h);
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        })?
    };
    Ok(ServerHandle { addr: local, stop, accept: Some(accept), conns })
}

type Writer = Arc<Mutex<TcpStream>>;

fn send(w: &Writer, msg: &Message) -> io::Result<()> {
    let frame = msg.to_frame().map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    w.lock().unwrap_or_else(|p| p.into_inner()).write_all(&frame)
}

fn send_err(w: &Writer, code: &str) -> io::Result<()> {
    send(w, &Message::Err { code: code.to_string() })
}

/// Wire form of a hub event, when it has one. Offsets and metadata stay
/// inside the hub process.
fn event_message(ev: HubEvent) -> Option<Message> {
    match ev {
        HubEvent::Record(Record::Decl(d)) => Some(Message::StreamDecl(DeclPayload {
            stream_id: Some(d.stream_id),
            source_ref: Some(d.source_ref),
            info: d.info,
        })),
        HubEvent::Record(Record::Chunk(c)) => {
            Some(Message::SampleChunk(SampleChunk { stream_id: c.stream_id, samples: c.samples }))
        }
        HubEvent::Record(Record::Marker(m)) => Some(Message::Marker { marker: m.marker, source_ref: Some(m.source_ref) }),
        HubEvent::Record(Record::Offset(_)) | HubEvent::Metadata { .. } => None,
    }
}

fn forward(sub: Subscription, w: Writer, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match sub.rx.recv_timeout(Duration::from_millis(50)) {
            Ok(ev) => {
                if let Some(msg) = event_message(ev) {
                    if send(&w, &msg).is_err() {
                        return;
                    }
                }
            }
            Err(crossbeam_timeout) if crossbeam_timeout.is_timeout() => {}
            Err(_) => return,
        }
    }
}

struct Conn {
    hub: Hub,
    session: SessionId,
    writer: Writer,
    next_ping: Option<Instant>,
    subs: Vec<(u64, JoinHandle<()>)>,
    sub_stop: Arc<AtomicBool>,
}

impl Conn {
    fn ping(&mut self, interval: Duration) -> io::Result<()> {
        send(&self.writer, &Message::Ping { t0: self.hub.now() })?;
        self.next_ping = Some(Instant::now() + interval);
        Ok(())
    }

    /// Returns false once the session ended gracefully.
    fn handle(&mut self, msg: Message, cfg: &ServerConfig) -> io::Result<bool> {
        match msg {
            Message::Hello(h) => {
                let role = h.role;
                if let Err(e) = self.hub.hello(self.session, h) {
                    send_err(&self.writer, e.code())?;
                } else if role != SessionRole::Subscriber {
                    self.ping(cfg.ping_interval)?;
                }
            }
            Message::StreamDecl(d) => match self.hub.register_stream(self.session, d.info) {
                Ok(id) => send(&self.writer, &Message::Ack { stream_id: id })?,
                Err(e) => send_err(&self.writer, e.code())?,
            },
            Message::SampleChunk(c) => {
                if let Err(e) = self.hub.route_chunk(self.session, c.stream_id, c.samples) {
                    send_err(&self.writer, e.code())?;
                }
            }
            Message::Marker { marker, .. } => {
                let r = self.hub.inject_marker(
                    MarkerSource::Session(self.session),
                    &marker.label,
                    marker.origin,
                    Some(marker.raw_timestamp),
                );
                if let Err(e) = r {
                    send_err(&self.writer, e.code())?;
                }
            }
            Message::Pong { t0, t1, t2 } => {
                let t3 = self.hub.now();
                if let Err(e) = self.hub.record_probe(self.session, t0, t1, t2, t3) {
                    send_err(&self.writer, e.code())?;
                }
            }
            Message::Ping { t0 } => {
                let now = self.hub.now();
                send(&self.writer, &Message::Pong { t0, t1: now, t2: self.hub.now() })?;
            }
            Message::Subscribe(filter) => {
                let sub = self.hub.subscribe(filter);
                let id = sub.id;
                let (w, stop) = (self.writer.clone(), self.sub_stop.clone());
                self.subs.push((id, thread::spawn(move || forward(sub, w, stop))));
            }
            Message::Bye => {
                self.hub.close_session(self.session, true);
                return Ok(false);
            }
            Message::Ack { .. } | Message::Err { .. } => {}
        }
        Ok(true)
    }

    fn finish(&mut self, graceful: bool) {
        self.hub.close_session(self.session, graceful);
        for (id, _) in &self.subs {
            self.hub.unsubscribe(*id);
        }
        self.sub_stop.store(true, Ordering::SeqCst);
        for (_, h) in self.subs.drain(..) {
            let _ = h.join();
        }
    }
}

fn serve_connection(hub: Hub, stream: TcpStream, stop: Arc<AtomicBool>, cfg: ServerConfig) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(cfg.poll))?;
    let mut reader = stream.try_clone()?;
    let session = hub.connect();
    let mut conn = Conn {
        hub,
        session,
        writer: Arc::new(Mutex::new(stream)),
        next_ping: None,
        subs: Vec::new(),
        sub_stop: Arc::new(AtomicBool::new(false)),
    };
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 64 * 1024];
    let result = loop {
        if stop.load(Ordering::SeqCst) {
            break Ok(true);
        }
        if conn.next_ping.is_some_and(|t| Instant::now() >= t) {
            if let Err(e) = conn.ping(cfg.ping_interval) {
                break Err(e);
            }
        }
        match reader.read(&mut buf) {
            Ok(0) => break Ok(false),
            Ok(n) => decoder.push(&buf[..n]),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => break Err(e),
        }
        let mut ended = None;
        loop {
            match decoder.next_frame() {
                Ok(Some((ty, payload))) => match Message::decode(ty, &payload) {
                    Ok(msg) => match conn.handle(msg, &cfg) {
                        Ok(true) => {}
                        Ok(false) => {
                            ended = Some(Ok(true));
                            break;
                        }
                        Err(e) => {
                            ended = Some(Err(e));
                            break;
                        }
                    },
                    Err(e) => {
                        let _ = send_err(&conn.writer, e.code());
                    }
                },
                Ok(None) => break,
                Err(e) => {
                    let _ = send_err(&conn.writer, e.code());
                }
            }
        }
        if let Some(r) = ended {
            break r;
        }
    };
    let graceful = matches!(result, Ok(true));
    conn.finish(graceful);
    let _ = conn.writer.lock().unwrap_or_else(|p| p.into_inner()).shutdown(Shutdown::Both);
    result.map(|_| ())
}
