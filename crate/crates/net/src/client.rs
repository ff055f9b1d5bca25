//! Producer and subscriber ends of the wire protocol.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use syncrec_core::clock::Clock;
use syncrec_core::model::{MarkerSample, Sample, StreamInfo};
use syncrec_core::wire::{
    decl_message, FrameDecoder, Hello, Message, SampleChunk, SessionRole, SubscribeFilter, WireError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("hub refused: {0}")]
    Refused(String),
    #[error("hub did not answer within {0:?}")]
    Timeout(Duration),
    #[error("connection closed")]
    Closed,
}

/// Wall clock shifted by a fixed amount; stands in for a device clock.
#[derive(Debug, Clone)]
pub struct ShiftedClock {
    start: Instant,
    shift: f64,
}

impl ShiftedClock {
    /// Reads `shift` at `start`.
    pub fn new(start: Instant, shift: f64) -> Self {
        ShiftedClock { start, shift }
    }

    pub fn at(&self, instant: Instant) -> f64 {
        instant.saturating_duration_since(self.start).as_secs_f64() + self.shift
    }
}

impl Clock for ShiftedClock {
    fn now(&self) -> f64 {
        self.at(Instant::now())
    }
}

const REPLY_TIMEOUT: Duration = Duration::from_secs(5);

type Writer = Arc<Mutex<TcpStream>>;

fn send(w: &Writer, msg: &Message) -> Result<(), ClientError> {
    let frame = msg.to_frame()?;
    w.lock().unwrap_or_else(|p| p.into_inner()).write_all(&frame)?;
    Ok(())
}

enum Reply {
    Ack(u32),
    Err(String),
}

/// A producer session. A background thread answers the hub's pings with
/// readings of the producer clock.
pub struct ProducerClient {
    writer: Writer,
    replies: Receiver<Reply>,
    pending: Arc<AtomicBool>,
    errors: Arc<Mutex<Vec<String>>>,
    pings: Arc<Mutex<u64>>,
    reader: Option<JoinHandle<()>>,
    clock: Arc<dyn Clock>,
}

impl ProducerClient {
    pub fn connect(addr: impl ToSocketAddrs, source_id: &str, clock: Arc<dyn Clock>) -> Result<Self, ClientError> {
        Self::connect_as(addr, source_id, SessionRole::Producer, clock)
    }

    pub fn connect_as(
        addr: impl ToSocketAddrs,
        source_id: &str,
        role: SessionRole,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut reader = stream.try_clone()?;
        let writer: Writer = Arc::new(Mutex::new(stream));
        let (tx, rx) = mpsc::channel();
        let pending = Arc::new(AtomicBool::new(false));
        let errors: Arc<Mutex<Vec<String>>> = Arc::default();
        let pings: Arc<Mutex<u64>> = Arc::default();
        let handle = {
            let (w, pending, errors, pings, clock) =
                (writer.clone(), pending.clone(), errors.clone(), pings.clone(), clock.clone());
            thread::spawn(move || read_loop(&mut reader, w, tx, pending, errors, pings, clock))
        };
        let client = ProducerClient { writer, replies: rx, pending, errors, pings, reader: Some(handle), clock };
        send(&client.writer, &Message::Hello(Hello { source_id: source_id.to_string(), role }))?;
        Ok(client)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Declares a stream and waits for the assigned id.
    pub fn declare(&self, info: &StreamInfo) -> Result<u32, ClientError> {
        self.pending.store(true, Ordering::SeqCst);
        let sent = send(&self.writer, &decl_message(info));
        let reply = sent.and_then(|_| match self.replies.recv_timeout(REPLY_TIMEOUT) {
            Ok(Reply::Ack(id)) => Ok(id),
            Ok(Reply::Err(code)) => Err(ClientError::Refused(code)),
            Err(RecvTimeoutError::Timeout) => Err(ClientError::Timeout(REPLY_TIMEOUT)),
            Err(RecvTimeoutError::Disconnected) => Err(ClientError::Closed),
        });
        self.pending.store(false, Ordering::SeqCst);
        reply
    }

    pub fn push(&self, stream_id: u32, samples: Vec<Sample>) -> Result<(), ClientError> {
        send(&self.writer, &Message::SampleChunk(SampleChunk { stream_id, samples }))
    }

    pub fn marker(&self, marker: &MarkerSample) -> Result<(), ClientError> {
        send(&self.writer, &Message::Marker { marker: marker.clone(), source_ref: None })
    }

    /// ERR codes received outside a declaration.
    pub fn errors(&self) -> Vec<String> {
        self.errors.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn pings_answered(&self) -> u64 {
        *self.pings.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Blocks until at least `n` pings were answered.
    pub fn wait_for_pings(&self, n: u64, timeout: Duration) -> Result<(), ClientError> {
        let deadline = Instant::now() + timeout;
        while self.pings_answered() < n {
            if Instant::now() > deadline {
                return Err(ClientError::Timeout(timeout));
            }
            thread::sleep(Duration::from_millis(2));
        }
        Ok(())
    }

    /// Graceful close.
    pub fn bye(mut self) -> Result<(), ClientError> {
        let r = send(&self.writer, &Message::Bye);
        self.close();
        r
    }

    /// Drops the connection without BYE.
    pub fn abort(mut self) {
        self.close();
    }

    fn close(&mut self) {
        let _ = self.writer.lock().unwrap_or_else(|p| p.into_inner()).shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ProducerClient {
    fn drop(&mut self) {
        self.close();
    }
}

fn read_loop(
    reader: &mut TcpStream,
    w: Writer,
    tx: Sender<Reply>,
    pending: Arc<AtomicBool>,
    errors: Arc<Mutex<Vec<String>>>,
    pings: Arc<Mutex<u64>>,
    clock: Arc<dyn Clock>,
) {
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 16 * 1024];
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) | Err(_) => return,
            Ok(n) => n,
        };
        decoder.push(&buf[..n]);
        while let Ok(Some((ty, payload))) = decoder.next_frame() {
            let Ok(msg) = Message::decode(ty, &payload) else { continue };
            match msg {
                Message::Ping { t0 } => {
                    let t1 = clock.now();
                    let t2 = clock.now();
                    if send(&w, &Message::Pong { t0, t1, t2 }).is_err() {
                        return;
                    }
                    *pings.lock().unwrap_or_else(|p| p.into_inner()) += 1;
                }
                Message::Ack { stream_id } => {
                    let _ = tx.send(Reply::Ack(stream_id));
                }
                Message::Err { code } => {
                    if pending.load(Ordering::SeqCst) {
                        let _ = tx.send(Reply::Err(code));
                    } else {
                        errors.lock().unwrap_or_else(|p| p.into_inner()).push(code);
                    }
                }
                _ => {}
            }
        }
    }
}

/// Receives the hub's broadcast traffic.
pub struct SubscriberClient {
    stream: TcpStream,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl SubscriberClient {
    pub fn connect(addr: impl ToSocketAddrs, filter: SubscribeFilter) -> Result<Self, ClientError> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let hello = Message::Hello(Hello { source_id: "subscriber".into(), role: SessionRole::Subscriber });
        stream.write_all(&hello.to_frame()?)?;
        stream.write_all(&Message::Subscribe(filter).to_frame()?)?;
        Ok(SubscriberClient { stream, decoder: FrameDecoder::new(), buf: vec![0u8; 64 * 1024] })
    }

    /// Next message, or `None` when nothing arrived within `timeout`.
    pub fn next(&mut self, timeout: Duration) -> Result<Option<Message>, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some((ty, payload)) = self.decoder.next_frame()? {
                return Ok(Some(Message::decode(ty, &payload)?));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            self.stream.set_read_timeout(Some(left))?;
            match self.stream.read(&mut self.buf) {
                Ok(0) => return Err(ClientError::Closed),
                Ok(n) => self.decoder.push(&self.buf[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => return Ok(None),
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn bye(mut self) -> Result<(), ClientError> {
        self.stream.write_all(&Message::Bye.to_frame()?)?;
        Ok(())
    }
}
