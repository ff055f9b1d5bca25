//! Length-prefixed framing for producer, subscriber and monitor sessions.
//!
//! Every frame is `[u32 length LE][u8 msg_type][payload]` where `length`
//! counts the type byte plus the payload. Sample chunks are binary; stream
//! declarations and producer identities are UTF-8 JSON.

use crate::model::{MarkerOrigin, MarkerSample, Sample, StreamInfo};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default TCP port of the hub.
pub const DEFAULT_HUB_PORT: u16 = 16571;

const HEADER_LEN: usize = 4;
/// Largest payload whose frame length still fits the u32 prefix.
pub const MAX_PAYLOAD: usize = u32::MAX as usize - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    StreamDecl = 0x02,
    SampleChunk = 0x03,
    Marker = 0x04,
    Ping = 0x05,
    Pong = 0x06,
    Subscribe = 0x07,
    Bye = 0x08,
    Ack = 0x09,
    Err = 0x0A,
}

impl MsgType {
    pub fn from_u8(b: u8) -> Option<Self> {
        use MsgType::*;
        Some(match b {
            0x01 => Hello,
            0x02 => StreamDecl,
            0x03 => SampleChunk,
            0x04 => Marker,
            0x05 => Ping,
            0x06 => Pong,
            0x07 => Subscribe,
            0x08 => Bye,
            0x09 => Ack,
            0x0A => Err,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("payload of {0} bytes does not fit a frame")]
    Oversize(usize),
    #[error("bad-type: unknown message type {0:#04x}")]
    BadType(u8),
    #[error("frame length 0")]
    ZeroLength,
    #[error("ragged sample: expected {expected} values, got {got}")]
    Ragged { expected: usize, got: usize },
    #[error("timestamps decrease within chunk at sample {0}")]
    NonMonotonic(usize),
    #[error("malformed {what} payload: {detail}")]
    Malformed { what: &'static str, detail: String },
}

impl WireError {
    /// Short code carried in ERR frames.
    pub fn code(&self) -> &'static str {
        match self {
            WireError::BadType(_) => "bad-type",
            WireError::Oversize(_) => "oversize",
            WireError::ZeroLength => "zero-length",
            WireError::Ragged { .. } | WireError::NonMonotonic(_) => "bad-chunk",
            WireError::Malformed { .. } => "malformed",
        }
    }
}

fn malformed(what: &'static str, detail: impl Into<String>) -> WireError {
    WireError::Malformed { what, detail: detail.into() }
}

pub fn encode_frame(msg_type: MsgType, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(WireError::Oversize(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 1 + payload.len());
    out.extend_from_slice(&((payload.len() + 1) as u32).to_le_bytes());
    out.push(msg_type as u8);
    out.extend_from_slice(payload);
    Ok(out)
}

#[derive(Debug, PartialEq)]
pub enum Decoded<'a> {
    /// A whole frame and the number of bytes it occupied.
    Frame { msg_type: MsgType, payload: &'a [u8], consumed: usize },
    Incomplete,
}

/// Decodes the first frame in `buf` without reading past it.
///
/// An unknown type byte is reported only once the whole frame is present, so
/// the caller can skip it and stay in sync.
pub fn decode_frame(buf: &[u8]) -> Result<Decoded<'_>, WireError> {
    if buf.len() < HEADER_LEN {
        return Ok(Decoded::Incomplete);
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
    if len == 0 {
        return Err(WireError::ZeroLength);
    }
    if buf.len() < HEADER_LEN + len {
        return Ok(Decoded::Incomplete);
    }
    let type_byte = buf[HEADER_LEN];
    let msg_type = MsgType::from_u8(type_byte).ok_or(WireError::BadType(type_byte))?;
    Ok(Decoded::Frame {
        msg_type,
        payload: &buf[HEADER_LEN + 1..HEADER_LEN + len],
        consumed: HEADER_LEN + len,
    })
}

/// Incremental decoder for one connection's byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Pops the next complete frame. A frame with an unknown type is dropped
    /// from the buffer and reported; a zero length poisons the stream.
    pub fn next_frame(&mut self) -> Result<Option<(MsgType, Vec<u8>)>, WireError> {
        match decode_frame(&self.buf) {
            Ok(Decoded::Incomplete) => Ok(None),
            Ok(Decoded::Frame { msg_type, payload, consumed }) => {
                let payload = payload.to_vec();
                self.buf.drain(..consumed);
                Ok(Some((msg_type, payload)))
            }
            Err(WireError::BadType(b)) => {
                let len = u32::from_le_bytes(self.buf[..4].try_into().unwrap()) as usize;
                self.buf.drain(..HEADER_LEN + len);
                Err(WireError::BadType(b))
            }
            Err(e) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(malformed(self.what, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn finish(&self) -> Result<(), WireError> {
        if self.remaining() != 0 {
            return Err(malformed(self.what, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Binary sample batch: `[u32 stream_id][u32 count]` then per sample
/// `[f64 raw_timestamp][channel_count x f32]`.
pub fn encode_sample_chunk(stream_id: u32, samples: &[Sample], channel_count: usize) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(8 + samples.len() * (8 + 4 * channel_count));
    out.extend_from_slice(&stream_id.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    let mut prev = f64::NEG_INFINITY;
    for (i, s) in samples.iter().enumerate() {
        if s.values.len() != channel_count {
            return Err(WireError::Ragged { expected: channel_count, got: s.values.len() });
        }
        if s.raw_timestamp < prev {
            return Err(WireError::NonMonotonic(i));
        }
        prev = s.raw_timestamp;
        out.extend_from_slice(&s.raw_timestamp.to_le_bytes());
        for v in &s.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleChunk {
    pub stream_id: u32,
    pub samples: Vec<Sample>,
}

pub fn decode_sample_chunk(payload: &[u8], channel_count: usize) -> Result<SampleChunk, WireError> {
    let mut r = Reader::new(payload, "sample-chunk");
    let stream_id = r.u32()?;
    let count = r.u32()? as usize;
    let per_sample = 8 + 4 * channel_count;
    if r.remaining() != count * per_sample {
        return Err(malformed(
            "sample-chunk",
            format!("{} bytes for {count} samples of {channel_count} channels", r.remaining()),
        ));
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let t = r.f64()?;
        let values = (0..channel_count).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        samples.push(Sample::new(t, values));
    }
    Ok(SampleChunk { stream_id, samples })
}

/// Reads only the stream id of a chunk payload.
pub fn peek_chunk_stream(payload: &[u8]) -> Result<u32, WireError> {
    Reader::new(payload, "sample-chunk").u32()
}

/// Decodes a chunk whose channel count is inferred from its size.
pub fn decode_sample_chunk_inferred(payload: &[u8]) -> Result<SampleChunk, WireError> {
    let mut r = Reader::new(payload, "sample-chunk");
    let stream_id = r.u32()?;
    let count = r.u32()? as usize;
    if count == 0 {
        r.finish()?;
        return Ok(SampleChunk { stream_id, samples: Vec::new() });
    }
    let rem = r.remaining();
    if rem % count != 0 || rem / count < 8 || (rem / count - 8) % 4 != 0 {
        return Err(malformed("sample-chunk", format!("{rem} bytes do not divide into {count} samples")));
    }
    decode_sample_chunk(payload, (rem / count - 8) / 4)
}

pub fn encode_marker(m: &MarkerSample, source_ref: Option<u32>) -> Result<Vec<u8>, WireError> {
    let label = m.label.as_bytes();
    if label.len() > u16::MAX as usize {
        return Err(WireError::Oversize(label.len()));
    }
    let mut out = Vec::with_capacity(15 + label.len());
    out.extend_from_slice(&m.raw_timestamp.to_le_bytes());
    out.push(m.origin.code());
    out.extend_from_slice(&(label.len() as u16).to_le_bytes());
    out.extend_from_slice(label);
    if let Some(r) = source_ref {
        out.extend_from_slice(&r.to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`encode_marker`]; the trailing source reference is optional.
pub fn decode_marker(payload: &[u8]) -> Result<(MarkerSample, Option<u32>), WireError> {
    let mut r = Reader::new(payload, "marker");
    let t = r.f64()?;
    let code = r.u8()?;
    let origin = MarkerOrigin::from_code(code).ok_or_else(|| malformed("marker", format!("origin {code}")))?;
    let len = r.u16()? as usize;
    let label = std::str::from_utf8(r.take(len)?)
        .map_err(|e| malformed("marker", e.to_string()))?
        .to_string();
    let source_ref = match r.remaining() {
        0 => None,
        4 => Some(r.u32()?),
        n => return Err(malformed("marker", format!("{n} trailing bytes"))),
    };
    Ok((MarkerSample { raw_timestamp: t, label, origin }, source_ref))
}

/// Producer identity sent in HELLO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub source_id: String,
    #[serde(default)]
    pub role: SessionRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionRole {
    #[default]
    Producer,
    Monitor,
    Subscriber,
}

/// STREAM_DECL body. Producers send a bare [`StreamInfo`]; the hub forwards
/// declarations to subscribers with the assigned ids filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_ref: Option<u32>,
    #[serde(flatten)]
    pub info: StreamInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubscribeFilter {
    All,
    MarkerOnly,
}

/// A decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    StreamDecl(DeclPayload),
    SampleChunk(SampleChunk),
    Marker { marker: MarkerSample, source_ref: Option<u32> },
    Ping { t0: f64 },
    Pong { t0: f64, t1: f64, t2: f64 },
    Subscribe(SubscribeFilter),
    Bye,
    Ack { stream_id: u32 },
    Err { code: String },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Hello(_) => MsgType::Hello,
            Message::StreamDecl(_) => MsgType::StreamDecl,
            Message::SampleChunk(_) => MsgType::SampleChunk,
            Message::Marker { .. } => MsgType::Marker,
            Message::Ping { .. } => MsgType::Ping,
            Message::Pong { .. } => MsgType::Pong,
            Message::Subscribe(_) => MsgType::Subscribe,
            Message::Bye => MsgType::Bye,
            Message::Ack { .. } => MsgType::Ack,
            Message::Err { .. } => MsgType::Err,
        }
    }

    pub fn encode_payload(&self) -> Result<Vec<u8>, WireError> {
        fn json<T: Serialize>(v: &T) -> Result<Vec<u8>, WireError> {
            serde_json::to_vec(v).map_err(|e| malformed("json", e.to_string()))
        }
        Ok(match self {
            Message::Hello(h) => json(h)?,
            Message::StreamDecl(d) => json(d)?,
            Message::SampleChunk(c) => {
                let channels = c.samples.first().map_or(0, |s| s.values.len());
                encode_sample_chunk(c.stream_id, &c.samples, channels)?
            }
            Message::Marker { marker, source_ref } => encode_marker(marker, *source_ref)?,
            Message::Ping { t0 } => t0.to_le_bytes().to_vec(),
            Message::Pong { t0, t1, t2 } => [t0, t1, t2].iter().flat_map(|v| v.to_le_bytes()).collect(),
            Message::Subscribe(f) => vec![match f {
                SubscribeFilter::All => 0,
                SubscribeFilter::MarkerOnly => 1,
            }],
            Message::Bye => Vec::new(),
            Message::Ack { stream_id } => stream_id.to_le_bytes().to_vec(),
            Message::Err { code } => code.as_bytes().to_vec(),
        })
    }

    pub fn to_frame(&self) -> Result<Vec<u8>, WireError> {
        encode_frame(self.msg_type(), &self.encode_payload()?)
    }

    pub fn decode(msg_type: MsgType, payload: &[u8]) -> Result<Message, WireError> {
        let from_json = |what: &'static str| {
            std::str::from_utf8(payload).map_err(|e| malformed(what, e.to_string()))
        };
        Ok(match msg_type {
            MsgType::Hello => Message::Hello(
                serde_json::from_str(from_json("hello")?).map_err(|e| malformed("hello", e.to_string()))?,
            ),
            MsgType::StreamDecl => Message::StreamDecl(
                serde_json::from_str(from_json("stream-decl")?)
                    .map_err(|e| malformed("stream-decl", e.to_string()))?,
            ),
            MsgType::SampleChunk => Message::SampleChunk(decode_sample_chunk_inferred(payload)?),
            MsgType::Marker => {
                let (marker, source_ref) = decode_marker(payload)?;
                Message::Marker { marker, source_ref }
            }
            MsgType::Ping => {
                let mut r = Reader::new(payload, "ping");
                let t0 = r.f64()?;
                r.finish()?;
                Message::Ping { t0 }
            }
            MsgType::Pong => {
                let mut r = Reader::new(payload, "pong");
                let (t0, t1, t2) = (r.f64()?, r.f64()?, r.f64()?);
                r.finish()?;
                Message::Pong { t0, t1, t2 }
            }
            MsgType::Subscribe => match payload {
                [0] => Message::Subscribe(SubscribeFilter::All),
                [1] => Message::Subscribe(SubscribeFilter::MarkerOnly),
                _ => return Err(malformed("subscribe", format!("{payload:?}"))),
            },
            MsgType::Bye => {
                Reader::new(payload, "bye").finish()?;
                Message::Bye
            }
            MsgType::Ack => {
                let mut r = Reader::new(payload, "ack");
                let stream_id = r.u32()?;
                r.finish()?;
                Message::Ack { stream_id }
            }
            MsgType::Err => Message::Err { code: from_json("err")?.to_string() },
        })
    }
}

/// Convenience for producers: the declaration payload a producer sends.
pub fn decl_message(info: &StreamInfo) -> Message {
    Message::StreamDecl(DeclPayload { stream_id: None, source_ref: None, info: info.clone() })
}
