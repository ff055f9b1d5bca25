//! The `.srec` recording format.
//!
//! ```text
//! file    := "SREC" u16 version u16 reserved record*
//! record  := u8 rec_type u32 length payload[length]
//! ```
//!
//! | rec_type | payload |
//! |---|---|
//! | 1 | stream declaration, JSON `{stream_id, source_ref, ...StreamInfo}` |
//! | 2 | numeric chunk: sample-chunk layout followed by f64 hub receive time |
//! | 3 | marker: f64 raw_t, u8 origin, u16 label_len, label, u32 source_ref |
//! | 4 | offset entry: u32 source_ref, f64 measured_at, f64 offset |
//! | 5 | footer, JSON `{counts, metadata}` |
//!
//! Integers and floats are little-endian. The file is append-only, so a
//! crash leaves every complete record readable; the footer is then rebuilt
//! by scanning.

use crate::clock::{OffsetTable, SyncError};
use crate::model::{MarkerSample, Sample, StreamInfo, StreamKind, MARKER_STREAM_ID};
use crate::wire::{self, DeclPayload, WireError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SREC";
pub const FORMAT_VERSION: u16 = 1;
/// Source reference of events originating in the hub itself.
pub const HUB_SOURCE_REF: u32 = 0;

const REC_DECL: u8 = 1;
const REC_CHUNK: u8 = 2;
const REC_MARKER: u8 = 3;
const REC_OFFSET: u8 = 4;
const REC_FOOTER: u8 = 5;

#[derive(Debug, Error)]
pub enum RecorderError {
    #[error("undeclared-stream: chunk for stream {0} before its declaration")]
    UndeclaredStream(u32),
    #[error("stream {0} declared twice")]
    DuplicateDecl(u32),
    #[error("stream id {0} is reserved for markers")]
    ReservedStream(u32),
    #[error("i/o error at file offset {offset}: {source}")]
    Io { offset: u64, source: io::Error },
    #[error("not-srec: bad magic")]
    NotSrec,
    #[error("unsupported-version: {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt record at offset {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Sync(#[from] SyncError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclaredStream {
    pub stream_id: u32,
    pub source_ref: u32,
    pub info: StreamInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumericChunk {
    pub stream_id: u32,
    pub samples: Vec<Sample>,
    pub hub_receive_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerRecord {
    pub marker: MarkerSample,
    pub source_ref: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetRecord {
    pub source_ref: u32,
    pub measured_at: f64,
    pub offset: f64,
}

/// Everything the recorder persists, in delivery order.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Decl(DeclaredStream),
    Chunk(NumericChunk),
    Marker(MarkerRecord),
    Offset(OffsetRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Footer {
    /// Samples per stream id; stream 0 counts markers.
    pub counts: BTreeMap<u32, u64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub version: u16,
    pub records: Vec<Record>,
    pub footer: Footer,
    /// Set when the footer is missing or the last record is incomplete.
    pub truncated: bool,
}

impl Recording {
    pub fn streams(&self) -> impl Iterator<Item = &DeclaredStream> {
        self.records.iter().filter_map(|r| match r {
            Record::Decl(d) => Some(d),
            _ => None,
        })
    }

    pub fn stream(&self, stream_id: u32) -> Option<&DeclaredStream> {
        self.streams().find(|d| d.stream_id == stream_id)
    }

    pub fn markers(&self) -> impl Iterator<Item = &MarkerRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Marker(m) => Some(m),
            _ => None,
        })
    }

    pub fn chunks(&self) -> impl Iterator<Item = &NumericChunk> {
        self.records.iter().filter_map(|r| match r {
            Record::Chunk(c) => Some(c),
            _ => None,
        })
    }

    /// All samples of one stream, in recorded order.
    pub fn samples(&self, stream_id: u32) -> Vec<&Sample> {
        self.chunks().filter(|c| c.stream_id == stream_id).flat_map(|c| &c.samples).collect()
    }

    /// Per-stream counts obtained by scanning the records.
    pub fn scanned_counts(&self) -> BTreeMap<u32, u64> {
        count_records(&self.records)
    }

    /// Offset tables rebuilt from the inline offset entries.
    pub fn offset_tables(&self) -> Result<BTreeMap<u32, OffsetTable>, SyncError> {
        let mut out: BTreeMap<u32, OffsetTable> = BTreeMap::new();
        for r in &self.records {
            if let Record::Offset(o) = r {
                out.entry(o.source_ref).or_default().push(o.measured_at, o.offset)?;
            }
        }
        Ok(out)
    }
}

fn count_records(records: &[Record]) -> BTreeMap<u32, u64> {
    let mut counts = BTreeMap::new();
    for r in records {
        match r {
            Record::Decl(d) => {
                counts.entry(d.stream_id).or_insert(0);
            }
            Record::Chunk(c) => *counts.entry(c.stream_id).or_insert(0) += c.samples.len() as u64,
            Record::Marker(_) => *counts.entry(MARKER_STREAM_ID).or_insert(0) += 1,
            Record::Offset(_) => {}
        }
    }
    counts
}

fn decl_json(d: &DeclaredStream) -> Result<Vec<u8>, RecorderError> {
    let p = DeclPayload { stream_id: Some(d.stream_id), source_ref: Some(d.source_ref), info: d.info.clone() };
    serde_json::to_vec(&p).map_err(|e| RecorderError::Corrupt { offset: 0, detail: e.to_string() })
}

/// Encodes one record body (without the type/length prefix).
fn encode_record(r: &Record, channels: &BTreeMap<u32, usize>) -> Result<(u8, Vec<u8>), RecorderError> {
    Ok(match r {
        Record::Decl(d) => (REC_DECL, decl_json(d)?),
        Record::Chunk(c) => {
            let ch = *channels.get(&c.stream_id).ok_or(RecorderError::UndeclaredStream(c.stream_id))?;
            let mut p = wire::encode_sample_chunk(c.stream_id, &c.samples, ch)?;
            p.extend_from_slice(&c.hub_receive_t.to_le_bytes());
            (REC_CHUNK, p)
        }
        Record::Marker(m) => (REC_MARKER, wire::encode_marker(&m.marker, Some(m.source_ref))?),
        Record::Offset(o) => {
            let mut p = Vec::with_capacity(20);
            p.extend_from_slice(&o.source_ref.to_le_bytes());
            p.extend_from_slice(&o.measured_at.to_le_bytes());
            p.extend_from_slice(&o.offset.to_le_bytes());
            (REC_OFFSET, p)
        }
    })
}

/// Append-only `.srec` writer.
pub struct RecordingWriter<W: Write> {
    out: W,
    offset: u64,
    channels: BTreeMap<u32, usize>,
    counts: BTreeMap<u32, u64>,
    metadata: BTreeMap<String, serde_json::Value>,
}

impl RecordingWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, RecorderError> {
        let f = File::create(path).map_err(|source| RecorderError::Io { offset: 0, source })?;
        Self::new(BufWriter::new(f))
    }
}

impl<W: Write> RecordingWriter<W> {
    pub fn new(out: W) -> Result<Self, RecorderError> {
        let mut w = RecordingWriter {
            out,
            offset: 0,
            channels: BTreeMap::new(),
            counts: BTreeMap::new(),
            metadata: BTreeMap::new(),
        };
        let mut header = MAGIC.to_vec();
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&0u16.to_le_bytes());
        w.put(&header)?;
        Ok(w)
    }

    fn put(&mut self, bytes: &[u8]) -> Result<(), RecorderError> {
        self.out
            .write_all(bytes)
            .map_err(|source| RecorderError::Io { offset: self.offset, source })?;
        self.offset += bytes.len() as u64;
        Ok(())
    }

    fn put_record(&mut self, rec_type: u8, payload: &[u8]) -> Result<(), RecorderError> {
        let mut buf = Vec::with_capacity(5 + payload.len());
        buf.push(rec_type);
        buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(payload);
        self.put(&buf)
    }

    pub fn write(&mut self, r: &Record) -> Result<(), RecorderError> {
        match r {
            Record::Decl(d) => {
                if d.stream_id == MARKER_STREAM_ID {
                    return Err(RecorderError::ReservedStream(d.stream_id));
                }
                if self.channels.contains_key(&d.stream_id) {
                    return Err(RecorderError::DuplicateDecl(d.stream_id));
                }
            }
            Record::Chunk(c) if !self.channels.contains_key(&c.stream_id) => {
                return Err(RecorderError::UndeclaredStream(c.stream_id));
            }
            _ => {}
        }
        let (ty, payload) = encode_record(r, &self.channels)?;
        self.put_record(ty, &payload)?;
        match r {
            Record::Decl(d) => {
                self.channels.insert(d.stream_id, d.info.channel_count as usize);
                self.counts.insert(d.stream_id, 0);
            }
            Record::Chunk(c) => *self.counts.entry(c.stream_id).or_insert(0) += c.samples.len() as u64,
            Record::Marker(_) => *self.counts.entry(MARKER_STREAM_ID).or_insert(0) += 1,
            Record::Offset(_) => {}
        }
        Ok(())
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: serde_json::Value) {
        self.metadata.insert(key.into(), value);
    }

    pub fn flush(&mut self) -> Result<(), RecorderError> {
        self.out.flush().map_err(|source| RecorderError::Io { offset: self.offset, source })
    }

    pub fn bytes_written(&self) -> u64 {
        self.offset
    }

    pub fn counts(&self) -> &BTreeMap<u32, u64> {
        &self.counts
    }

    /// Writes the footer and returns the underlying writer.
    pub fn finish(mut self) -> Result<(W, Footer), RecorderError> {
        let footer = Footer { counts: self.counts.clone(), metadata: std::mem::take(&mut self.metadata) };
        let json = serde_json::to_vec(&footer).expect("footer serializes");
        self.put_record(REC_FOOTER, &json)?;
        self.flush()?;
        Ok((self.out, footer))
    }
}

/// Serializes a full event sequence into `.srec` bytes.
pub fn write_recording(
    records: &[Record],
    metadata: &BTreeMap<String, serde_json::Value>,
) -> Result<Vec<u8>, RecorderError> {
    let mut w = RecordingWriter::new(Vec::new())?;
    for r in records {
        w.write(r)?;
    }
    for (k, v) in metadata {
        w.set_metadata(k.clone(), v.clone());
    }
    Ok(w.finish()?.0)
}

pub fn read_recording_file(path: impl AsRef<Path>) -> Result<Recording, RecorderError> {
    let bytes = std::fs::read(path).map_err(|source| RecorderError::Io { offset: 0, source })?;
    read_recording(&bytes)
}

pub fn read_recording(bytes: &[u8]) -> Result<Recording, RecorderError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(RecorderError::NotSrec);
    }
    if bytes.len() < 8 {
        return Ok(Recording { version: FORMAT_VERSION, records: vec![], footer: Footer::default(), truncated: true });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version > FORMAT_VERSION {
        return Err(RecorderError::UnsupportedVersion(version));
    }
    let mut pos = 8usize;
    let mut records = Vec::new();
    let mut channels: BTreeMap<u32, usize> = BTreeMap::new();
    let mut footer = None;
    let mut truncated = false;
    while pos < bytes.len() {
        if bytes.len() - pos < 5 {
            truncated = true;
            break;
        }
        let ty = bytes[pos];
        let len = u32::from_le_bytes(bytes[pos + 1..pos + 5].try_into().unwrap()) as usize;
        if bytes.len() - pos - 5 < len {
            truncated = true;
            break;
        }
        let payload = &bytes[pos + 5..pos + 5 + len];
        let at = pos as u64;
        let corrupt = |detail: String| RecorderError::Corrupt { offset: at, detail };
        match ty {
            REC_DECL => {
                let p: DeclPayload = serde_json::from_slice(payload).map_err(|e| corrupt(e.to_string()))?;
                let (Some(stream_id), Some(source_ref)) = (p.stream_id, p.source_ref) else {
                    return Err(corrupt("declaration without ids".into()));
                };
                channels.insert(stream_id, p.info.channel_count as usize);
                records.push(Record::Decl(DeclaredStream { stream_id, source_ref, info: p.info }));
            }
            REC_CHUNK => {
                if len < 16 {
                    return Err(corrupt("short chunk".into()));
                }
                let (body, tail) = payload.split_at(len - 8);
                let stream_id = wire::peek_chunk_stream(body)?;
                let ch = *channels.get(&stream_id).ok_or(RecorderError::UndeclaredStream(stream_id))?;
                let chunk = wire::decode_sample_chunk(body, ch).map_err(|e| corrupt(e.to_string()))?;
                records.push(Record::Chunk(NumericChunk {
                    stream_id,
                    samples: chunk.samples,
                    hub_receive_t: f64::from_le_bytes(tail.try_into().unwrap()),
                }));
            }
            REC_MARKER => {
                let (marker, source_ref) = wire::decode_marker(payload).map_err(|e| corrupt(e.to_string()))?;
                let source_ref = source_ref.ok_or_else(|| corrupt("marker without source".into()))?;
                records.push(Record::Marker(MarkerRecord { marker, source_ref }));
            }
            REC_OFFSET => {
                if len != 20 {
                    return Err(corrupt(format!("offset entry of {len} bytes")));
                }
                records.push(Record::Offset(OffsetRecord {
                    source_ref: u32::from_le_bytes(payload[..4].try_into().unwrap()),
                    measured_at: f64::from_le_bytes(payload[4..12].try_into().unwrap()),
                    offset: f64::from_le_bytes(payload[12..20].try_into().unwrap()),
                }));
            }
            REC_FOOTER => {
                footer = Some(serde_json::from_slice::<Footer>(payload).map_err(|e| corrupt(e.to_string()))?);
                pos += 5 + len;
                if pos != bytes.len() {
                    return Err(corrupt("data after footer".into()));
                }
                break;
            }
            other => return Err(corrupt(format!("unknown record type {other}"))),
        }
        pos += 5 + len;
    }
    let footer = match footer {
        Some(f) => f,
        None => {
            truncated = true;
            Footer { counts: count_records(&records), metadata: BTreeMap::new() }
        }
    };
    Ok(Recording { version, records, footer, truncated })
}

/// Checks a declaration is usable as a recorded numeric stream.
pub fn is_numeric(d: &DeclaredStream) -> bool {
    d.info.kind == StreamKind::Numeric
}
