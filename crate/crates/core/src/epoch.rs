//! Offline correction of recorded timestamps and marker-aligned epoching.

use crate::clock::{correct_timestamp, OffsetTable, SyncError};
use crate::model::MarkerOrigin;
use crate::recorder::{Recording, HUB_SOURCE_REF};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EpochError {
    #[error("unsynchronized-source: source {0} has data but no offset entries")]
    Unsynchronized(u32),
    #[error("window bounds must be finite and non-negative (pre {pre}, post {post})")]
    BadWindow { pre: f64, post: f64 },
    #[error("marker label is empty")]
    EmptyLabel,
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("export failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("export failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// One stream mapped onto the hub timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedStream {
    pub stream_id: u32,
    pub source_ref: u32,
    /// Export key: the stream name, qualified by source when names collide.
    pub key: String,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedMarker {
    pub t: f64,
    pub label: String,
    pub origin: MarkerOrigin,
    pub source_ref: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedRecording {
    pub streams: BTreeMap<u32, CorrectedStream>,
    /// Sorted by corrected time; equal times keep recording order.
    pub markers: Vec<CorrectedMarker>,
}

fn table_for<'a>(
    tables: &'a BTreeMap<u32, OffsetTable>,
    source_ref: u32,
) -> Result<Option<&'a OffsetTable>, EpochError> {
    if source_ref == HUB_SOURCE_REF {
        return Ok(None);
    }
    match tables.get(&source_ref) {
        Some(t) if !t.is_empty() => Ok(Some(t)),
        _ => Err(EpochError::Unsynchronized(source_ref)),
    }
}

fn apply(raw: f64, table: Option<&OffsetTable>) -> Result<f64, SyncError> {
    match table {
        None => Ok(raw),
        Some(t) => correct_timestamp(raw, t),
    }
}

/// Maps every sample and marker onto the hub timeline using the offset
/// entries recorded for its source. Hub-local markers are left unchanged.
pub fn correct_recording(rec: &Recording) -> Result<CorrectedRecording, EpochError> {
    let tables = rec.offset_tables()?;
    let mut name_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in rec.streams() {
        *name_counts.entry(d.info.name.as_str()).or_insert(0) += 1;
    }
    let mut streams = BTreeMap::new();
    for d in rec.streams() {
        let key = if name_counts[d.info.name.as_str()] > 1 {
            format!("{}/{}", d.info.source_id, d.info.name)
        } else {
            d.info.name.clone()
        };
        streams.insert(
            d.stream_id,
            CorrectedStream { stream_id: d.stream_id, source_ref: d.source_ref, key, times: vec![], values: vec![] },
        );
    }
    for c in rec.chunks() {
        if c.samples.is_empty() {
            continue;
        }
        let s = streams.get_mut(&c.stream_id).expect("reader guarantees declared chunks");
        let table = table_for(&tables, s.source_ref)?;
        for smp in &c.samples {
            s.times.push(apply(smp.raw_timestamp, table)?);
            s.values.push(smp.values.clone());
        }
    }
    let mut markers = Vec::new();
    for m in rec.markers() {
        let table = table_for(&tables, m.source_ref)?;
        markers.push(CorrectedMarker {
            t: apply(m.marker.raw_timestamp, table)?,
            label: m.marker.label.clone(),
            origin: m.marker.origin,
            source_ref: m.source_ref,
        });
    }
    markers.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(CorrectedRecording { streams, markers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub relative_t: Vec<f64>,
    pub values: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub label: String,
    pub marker_t: f64,
    #[serde(skip)]
    pub pre: f64,
    #[serde(skip)]
    pub post: f64,
    pub streams: BTreeMap<String, Slice>,
}

/// Samples whose time relative to `marker_t` lies in `[-pre, post]`.
fn slice(stream: &CorrectedStream, marker_t: f64, pre: f64, post: f64) -> Slice {
    let rel = |t: f64| t - marker_t;
    let lo = stream.times.partition_point(|t| rel(*t) < -pre);
    let hi = stream.times.partition_point(|t| rel(*t) <= post);
    let hi = hi.max(lo);
    Slice {
        relative_t: stream.times[lo..hi].iter().map(|t| rel(*t)).collect(),
        values: stream.values[lo..hi].to_vec(),
    }
}

/// One epoch per marker with exactly this label, in corrected-time order.
pub fn extract_epochs(rec: &CorrectedRecording, label: &str, pre: f64, post: f64) -> Result<Vec<Epoch>, EpochError> {
    extract_epochs_matching(rec, |l| l == label, label, pre, post)
}

/// Like [`extract_epochs`] with a caller-supplied label predicate.
pub fn extract_epochs_matching(
    rec: &CorrectedRecording,
    matches: impl Fn(&str) -> bool,
    label: &str,
    pre: f64,
    post: f64,
) -> Result<Vec<Epoch>, EpochError> {
    if label.is_empty() {
        return Err(EpochError::EmptyLabel);
    }
    if !(pre.is_finite() && post.is_finite() && pre >= 0.0 && post >= 0.0) {
        return Err(EpochError::BadWindow { pre, post });
    }
    Ok(rec
        .markers
        .iter()
        .filter(|m| matches(&m.label))
        .map(|m| Epoch {
            label: m.label.clone(),
            marker_t: m.t,
            pre,
            post,
            streams: rec.streams.values().map(|s| (s.key.clone(), slice(s, m.t, pre, post))).collect(),
        })
        .collect())
}

/// Writes one JSON object per epoch and line.
pub fn export_epochs<W: Write>(epochs: &[Epoch], mut out: W) -> Result<(), EpochError> {
    for e in epochs {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn parse_epochs(text: &str) -> Result<Vec<Epoch>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Distinct marker labels in a corrected recording.
pub fn marker_labels(rec: &CorrectedRecording) -> BTreeSet<&str> {
    rec.markers.iter().map(|m| m.label.as_str()).collect()
}
