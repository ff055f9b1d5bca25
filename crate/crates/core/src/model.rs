//! Stream declarations, sample payloads and the event-marker catalog.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Stream id reserved for the hub's marker stream.
pub const MARKER_STREAM_ID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamKind {
    Numeric,
    Marker,
}

/// Declaration of a time series pushed by a producer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub name: String,
    pub source_id: String,
    pub kind: StreamKind,
    pub channel_count: u32,
    /// Zero means irregular (markers, event streams).
    pub nominal_rate_hz: f64,
    pub channel_labels: Vec<String>,
    pub units: Vec<String>,
}

impl StreamInfo {
    /// Numeric stream with one unit shared by every channel.
    pub fn numeric(name: &str, source_id: &str, rate_hz: f64, labels: &[&str], unit: &str) -> Self {
        StreamInfo {
            name: name.to_string(),
            source_id: source_id.to_string(),
            kind: StreamKind::Numeric,
            channel_count: labels.len() as u32,
            nominal_rate_hz: rate_hz,
            channel_labels: labels.iter().map(|s| s.to_string()).collect(),
            units: vec![unit.to_string(); labels.len()],
        }
    }

    pub fn marker(name: &str, source_id: &str) -> Self {
        StreamInfo {
            name: name.to_string(),
            source_id: source_id.to_string(),
            kind: StreamKind::Marker,
            channel_count: 1,
            nominal_rate_hz: 0.0,
            channel_labels: vec!["label".to_string()],
            units: vec!["text".to_string()],
        }
    }
}

/// A single rule broken by a [`StreamInfo`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeclViolation {
    EmptyName,
    ZeroChannels,
    LabelCountMismatch { labels: usize, channels: u32 },
    UnitCountMismatch { units: usize, channels: u32 },
    MarkerChannelCount(u32),
    MarkerRate,
    BadRate,
}

impl fmt::Display for DeclViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeclViolation::EmptyName => write!(f, "stream name is empty"),
            DeclViolation::ZeroChannels => write!(f, "channel count must be positive"),
            DeclViolation::LabelCountMismatch { labels, channels } => {
                write!(f, "label count mismatch: {labels} labels for {channels} channels")
            }
            DeclViolation::UnitCountMismatch { units, channels } => {
                write!(f, "unit count mismatch: {units} units for {channels} channels")
            }
            DeclViolation::MarkerChannelCount(n) => {
                write!(f, "marker streams have one channel (got {n})")
            }
            DeclViolation::MarkerRate => write!(f, "marker streams have nominal rate 0"),
            DeclViolation::BadRate => write!(f, "nominal rate must be finite and non-negative"),
        }
    }
}

/// Collects every violated declaration rule. An empty list means the
/// declaration is valid.
pub fn validate_stream_info(info: &StreamInfo) -> Vec<DeclViolation> {
    let mut out = Vec::new();
    if info.name.is_empty() {
        out.push(DeclViolation::EmptyName);
    }
    if info.channel_count == 0 {
        out.push(DeclViolation::ZeroChannels);
    }
    if info.channel_labels.len() != info.channel_count as usize {
        out.push(DeclViolation::LabelCountMismatch {
            labels: info.channel_labels.len(),
            channels: info.channel_count,
        });
    }
    if info.units.len() != info.channel_count as usize {
        out.push(DeclViolation::UnitCountMismatch {
            units: info.units.len(),
            channels: info.channel_count,
        });
    }
    if !(info.nominal_rate_hz.is_finite() && info.nominal_rate_hz >= 0.0) {
        out.push(DeclViolation::BadRate);
    }
    if info.kind == StreamKind::Marker {
        if info.channel_count != 1 {
            out.push(DeclViolation::MarkerChannelCount(info.channel_count));
        }
        if info.nominal_rate_hz != 0.0 {
            out.push(DeclViolation::MarkerRate);
        }
    }
    out
}

/// One multi-channel sample stamped on the producer's clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub raw_timestamp: f64,
    pub values: Vec<f32>,
}

impl Sample {
    pub fn new(raw_timestamp: f64, values: Vec<f32>) -> Self {
        Sample { raw_timestamp, values }
    }

    /// Checks the sample against its stream's channel count.
    pub fn fits(&self, info: &StreamInfo) -> bool {
        self.raw_timestamp.is_finite() && self.values.len() == info.channel_count as usize
    }
}

/// Who produced a marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MarkerOrigin {
    Auto,
    Investigator,
    Subject,
}

impl MarkerOrigin {
    pub fn code(self) -> u8 {
        match self {
            MarkerOrigin::Auto => 0,
            MarkerOrigin::Investigator => 1,
            MarkerOrigin::Subject => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MarkerOrigin::Auto),
            1 => Some(MarkerOrigin::Investigator),
            2 => Some(MarkerOrigin::Subject),
            _ => None,
        }
    }
}

impl fmt::Display for MarkerOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MarkerOrigin::Auto => "auto",
            MarkerOrigin::Investigator => "investigator",
            MarkerOrigin::Subject => "subject",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSample {
    pub raw_timestamp: f64,
    pub label: String,
    pub origin: MarkerOrigin,
}

impl MarkerSample {
    pub fn new(raw_timestamp: f64, label: impl Into<String>, origin: MarkerOrigin) -> Self {
        MarkerSample { raw_timestamp, label: label.into(), origin }
    }

    /// Auto markers must come from the catalog; manual ones may be free text.
    pub fn is_valid(&self) -> bool {
        !self.label.is_empty()
            && self.raw_timestamp.is_finite()
            && (self.origin != MarkerOrigin::Auto
                || is_catalog_label(&self.label)
                || is_diagnostic_label(&self.label))
    }
}

/// Number of tasks in the first case study.
pub const TASK_COUNT: u8 = 4;

pub mod labels {
    pub const EXPERIMENT_START: &str = "Experiment start";
    pub const EXPERIMENT_END: &str = "Experiment end";
    pub const ROBOT_APPROACHING: &str = "Robot approaching";
    pub const PICKUP_SUCCESSFUL: &str = "Pick up successful";
    pub const PICKUP_FAILED: &str = "Pick up failed";
    pub const STATE_CHANGE: &str = "Robot state change";
    pub const STOPPING: &str = "Robot is stopping";
    pub const SPEEDING_UP: &str = "Robot is speeding up";
    pub const SLOWING_DOWN: &str = "Robot is slowing down";

    pub fn task_init(n: u8) -> String {
        format!("Task {n} init")
    }

    pub fn task_start(n: u8) -> String {
        format!("Task {n} start")
    }

    pub fn task_end(n: u8) -> String {
        format!("Task {n} end")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseStudy {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CatalogEntry {
    pub case: CaseStudy,
    pub label: String,
    pub definition: String,
}

/// The automatically generated event markers of both case studies, with the
/// per-task templates expanded for tasks 1 to 4.
pub fn marker_catalog() -> Vec<CatalogEntry> {
    use labels::*;
    let entry = |case, label: &str, def: &str| CatalogEntry {
        case,
        label: label.to_string(),
        definition: def.to_string(),
    };
    let mut out = vec![entry(CaseStudy::One, EXPERIMENT_START, "Experiment started")];
    for n in 1..=TASK_COUNT {
        out.push(entry(
            CaseStudy::One,
            &task_init(n),
            &format!("Task {n} initialized but subject has not complete loading yet"),
        ));
        out.push(entry(
            CaseStudy::One,
            &task_start(n),
            &format!("Task {n} started robot unloading all the parts"),
        ));
        out.push(entry(CaseStudy::One, &task_end(n), &format!("Task {n} unloading is done")));
    }
    out.extend([
        entry(CaseStudy::One, ROBOT_APPROACHING, "Each time robot comes toward human will generate a event"),
        entry(CaseStudy::One, PICKUP_SUCCESSFUL, "Master pin is loaded"),
        entry(CaseStudy::One, PICKUP_FAILED, "Master pin is not loaded"),
        entry(CaseStudy::One, EXPERIMENT_END, "Experiment is complete"),
        entry(CaseStudy::Two, EXPERIMENT_START, "Experiment"),
        entry(CaseStudy::Two, STATE_CHANGE, "When robot change state between Normal, Reduced, and Stop"),
        entry(CaseStudy::Two, STOPPING, "When robot going to complete stop"),
        entry(CaseStudy::Two, SPEEDING_UP, "When robot is going to normal speed"),
        entry(CaseStudy::Two, SLOWING_DOWN, "When robot is slowing down."),
        entry(CaseStudy::Two, EXPERIMENT_END, "Experiment is complete"),
    ]);
    out
}

pub fn is_catalog_label(label: &str) -> bool {
    marker_catalog().iter().any(|e| e.label == label)
}

/// Hub-generated health markers (subscriber overflow, lost sources).
pub fn is_diagnostic_label(label: &str) -> bool {
    label == "RECORDER-OVERFLOW" || label.strip_prefix("SOURCE-LOST:").is_some_and(|s| !s.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn marker_decl_is_valid() {
        let info = StreamInfo::marker("markers", "hub");
        assert!(validate_stream_info(&info).is_empty());
    }

    #[test]
    fn marker_with_three_channels_rejected() {
        let mut info = StreamInfo::marker("markers", "hub");
        info.channel_count = 3;
        info.channel_labels = vec!["a".into(), "b".into(), "c".into()];
        info.units = vec!["".into(); 3];
        let errs = validate_stream_info(&info);
        assert_eq!(errs, vec![DeclViolation::MarkerChannelCount(3)]);
        assert!(errs[0].to_string().contains("marker streams have one channel"));
    }

    #[test]
    fn label_count_mismatch_reported() {
        let mut info = StreamInfo::numeric("pos", "mocap", 100.0, &["x", "y"], "m");
        info.channel_labels = vec!["x".into()];
        let errs = validate_stream_info(&info);
        assert_eq!(errs.len(), 1);
        assert!(errs[0].to_string().contains("label count mismatch"));
    }

    #[test]
    fn every_violation_is_collected() {
        let info = StreamInfo {
            name: String::new(),
            source_id: "x".into(),
            kind: StreamKind::Marker,
            channel_count: 2,
            nominal_rate_hz: -1.0,
            channel_labels: vec![],
            units: vec![],
        };
        let errs = validate_stream_info(&info);
        assert_eq!(errs.len(), 6, "{errs:?}");
    }

    #[test]
    fn catalog_contents() {
        let cat = marker_catalog();
        let approaching = cat.iter().find(|e| e.label == "Robot approaching").unwrap();
        assert!(approaching.definition.starts_with("Each time robot comes toward human"));
        let change = cat.iter().find(|e| e.label == "Robot state change").unwrap();
        assert!(change.definition.contains("between Normal, Reduced, and Stop"));
        assert!(is_catalog_label("Task 3 start"));
        assert!(!is_catalog_label("Task 5 start"));
        assert!(!is_catalog_label("Task [n] start"));
        // 8 case-one rows with 3 of them expanded over 4 tasks, plus 6 case-two rows.
        assert_eq!(cat.len(), 5 + 3 * 4 + 6);
    }

    #[test]
    fn manual_markers_may_be_free_text() {
        assert!(MarkerSample::new(1.0, "subject adjusted glasses", MarkerOrigin::Investigator).is_valid());
        assert!(!MarkerSample::new(1.0, "subject adjusted glasses", MarkerOrigin::Auto).is_valid());
        assert!(MarkerSample::new(1.0, "Experiment start", MarkerOrigin::Auto).is_valid());
        assert!(!MarkerSample::new(1.0, "", MarkerOrigin::Subject).is_valid());
        assert!(MarkerSample::new(1.0, "SOURCE-LOST:gsr", MarkerOrigin::Auto).is_valid());
        assert!(!MarkerSample::new(1.0, "SOURCE-LOST:", MarkerOrigin::Auto).is_valid());
    }

    #[test]
    fn origin_codes_roundtrip() {
        for o in [MarkerOrigin::Auto, MarkerOrigin::Investigator, MarkerOrigin::Subject] {
            assert_eq!(MarkerOrigin::from_code(o.code()), Some(o));
        }
        assert_eq!(MarkerOrigin::from_code(3), None);
    }

    proptest! {
        #[test]
        fn samples_fit_only_matching_channel_counts(channels in 1u32..16, len in 0usize..20, t in -1e6f64..1e6) {
            let labels: Vec<String> = (0..channels).map(|i| format!("c{i}")).collect();
            let refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
            let info = StreamInfo::numeric("s", "src", 10.0, &refs, "u");
            let sample = Sample::new(t, vec![0.0; len]);
            prop_assert_eq!(sample.fits(&info), len == channels as usize);
        }
    }
}
