//! Scripted Case I (insert unloading) and Case II (pick and place under
//! speed and separation monitoring) scenarios.
//!
//! A scenario runs on experiment time `t` starting at 0. It talks to a hub
//! through an [`ExperimentLink`]: [`LocalLink`] drives an in-process hub on
//! simulated time, a networked link lives in the `syncrec-net` crate.

use crate::clock::{ManualClock, PING_INTERVAL_S};
use crate::hub::{Hub, HubConfig, HubError, MarkerSource, SessionId, Subscription};
use crate::model::{labels, MarkerOrigin, Sample, StreamInfo};
use crate::recorder::{read_recording, RecorderError, Recording, RecordingWriter};
use crate::sim::{
    self, plan_trajectory, AccelMode, DeviceConfig, DeviceKind, DeviceSim, JointConfig, MocapScript, MotionLimits,
    SegmentMotion, SimError, StimulusEvent, TrajectoryMode,
};
use crate::twin::{self, BasePose, DhJoint, DigitalTwin, KinematicModel, SsmConfig, TwinError, Vec3, Zone};
use crate::wire::SubscribeFilter;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

pub const ORCHESTRATOR_SOURCE: &str = "orchestrator";
pub const ROBOT_SOURCE: &str = "robot";
pub const TWIN_SOURCE: &str = "twin";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("task must be 1..4, got {0}")]
    BadTask(u8),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("hub link: {0}")]
    Link(String),
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    Recorder(#[from] RecorderError),
    #[error("scenario did not finish within {0} s of experiment time")]
    Timeout(f64),
}

/// Case I tasks. Each fixes its (acceleration, trajectory) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Task {
    One,
    Two,
    Three,
    Four,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::One, Task::Two, Task::Three, Task::Four];

    pub fn id(self) -> u8 {
        match self {
            Task::One => 1,
            Task::Two => 2,
            Task::Three => 3,
            Task::Four => 4,
        }
    }

    pub fn acceleration(self) -> AccelMode {
        match self {
            Task::One | Task::Three => AccelMode::Normal,
            Task::Two | Task::Four => AccelMode::High,
        }
    }

    pub fn trajectory(self) -> TrajectoryMode {
        match self {
            Task::One | Task::Two => TrajectoryMode::Fixed,
            Task::Three | Task::Four => TrajectoryMode::Random,
        }
    }
}

impl TryFrom<u8> for Task {
    type Error = ExperimentError;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        match n {
            1 => Ok(Task::One),
            2 => Ok(Task::Two),
            3 => Ok(Task::Three),
            4 => Ok(Task::Four),
            _ => Err(ExperimentError::BadTask(n)),
        }
    }
}

impl From<Task> for u8 {
    fn from(t: Task) -> u8 {
        t.id()
    }
}

// ---------------------------------------------------------------------------
// Link

#[derive(Debug, Clone, PartialEq)]
pub struct SourceHandle {
    pub index: usize,
    pub stream_ids: Vec<u32>,
}

/// What a scenario needs from a hub.
pub trait ExperimentLink {
    /// Opens a producer session and declares its streams.
    fn open_source(&mut self, source_id: &str, streams: &[StreamInfo]) -> Result<SourceHandle, ExperimentError>;
    /// The source's own clock reading at experiment time `t`.
    fn producer_time(&self, src: &SourceHandle, t: f64) -> f64;
    /// Moves the link to experiment time `t` (monotone).
    fn advance(&mut self, t: f64) -> Result<(), ExperimentError>;
    fn push(&mut self, src: &SourceHandle, stream: usize, samples: Vec<Sample>) -> Result<(), ExperimentError>;
    fn marker(&mut self, src: &SourceHandle, label: &str, origin: MarkerOrigin, raw_t: f64) -> Result<(), ExperimentError>;
    fn set_metadata(&mut self, key: &str, value: Value) -> Result<(), ExperimentError>;
    /// Closes every source and returns the recording when the link owns one.
    fn finish(&mut self) -> Result<Option<Recording>, ExperimentError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalLinkConfig {
    /// Clock offset (hub minus producer) per source id, seconds.
    #[serde(default)]
    pub offsets: BTreeMap<String, f64>,
    /// Upper bound of the uniform one-way delay of each probe leg, seconds.
    #[serde(default)]
    pub jitter: f64,
    /// Both legs of an exchange get the same delay.
    #[serde(default)]
    pub symmetric: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ping")]
    pub ping_interval: f64,
    /// Hub clock reading at experiment time 0.
    #[serde(default)]
    pub hub_epoch: f64,
}

fn default_ping() -> f64 {
    PING_INTERVAL_S
}

impl Default for LocalLinkConfig {
    fn default() -> Self {
        LocalLinkConfig { offsets: BTreeMap::new(), jitter: 0.0, symmetric: false, seed: 0, ping_interval: PING_INTERVAL_S, hub_epoch: 0.0 }
    }
}

struct LocalSource {
    session: SessionId,
    offset: f64,
    next_ping: f64,
}

/// In-process hub on simulated time. Probes are synthesized with seeded
/// delays and the recording is written to memory as the run progresses.
pub struct LocalLink {
    hub: Hub,
    clock: ManualClock,
    sub: Subscription,
    writer: Option<RecordingWriter<Vec<u8>>>,
    sources: Vec<LocalSource>,
    rng: ChaCha8Rng,
    cfg: LocalLinkConfig,
    t: f64,
}

impl LocalLink {
    pub fn new(cfg: LocalLinkConfig) -> Result<Self, ExperimentError> {
        let clock = ManualClock::new(cfg.hub_epoch);
        let hub = Hub::new(Arc::new(clock.clone()), HubConfig::default());
        let sub = hub.subscribe(SubscribeFilter::All);
        let writer = RecordingWriter::new(Vec::new())?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(LocalLink { hub, clock, sub, writer: Some(writer), sources: Vec::new(), rng, cfg, t: 0.0 })
    }

    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    /// Closes the run and returns the encoded `.srec` file; `None` when
    /// already finished.
    pub fn finish_bytes(&mut self) -> Result<Option<Vec<u8>>, ExperimentError> {
        for s in &self.sources {
            self.hub.close_session(s.session, true);
        }
        self.hub.shutdown();
        self.drain()?;
        let Some(w) = self.writer.take() else { return Ok(None) };
        Ok(Some(w.finish()?.0))
    }

    fn hub_time(&self, t: f64) -> f64 {
        self.cfg.hub_epoch + t
    }

    fn drain(&mut self) -> Result<(), ExperimentError> {
        let Some(w) = self.writer.as_mut() else { return Ok(()) };
        for ev in self.sub.rx.try_iter() {
            match ev {
                crate::hub::HubEvent::Record(r) => w.write(&r)?,
                crate::hub::HubEvent::Metadata { key, value } => w.set_metadata(key, value),
            }
        }
        Ok(())
    }

    fn probe(&mut self, idx: usize, hub_t: f64) -> Result<(), ExperimentError> {
        let j = self.cfg.jitter;
        let (d1, d2) = if j > 0.0 { (self.rng.random_range(0.0..j), self.rng.random_range(0.0..j)) } else { (0.0, 0.0) };
        let d2 = if self.cfg.symmetric { d1 } else { d2 };
        let turnaround = 1e-4;
        let s = &self.sources[idx];
        let prod_recv = hub_t + d1 - s.offset;
        let prod_send = prod_recv + turnaround;
        let hub_recv = hub_t + d1 + turnaround + d2;
        self.hub.record_probe(s.session, hub_t, prod_recv, prod_send, hub_recv)?;
        Ok(())
    }
}

impl ExperimentLink for LocalLink {
    fn open_source(&mut self, source_id: &str, streams: &[StreamInfo]) -> Result<SourceHandle, ExperimentError> {
        let session = self.hub.open_session(source_id);
        let mut ids = Vec::new();
        for info in streams {
            ids.push(self.hub.register_stream(session, info.clone())?);
        }
        let offset = self.cfg.offsets.get(source_id).copied().unwrap_or(0.0);
        self.sources.push(LocalSource { session, offset, next_ping: self.t });
        let idx = self.sources.len() - 1;
        // first exchange right after the handshake
        self.probe(idx, self.hub_time(self.t))?;
        self.sources[idx].next_ping = self.t + self.cfg.ping_interval;
        self.drain()?;
        Ok(SourceHandle { index: idx, stream_ids: ids })
    }

    fn producer_time(&self, src: &SourceHandle, t: f64) -> f64 {
        self.hub_time(t) - self.sources[src.index].offset
    }

    fn advance(&mut self, t: f64) -> Result<(), ExperimentError> {
        if t < self.t {
            return Ok(());
        }
        for i in 0..self.sources.len() {
            while self.sources[i].next_ping <= t {
                let at = self.sources[i].next_ping;
                self.clock.set(self.hub_time(at));
                self.probe(i, self.hub_time(at))?;
                self.sources[i].next_ping += self.cfg.ping_interval;
            }
        }
        self.t = t;
        self.clock.set(self.hub_time(t));
        self.drain()
    }

    fn push(&mut self, src: &SourceHandle, stream: usize, samples: Vec<Sample>) -> Result<(), ExperimentError> {
        let s = &self.sources[src.index];
        self.hub.route_chunk(s.session, src.stream_ids[stream], samples)?;
        self.drain()
    }

    fn marker(&mut self, src: &SourceHandle, label: &str, origin: MarkerOrigin, raw_t: f64) -> Result<(), ExperimentError> {
        let s = &self.sources[src.index];
        self.hub.inject_marker(MarkerSource::Session(s.session), label, origin, Some(raw_t))?;
        self.drain()
    }

    fn set_metadata(&mut self, key: &str, value: Value) -> Result<(), ExperimentError> {
        self.hub.set_metadata(key, value);
        self.drain()
    }

    fn finish(&mut self) -> Result<Option<Recording>, ExperimentError> {
        match self.finish_bytes()? {
            Some(bytes) => Ok(Some(read_recording(&bytes)?)),
            None => Ok(None),
        }
    }
}

// ---------------------------------------------------------------------------
// Compliance

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub count: usize,
    pub first: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl StreamSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let first = *values.first()?;
        let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for v in values {
            min = min.min(*v);
            max = max.max(*v);
            sum += v;
        }
        Some(StreamSummary { count: values.len(), first, min, max, mean: sum / values.len() as f64 })
    }

    /// Rise above the window's first value.
    pub fn phasic_amplitude(&self) -> f64 {
        self.max - self.first
    }
}

pub type EpochFeatures = BTreeMap<String, StreamSummary>;

/// Maps recent physiological features to a robot speed scale in (0, 1].
pub trait ComplianceHook {
    fn speed_scale(&mut self, features: &EpochFeatures) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplianceConfig {
    #[serde(default)]
    pub enabled: bool,
    /// µS of phasic rise that counts as a response.
    #[serde(default = "default_gsr_threshold")]
    pub gsr_threshold: f64,
    /// Seconds after "Robot approaching" that are inspected.
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default = "default_reduced_scale")]
    pub reduced_scale: f64,
    /// When set, every "Robot approaching" schedules an SCR of this
    /// magnitude on the simulated GSR after `coupling_latency`.
    #[serde(default)]
    pub coupling_magnitude: Option<f64>,
    #[serde(default = "default_coupling_latency")]
    pub coupling_latency: f64,
}

fn default_gsr_threshold() -> f64 {
    0.1
}
fn default_window() -> f64 {
    3.0
}
fn default_reduced_scale() -> f64 {
    0.5
}
fn default_coupling_latency() -> f64 {
    0.5
}

impl Default for ComplianceConfig {
    fn default() -> Self {
        ComplianceConfig {
            enabled: false,
            gsr_threshold: default_gsr_threshold(),
            window: default_window(),
            reduced_scale: default_reduced_scale(),
            coupling_magnitude: None,
            coupling_latency: default_coupling_latency(),
        }
    }
}

/// Halves the speed when the GSR rose past the threshold after the last
/// approach.
#[derive(Debug, Clone, Copy)]
pub struct DefaultCompliance {
    pub gsr_threshold: f64,
    pub reduced_scale: f64,
}

impl Default for DefaultCompliance {
    fn default() -> Self {
        DefaultCompliance { gsr_threshold: default_gsr_threshold(), reduced_scale: default_reduced_scale() }
    }
}

impl ComplianceHook for DefaultCompliance {
    fn speed_scale(&mut self, features: &EpochFeatures) -> f64 {
        match features.get("gsr") {
            Some(s) if s.phasic_amplitude() > self.gsr_threshold => self.reduced_scale,
            _ => 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Shared scenario plumbing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedMarker {
    pub t: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotTraceSample {
    pub t: f64,
    pub q: JointConfig,
    /// Largest joint speed, deg/s.
    pub speed_deg: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct RobotState {
    q: JointConfig,
    qd: JointConfig,
    scale: f64,
}

fn robot_stream(dof: usize, rate: f64) -> StreamInfo {
    let mut chans: Vec<String> = (1..=dof).map(|i| format!("q{i}")).collect();
    chans.push("speed".into());
    chans.push("scale".into());
    let refs: Vec<&str> = chans.iter().map(String::as_str).collect();
    StreamInfo::numeric("joints", ROBOT_SOURCE, rate, &refs, "rad")
}

fn twin_stream(rate: f64) -> StreamInfo {
    StreamInfo::numeric("separation", TWIN_SOURCE, rate, &["zone", "distance", "directed_speed"], "m")
}

struct World<'l> {
    link: &'l mut dyn ExperimentLink,
    dt: f64,
    next_tick: u64,
    t: f64,
    orch: SourceHandle,
    robot: SourceHandle,
    twin: Option<SourceHandle>,
    devices: Vec<(SourceHandle, DeviceSim)>,
    gsr_history: Vec<(f64, f64)>,
    markers: Vec<LoggedMarker>,
    trace: Vec<RobotTraceSample>,
    max_duration: f64,
}

impl<'l> World<'l> {
    fn new(
        link: &'l mut dyn ExperimentLink,
        dof: usize,
        rate: f64,
        devices: &[DeviceConfig],
        with_twin: bool,
        max_duration: f64,
    ) -> Result<Self, ExperimentError> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(ExperimentError::Config(format!("robot rate must be positive, got {rate}")));
        }
        let orch = link.open_source(ORCHESTRATOR_SOURCE, &[])?;
        let robot = link.open_source(ROBOT_SOURCE, &[robot_stream(dof, rate)])?;
        let twin = if with_twin { Some(link.open_source(TWIN_SOURCE, &[twin_stream(rate)])?) } else { None };
        let mut sims = Vec::new();
        for d in devices {
            let h = link.open_source(&d.source_id, &[d.stream_info()])?;
            let t0 = link.producer_time(&h, 0.0);
            sims.push((h, DeviceSim::new(d.clone(), t0)?));
        }
        Ok(World {
            link,
            dt: 1.0 / rate,
            next_tick: 0,
            t: 0.0,
            orch,
            robot,
            twin,
            devices: sims,
            gsr_history: Vec::new(),
            markers: Vec::new(),
            trace: Vec::new(),
            max_duration,
        })
    }

    fn next_tick_time(&self) -> f64 {
        self.next_tick as f64 * self.dt
    }

    fn marker(&mut self, label: &str) -> Result<(), ExperimentError> {
        let raw = self.link.producer_time(&self.orch, self.t);
        self.link.marker(&self.orch, label, MarkerOrigin::Auto, raw)?;
        self.markers.push(LoggedMarker { t: self.t, label: label.to_string() });
        Ok(())
    }

    /// Emits one tick at the next grid time with the given robot state.
    fn tick(&mut self, robot: &RobotState, twin_row: Option<[f32; 3]>) -> Result<f64, ExperimentError> {
        let tt = self.next_tick_time();
        if tt > self.max_duration {
            return Err(ExperimentError::Timeout(self.max_duration));
        }
        self.link.advance(tt)?;
        for (h, sim) in &mut self.devices {
            let until = self.link.producer_time(h, tt) + 1e-9;
            let samples = sim.samples_until(until);
            if samples.is_empty() {
                continue;
            }
            if sim.cfg.kind == DeviceKind::Gsr && self.gsr_history.len() < usize::MAX {
                let t0 = self.link.producer_time(h, 0.0);
                self.gsr_history.extend(samples.iter().map(|s| (s.raw_timestamp - t0, s.values[0] as f64)));
            }
            self.link.push(h, 0, samples)?;
        }
        let speed_deg = robot.qd.iter().map(|v| v.abs().to_degrees()).fold(0.0, f64::max);
        let mut vals: Vec<f32> = robot.q.iter().map(|v| *v as f32).collect();
        vals.push(speed_deg as f32);
        vals.push(robot.scale as f32);
        let raw = self.link.producer_time(&self.robot, tt);
        let robot_h = self.robot.clone();
        self.link.push(&robot_h, 0, vec![Sample::new(raw, vals)])?;
        if let (Some(h), Some(row)) = (self.twin.clone(), twin_row) {
            let raw = self.link.producer_time(&h, tt);
            self.link.push(&h, 0, vec![Sample::new(raw, row.to_vec())])?;
        }
        self.trace.push(RobotTraceSample { t: tt, q: robot.q.clone(), speed_deg, scale: robot.scale });
        self.next_tick += 1;
        self.t = tt;
        Ok(tt)
    }

    /// Ticks through every grid time up to `t`, then sits at `t`.
    fn advance_to(&mut self, t: f64, robot: &dyn Fn(f64) -> RobotState) -> Result<(), ExperimentError> {
        while self.next_tick_time() <= t + 1e-9 {
            let tt = self.next_tick_time();
            self.tick(&robot(tt), None)?;
        }
        if t > self.max_duration {
            return Err(ExperimentError::Timeout(self.max_duration));
        }
        self.t = self.t.max(t);
        self.link.advance(self.t)
    }

    fn add_gsr_event(&mut self, ev: StimulusEvent) {
        for (_, sim) in &mut self.devices {
            if sim.cfg.kind == DeviceKind::Gsr {
                sim.cfg.events.push(ev);
            }
        }
    }

    fn gsr_features_since(&self, start: f64, end: f64) -> EpochFeatures {
        let vals: Vec<f64> =
            self.gsr_history.iter().filter(|(t, _)| *t >= start && *t <= end).map(|(_, v)| *v).collect();
        let mut out = EpochFeatures::new();
        if let Some(s) = StreamSummary::of(&vals) {
            out.insert("gsr".into(), s);
        }
        out
    }
}

pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Three-joint arm: base yaw, shoulder, elbow. A generic test geometry.
pub fn default_arm() -> KinematicModel {
    KinematicModel {
        joints: vec![
            DhJoint { a: 0.0, alpha: PI / 2.0, d: 0.4, theta_offset: 0.0 },
            DhJoint { a: 0.5, alpha: 0.0, d: 0.0, theta_offset: 0.0 },
            DhJoint { a: 0.4, alpha: 0.0, d: 0.0, theta_offset: 0.0 },
        ],
        base: BasePose::default(),
        tool: None,
    }
}

fn tool_point(model: &KinematicModel, q: &[f64]) -> Result<Vec3, ExperimentError> {
    Ok(*twin::forward_kinematics(model, q)?.last().expect("model has joints"))
}

// ---------------------------------------------------------------------------
// Case I

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReloadStrategy {
    /// The subject reloads once the robot is back home.
    Wait,
    /// The subject reloads as soon as the plate is empty.
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOneConfig {
    #[serde(rename = "task_id")]
    pub task: Task,
    #[serde(default = "default_inserts")]
    pub insert_count: u32,
    #[serde(default = "default_poll")]
    pub poll_period: f64,
    #[serde(default)]
    pub subject_id: String,
    #[serde(default = "default_experiment_id")]
    pub experiment_id: String,
    #[serde(default)]
    pub seed: u64,
    /// Plate loads per task.
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_load_latency")]
    pub load_latency: f64,
    #[serde(default = "default_reload")]
    pub reload: ReloadStrategy,
    #[serde(default)]
    pub limits: MotionLimits,
    #[serde(default = "default_arm")]
    pub robot: KinematicModel,
    #[serde(default = "default_home")]
    pub home: JointConfig,
    /// Insert position on the plate.
    #[serde(default = "default_pick")]
    pub pick: JointConfig,
    /// Drop position in the box.
    #[serde(default = "default_place")]
    pub place: JointConfig,
    #[serde(default = "default_planes")]
    pub planes: Vec<Vec<JointConfig>>,
    /// Centre of the subject's working area, metres.
    #[serde(default = "default_human_region")]
    pub human_region: [f64; 3],
    #[serde(default = "default_dwell")]
    pub dwell: f64,
    #[serde(default = "default_robot_rate")]
    pub robot_rate: f64,
    #[serde(default = "default_case1_devices")]
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub compliance: ComplianceConfig,
    #[serde(default = "default_max_duration")]
    pub max_duration: f64,
}

fn default_inserts() -> u32 {
    8
}
fn default_poll() -> f64 {
    PING_INTERVAL_S
}
fn default_experiment_id() -> String {
    "case1".into()
}
fn default_rounds() -> u32 {
    1
}
fn default_load_latency() -> f64 {
    12.0
}
fn default_reload() -> ReloadStrategy {
    ReloadStrategy::Wait
}
fn default_home() -> JointConfig {
    vec![-2.6, 0.6, -0.9]
}
fn default_pick() -> JointConfig {
    vec![0.0, -0.3, 0.3]
}
fn default_place() -> JointConfig {
    vec![-PI / 2.0, -0.3, 0.3]
}
fn default_planes() -> Vec<Vec<JointConfig>> {
    (1..=3)
        .map(|i| {
            let yaw = -PI / 2.0 * i as f64 / 4.0;
            [(0.2, -0.4), (0.5, -0.8), (0.0, 0.0), (0.8, -1.2)]
                .iter()
                .map(|(s, e)| vec![yaw, *s, *e])
                .collect()
        })
        .collect()
}
fn default_human_region() -> [f64; 3] {
    [1.2, 0.0, 0.8]
}
fn default_dwell() -> f64 {
    0.5
}
fn default_robot_rate() -> f64 {
    50.0
}
fn default_max_duration() -> f64 {
    3600.0
}
fn default_case1_devices() -> Vec<DeviceConfig> {
    vec![
        DeviceConfig::new(DeviceKind::Gsr, "gsr"),
        DeviceConfig::new(DeviceKind::Ppg, "ppg"),
        DeviceConfig::new(DeviceKind::Ecg, "ecg"),
    ]
}

impl CaseOneConfig {
    pub fn new(task: Task, subject_id: &str) -> Self {
        CaseOneConfig {
            task,
            insert_count: default_inserts(),
            poll_period: default_poll(),
            subject_id: subject_id.into(),
            experiment_id: default_experiment_id(),
            seed: 0,
            rounds: default_rounds(),
            load_latency: default_load_latency(),
            reload: default_reload(),
            limits: MotionLimits::default(),
            robot: default_arm(),
            home: default_home(),
            pick: default_pick(),
            place: default_place(),
            planes: default_planes(),
            human_region: default_human_region(),
            dwell: default_dwell(),
            robot_rate: default_robot_rate(),
            devices: default_case1_devices(),
            compliance: ComplianceConfig::default(),
            max_duration: default_max_duration(),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.insert_count == 0 {
            return bad("insert_count must be positive".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be positive".into());
        }
        if !(self.poll_period > 0.0) {
            return bad("poll_period must be positive".into());
        }
        if !(self.load_latency >= 0.0 && self.dwell >= 0.0) {
            return bad("load_latency and dwell must be non-negative".into());
        }
        self.limits.validate()?;
        self.robot.validate()?;
        let dof = self.robot.dof();
        let configs = [&self.home, &self.pick, &self.place];
        if configs.iter().any(|c| c.len() != dof) || self.planes.iter().flatten().any(|c| c.len() != dof) {
            return bad(format!("joint configurations must have {dof} entries"));
        }
        Ok(())
    }
}

/// Plate with the master pin: inserts become available once the subject
/// has finished loading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plate {
    pub inserts: u32,
    pub ready_at: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PinState {
    Loaded,
    Empty,
}

impl Plate {
    pub fn loaded_at(inserts: u32, t: f64) -> Self {
        Plate { inserts, ready_at: Some(t) }
    }

    pub fn empty() -> Self {
        Plate { inserts: 0, ready_at: None }
    }
}

pub fn master_pin_poll(plate: &Plate, t: f64) -> PinState {
    match plate.ready_at {
        Some(r) if plate.inserts > 0 && r <= t => PinState::Loaded,
        _ => PinState::Empty,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseOneReport {
    pub task: Task,
    pub acceleration: AccelMode,
    pub trajectory: TrajectoryMode,
    pub markers: Vec<LoggedMarker>,
    pub polls: Vec<f64>,
    /// Speed scale applied to each motion segment, in order.
    pub segment_scales: Vec<f64>,
    /// Acceleration limit of each motion segment, deg/s².
    pub segment_accels: Vec<f64>,
    pub robot_trace: Vec<RobotTraceSample>,
    pub duration: f64,
}

impl CaseOneReport {
    pub fn max_speed_deg(&self) -> f64 {
        self.robot_trace.iter().map(|s| s.speed_deg).fold(0.0, f64::max)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.markers.iter().map(|m| m.label.as_str()).collect()
    }
}

/// Segments laid out on experiment time; the robot rests between them.
struct Timeline {
    rest: JointConfig,
    segs: Vec<(f64, SegmentMotion, f64)>,
}

impl Timeline {
    fn state(&self, t: f64) -> RobotState {
        let idx = self.segs.partition_point(|(s, _, _)| *s <= t);
        if idx == 0 {
            return RobotState { q: self.rest.clone(), qd: vec![0.0; self.rest.len()], scale: 1.0 };
        }
        let (start, seg, scale) = &self.segs[idx - 1];
        let (q, qd) = seg.eval(t - start);
        RobotState { q, qd, scale: *scale }
    }
}

struct CaseOne<'a, 'l> {
    cfg: &'a CaseOneConfig,
    world: World<'l>,
    tl: Timeline,
    q: JointConfig,
    hook: &'a mut dyn ComplianceHook,
    scales: Vec<f64>,
    accels: Vec<f64>,
    polls: Vec<f64>,
}

impl CaseOne<'_, '_> {
    fn wait(&mut self, until: f64) -> Result<(), ExperimentError> {
        let tl = &self.tl;
        self.world.advance_to(until, &|t| tl.state(t))
    }

    fn consult(&mut self) -> f64 {
        if !self.cfg.compliance.enabled {
            return 1.0;
        }
        let last = self.world.markers.iter().rev().find(|m| m.label == labels::ROBOT_APPROACHING).map(|m| m.t);
        let features = match last {
            Some(ta) => self.world.gsr_features_since(ta, (ta + self.cfg.compliance.window).min(self.world.t)),
            None => EpochFeatures::new(),
        };
        let s = self.hook.speed_scale(&features);
        if s.is_finite() { s.clamp(0.05, 1.0) } else { 1.0 }
    }

    /// One motion through `waypoints` starting from the current pose.
    fn motion(&mut self, waypoints: &[JointConfig], accels: &[f64]) -> Result<(), ExperimentError> {
        let start = tool_point(&self.cfg.robot, &self.q)?;
        let end = tool_point(&self.cfg.robot, waypoints.last().expect("non-empty motion"))?;
        let region = Vec3::from(self.cfg.human_region);
        if (end - region).norm() < (start - region).norm() {
            self.world.marker(labels::ROBOT_APPROACHING)?;
            if let Some(m) = self.cfg.compliance.coupling_magnitude {
                self.world.add_gsr_event(StimulusEvent { at: self.world.t + self.cfg.compliance.coupling_latency, magnitude: m });
            }
        }
        for (to, a) in waypoints.iter().zip(accels) {
            let scale = self.consult();
            let seg = SegmentMotion::new(&self.q, to, self.cfg.limits.v_max * scale, *a)?;
            let t0 = self.world.t;
            let end = t0 + seg.duration();
            self.tl.segs.push((t0, seg, scale));
            self.scales.push(scale);
            self.accels.push(*a);
            self.wait(end)?;
            self.q = to.clone();
        }
        self.tl.rest = self.q.clone();
        Ok(())
    }

    fn run(&mut self) -> Result<(), ExperimentError> {
        let cfg = self.cfg;
        let n = cfg.task.id();
        let accel = match cfg.task.acceleration() {
            AccelMode::High => cfg.limits.a_high,
            _ => cfg.limits.a_normal,
        };
        self.world.marker(labels::EXPERIMENT_START)?;
        self.world.marker(&labels::task_init(n))?;
        let mut plate = Plate::loaded_at(cfg.insert_count, cfg.load_latency);
        let mut polls = Vec::new();
        let mut started = false;
        let mut cycle = 0u64;
        for round in 0..cfg.rounds {
            let mut k = ((self.world.t / cfg.poll_period) - 1e-9).ceil().max(0.0) as u64;
            loop {
                let tp = k as f64 * cfg.poll_period;
                self.wait(tp)?;
                polls.push(tp);
                if master_pin_poll(&plate, tp) == PinState::Loaded {
                    self.world.marker(labels::PICKUP_SUCCESSFUL)?;
                    break;
                }
                self.world.marker(labels::PICKUP_FAILED)?;
                k += 1;
            }
            if !started {
                self.world.marker(&labels::task_start(n))?;
                started = true;
            }
            let last_round = round + 1 == cfg.rounds;
            for _ in 0..cfg.insert_count {
                self.motion(&[cfg.pick.clone()], &[accel])?;
                let t = self.world.t + cfg.dwell;
                self.wait(t)?;
                plate.inserts = plate.inserts.saturating_sub(1);
                if plate.inserts == 0 {
                    plate.ready_at = None;
                    if !last_round && cfg.reload == ReloadStrategy::Concurrent {
                        plate = Plate::loaded_at(cfg.insert_count, self.world.t + cfg.load_latency);
                    }
                }
                let plan = plan_trajectory(
                    &cfg.pick,
                    &cfg.place,
                    &cfg.planes,
                    cfg.task.trajectory(),
                    cfg.task.acceleration(),
                    &cfg.limits,
                    cfg.seed.wrapping_add(cycle),
                )?;
                cycle += 1;
                self.motion(&plan.waypoints[1..], &plan.a_max)?;
                let t = self.world.t + cfg.dwell;
                self.wait(t)?;
            }
            self.motion(&[cfg.home.clone()], &[accel])?;
            if !last_round && cfg.reload == ReloadStrategy::Wait {
                plate = Plate::loaded_at(cfg.insert_count, self.world.t + cfg.load_latency);
            }
        }
        // one trailing tick so the final rest pose is on record
        let t = self.world.next_tick_time();
        self.wait(t)?;
        self.world.marker(&labels::task_end(n))?;
        self.world.marker(labels::EXPERIMENT_END)?;
        self.polls = polls;
        Ok(())
    }
}


/// Runs Case I on `link`. The hook is consulted before every motion segment
/// when compliance is enabled; `None` uses [`DefaultCompliance`].
pub fn run_case1(
    cfg: &CaseOneConfig,
    link: &mut dyn ExperimentLink,
    hook: Option<&mut dyn ComplianceHook>,
) -> Result<CaseOneReport, ExperimentError> {
    cfg.validate()?;
    let mut default_hook = DefaultCompliance {
        gsr_threshold: cfg.compliance.gsr_threshold,
        reduced_scale: cfg.compliance.reduced_scale,
    };
    let hook = hook.unwrap_or(&mut default_hook);
    let world = World::new(link, cfg.robot.dof(), cfg.robot_rate, &cfg.devices, false, cfg.max_duration)?;
    let mut case = CaseOne {
        cfg,
        world,
        tl: Timeline { rest: cfg.home.clone(), segs: Vec::new() },
        q: cfg.home.clone(),
        hook,
        scales: Vec::new(),
        accels: Vec::new(),
        polls: Vec::new(),
    };
    case.run()?;
    let duration = case.world.t;
    let meta = [
        ("experiment_id", json!(cfg.experiment_id)),
        ("subject_id", json!(cfg.subject_id)),
        ("config_hash", json!(config_hash(cfg))),
        ("case", json!("case1")),
        ("task", json!(cfg.task.id())),
        ("acceleration", json!(cfg.task.acceleration())),
        ("trajectory", json!(cfg.task.trajectory())),
        ("duration_s", json!(duration)),
        ("polls", json!(case.polls.len())),
    ];
    for (k, v) in meta {
        case.world.link.set_metadata(k, v)?;
    }
    Ok(CaseOneReport {
        task: cfg.task,
        acceleration: cfg.task.acceleration(),
        trajectory: cfg.task.trajectory(),
        markers: case.world.markers,
        polls: case.polls,
        segment_scales: case.scales,
        segment_accels: case.accels,
        robot_trace: case.world.trace,
        duration,
    })
}

// ---------------------------------------------------------------------------
// Case II

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTwoConfig {
    #[serde(default = "default_products")]
    pub product_count: u32,
    /// Base joint rotation per transfer, radians.
    #[serde(default = "default_base_rotation")]
    pub base_rotation: f64,
    #[serde(default)]
    pub ssm: SsmConfig,
    /// Subtracted from the geometric separation before zoning, metres.
    #[serde(default)]
    pub inflation_radius: f64,
    #[serde(default = "default_far_human")]
    pub human: MocapScript,
    #[serde(default)]
    pub subject_id: String,
    #[serde(default = "default_experiment_id2")]
    pub experiment_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub limits: MotionLimits,
    #[serde(default = "default_accel_mode")]
    pub acceleration: AccelMode,
    #[serde(default = "default_arm")]
    pub robot: KinematicModel,
    #[serde(default = "default_pick")]
    pub pick: JointConfig,
    /// Speed scale while in the Reduced zone.
    #[serde(default = "default_reduced_scale")]
    pub reduced_scale: f64,
    #[serde(default = "default_dwell")]
    pub dwell: f64,
    #[serde(default = "default_robot_rate")]
    pub rate: f64,
    #[serde(default = "default_case2_devices")]
    pub devices: Vec<DeviceConfig>,
    #[serde(default = "default_case2_max")]
    pub max_duration: f64,
}

fn default_products() -> u32 {
    10
}
fn default_base_rotation() -> f64 {
    PI
}
fn default_far_human() -> MocapScript {
    MocapScript::stationary([0.0, 4.0, 1.0])
}
fn default_experiment_id2() -> String {
    "case2".into()
}
fn default_accel_mode() -> AccelMode {
    AccelMode::Normal
}
fn default_case2_devices() -> Vec<DeviceConfig> {
    vec![DeviceConfig::new(DeviceKind::Mocap, "mocap"), DeviceConfig::new(DeviceKind::Gsr, "gsr")]
}
fn default_case2_max() -> f64 {
    600.0
}

/// Subject walks from far away into the robot's sweep, holds, then leaves.
pub fn crossing_human() -> MocapScript {
    let far = [0.0, 3.5, 0.9];
    let near = [0.0, 0.45, 0.9];
    MocapScript {
        segments: vec![
            sim::MoveSegment { start: 0.0, from: far, to: far, speed: 1.0 },
            sim::MoveSegment { start: 8.0, from: far, to: near, speed: 1.0 },
            sim::MoveSegment { start: 16.0, from: near, to: far, speed: 1.0 },
        ],
    }
}

impl CaseTwoConfig {
    pub fn new(subject_id: &str) -> Self {
        CaseTwoConfig {
            product_count: default_products(),
            base_rotation: default_base_rotation(),
            ssm: SsmConfig::default(),
            inflation_radius: 0.0,
            human: default_far_human(),
            subject_id: subject_id.into(),
            experiment_id: default_experiment_id2(),
            seed: 0,
            limits: MotionLimits::default(),
            acceleration: default_accel_mode(),
            robot: default_arm(),
            pick: default_pick(),
            reduced_scale: default_reduced_scale(),
            dwell: default_dwell(),
            rate: default_robot_rate(),
            devices: default_case2_devices(),
            max_duration: default_case2_max(),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.into()));
        if self.product_count == 0 {
            return bad("product_count must be at least 1");
        }
        if !self.base_rotation.is_finite() {
            return bad("base_rotation must be finite");
        }
        if !(self.reduced_scale > 0.0 && self.reduced_scale <= 1.0) {
            return bad("reduced_scale must lie in (0, 1]");
        }
        if self.pick.len() != self.robot.dof() {
            return bad("pick configuration does not match the robot");
        }
        self.limits.validate()?;
        self.ssm.validate()?;
        self.robot.validate()?;
        self.human.validate()?;
        Ok(())
    }

    pub fn place(&self) -> JointConfig {
        let mut q = self.pick.clone();
        q[0] += self.base_rotation;
        q
    }

    fn accel(&self) -> f64 {
        match self.acceleration {
            AccelMode::High => self.limits.a_high,
            _ => self.limits.a_normal,
        }
    }

    /// Task duration with the robot never slowed.
    pub fn baseline_duration(&self) -> Result<f64, ExperimentError> {
        let go = SegmentMotion::new(&self.pick, &self.place(), self.limits.v_max, self.accel())?.duration();
        let n = self.product_count as f64;
        Ok(n * (go + self.dwell) + (n - 1.0) * (go + self.dwell))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseTwoReport {
    pub markers: Vec<LoggedMarker>,
    pub place_events: Vec<f64>,
    pub duration: f64,
    pub baseline_duration: f64,
    pub zones: Vec<(f64, Zone, f64)>,
    pub robot_trace: Vec<RobotTraceSample>,
}

impl CaseTwoReport {
    pub fn labels(&self) -> Vec<&str> {
        self.markers.iter().map(|m| m.label.as_str()).collect()
    }

    pub fn min_distance(&self) -> f64 {
        self.zones.iter().map(|z| z.2).fold(f64::INFINITY, f64::min)
    }
}

struct CaseTwo<'a, 'l> {
    cfg: &'a CaseTwoConfig,
    world: World<'l>,
    twin: DigitalTwin,
    scale: f64,
    zones: Vec<(f64, Zone, f64)>,
}

impl CaseTwo<'_, '_> {
    fn step(&mut self, q: &[f64], qd: &[f64]) -> Result<(), ExperimentError> {
        let tt = self.world.next_tick_time();
        let human: Vec<Vec3> = sim::gen_mocap(tt, &self.cfg.human)?.into_iter().map(|(_, p)| p).collect();
        let up = self.twin.update(tt, q, &human)?;
        let robot = RobotState { q: q.to_vec(), qd: qd.iter().map(|v| v * self.scale).collect(), scale: self.scale };
        let row = [up.state.zone.code(), up.effective_distance as f32, up.state.directed_speed as f32];
        self.world.tick(&robot, Some(row))?;
        for m in &up.markers {
            self.world.marker(m)?;
        }
        self.zones.push((tt, up.state.zone, up.effective_distance));
        self.scale = match up.state.zone {
            Zone::Normal => 1.0,
            Zone::Reduced => self.cfg.reduced_scale,
            Zone::Stop => 0.0,
        };
        Ok(())
    }

    fn transfer(&mut self, seg: &SegmentMotion) -> Result<(), ExperimentError> {
        let dur = seg.duration();
        let mut tau = 0.0;
        loop {
            let (q, qd) = seg.eval(tau);
            self.step(&q, &qd)?;
            if tau >= dur {
                return Ok(());
            }
            tau = (tau + self.scale * self.world.dt).min(dur);
        }
    }

    fn dwell(&mut self, q: &[f64]) -> Result<(), ExperimentError> {
        let end = self.world.t + self.cfg.dwell;
        let zero = vec![0.0; q.len()];
        while self.world.next_tick_time() <= end + 1e-9 {
            self.step(q, &zero)?;
        }
        Ok(())
    }
}

pub fn run_case2(cfg: &CaseTwoConfig, link: &mut dyn ExperimentLink) -> Result<CaseTwoReport, ExperimentError> {
    cfg.validate()?;
    let mut devices = cfg.devices.clone();
    for d in &mut devices {
        if d.kind == DeviceKind::Mocap && d.script.is_none() {
            d.script = Some(cfg.human.clone());
        }
    }
    let twin = DigitalTwin::new(cfg.robot.clone(), cfg.ssm, cfg.inflation_radius)?;
    let world = World::new(link, cfg.robot.dof(), cfg.rate, &devices, true, cfg.max_duration)?;
    let mut case = CaseTwo { cfg, world, twin, scale: 1.0, zones: Vec::new() };
    let pick = cfg.pick.clone();
    let place = cfg.place();
    let a = cfg.accel();
    let go = SegmentMotion::new(&pick, &place, cfg.limits.v_max, a)?;
    let back = SegmentMotion::new(&place, &pick, cfg.limits.v_max, a)?;
    let mut places = Vec::new();
    case.world.marker(labels::EXPERIMENT_START)?;
    for i in 0..cfg.product_count {
        case.transfer(&go)?;
        places.push(case.world.t);
        case.dwell(&place)?;
        if i + 1 < cfg.product_count {
            case.transfer(&back)?;
            case.dwell(&pick)?;
        }
    }
    case.world.marker(labels::EXPERIMENT_END)?;
    let duration = case.world.t;
    let baseline = cfg.baseline_duration()?;
    let meta = [
        ("experiment_id", json!(cfg.experiment_id)),
        ("subject_id", json!(cfg.subject_id)),
        ("config_hash", json!(config_hash(cfg))),
        ("case", json!("case2")),
        ("duration_s", json!(duration)),
        ("baseline_duration_s", json!(baseline)),
        ("place_events", json!(places.len())),
    ];
    for (k, v) in meta {
        case.world.link.set_metadata(k, v)?;
    }
    Ok(CaseTwoReport {
        markers: case.world.markers,
        place_events: places,
        duration,
        baseline_duration: baseline,
        zones: case.zones,
        robot_trace: case.world.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epoch::{correct_recording, export_epochs, extract_epochs};
    use crate::model::{is_catalog_label, MarkerOrigin};

    fn link() -> LocalLink {
        let mut offsets = BTreeMap::new();
        offsets.insert("gsr".to_string(), 0.05);
        offsets.insert("ecg".to_string(), -0.12);
        offsets.insert("robot".to_string(), 0.3);
        offsets.insert(ORCHESTRATOR_SOURCE.to_string(), 0.02);
        LocalLink::new(LocalLinkConfig { offsets, jitter: 0.005, seed: 7, ..Default::default() }).unwrap()
    }

    fn quick1(task: Task) -> CaseOneConfig {
        let mut c = CaseOneConfig::new(task, "S01");
        c.devices = vec![DeviceConfig::new(DeviceKind::Gsr, "gsr")];
        c
    }

    #[test]
    fn table_one_mapping() {
        let pairs: Vec<_> = Task::ALL.iter().map(|t| (t.id(), t.acceleration(), t.trajectory())).collect();
        assert_eq!(
            pairs,
            vec![
                (1, AccelMode::Normal, TrajectoryMode::Fixed),
                (2, AccelMode::High, TrajectoryMode::Fixed),
                (3, AccelMode::Normal, TrajectoryMode::Random),
                (4, AccelMode::High, TrajectoryMode::Random),
            ]
        );
        assert!(matches!(Task::try_from(5), Err(ExperimentError::BadTask(5))));
        assert!(serde_json::from_str::<CaseOneConfig>(r#"{"task_id": 5}"#).is_err());
        let c: CaseOneConfig = serde_json::from_str(r#"{"task_id": 3, "subject_id": "S9"}"#).unwrap();
        assert_eq!(c.task, Task::Three);
        assert_eq!(c.insert_count, 8);
    }

    #[test]
    fn master_pin() {
        assert_eq!(master_pin_poll(&Plate::loaded_at(8, 0.0), 0.0), PinState::Loaded);
        assert_eq!(master_pin_poll(&Plate::empty(), 100.0), PinState::Empty);
        assert_eq!(master_pin_poll(&Plate::loaded_at(8, 12.0), 10.0), PinState::Empty);
    }

    #[test]
    fn first_loaded_poll_after_loading() {
        let mut l = link();
        let r = run_case1(&quick1(Task::One), &mut l, None).unwrap();
        assert_eq!(&r.polls[..4], &[0.0, 5.0, 10.0, 15.0]);
        let labels = r.labels();
        assert_eq!(
            &labels[..7],
            &["Experiment start", "Task 1 init", "Pick up failed", "Pick up failed", "Pick up failed", "Pick up successful", "Task 1 start"]
        );
    }

    #[test]
    fn case1_marker_log() {
        let mut l = link();
        let r = run_case1(&quick1(Task::Two), &mut l, None).unwrap();
        let labels = r.labels();
        assert_eq!(labels[0], "Experiment start");
        assert_eq!(labels[1], "Task 2 init");
        assert_eq!(&labels[labels.len() - 2..], &["Task 2 end", "Experiment end"]);
        assert_eq!(labels.iter().filter(|l| **l == "Robot approaching").count(), 8);
        assert!(labels.iter().all(|l| is_catalog_label(l)));
        assert!(r.segment_accels.iter().all(|a| *a == A_HIGH));
        assert!(r.max_speed_deg() <= 100.0 + 1e-9);
        assert!(r.max_speed_deg() > 99.0);

        let rec = l.finish().unwrap().unwrap();
        assert_eq!(rec.footer.metadata["task"], json!(2));
        assert_eq!(rec.footer.metadata["trajectory"], json!("fixed"));
        let c = correct_recording(&rec).unwrap();
        assert_eq!(c.markers.first().unwrap().label, "Experiment start");
        assert_eq!(c.markers.last().unwrap().label, "Experiment end");
        assert!(c.markers.iter().all(|m| m.origin == MarkerOrigin::Auto));
    }

    const A_HIGH: f64 = sim::A_HIGH_DEG;

    #[test]
    fn random_tasks_take_waypoints() {
        let mut l = link();
        let r = run_case1(&quick1(Task::Three), &mut l, None).unwrap();
        // approach + 4 transfer segments per insert, plus the final return
        assert_eq!(r.segment_accels.len(), 8 * 5 + 1);
        assert!(r.segment_accels.iter().all(|a| *a == sim::A_NORMAL_DEG));
    }

    #[test]
    fn concurrent_reload_shortens_waiting() {
        let mut wait = quick1(Task::One);
        wait.rounds = 2;
        wait.insert_count = 3;
        let mut conc = wait.clone();
        conc.reload = ReloadStrategy::Concurrent;
        let a = run_case1(&wait, &mut link(), None).unwrap();
        let b = run_case1(&conc, &mut link(), None).unwrap();
        assert!(b.duration < a.duration);
        for r in [&a, &b] {
            assert_eq!(r.labels().iter().filter(|l| **l == "Pick up successful").count(), 2);
            assert_eq!(r.labels().iter().filter(|l| **l == "Task 1 start").count(), 1);
            assert!(r.polls.iter().all(|p| (p / 5.0 - (p / 5.0).round()).abs() < 1e-9));
        }
    }

    #[test]
    fn compliance_default_rule() {
        let mut h = DefaultCompliance::default();
        assert_eq!(h.speed_scale(&EpochFeatures::new()), 1.0);
        let mut f = EpochFeatures::new();
        f.insert("gsr".into(), StreamSummary::of(&[2.0, 2.05, 2.3]).unwrap());
        assert_eq!(h.speed_scale(&f), 0.5);
        f.insert("gsr".into(), StreamSummary::of(&[2.0, 2.05]).unwrap());
        assert_eq!(h.speed_scale(&f), 1.0);
    }

    #[test]
    fn coupled_subject_slows_robot() {
        let mut c = quick1(Task::One);
        c.compliance = ComplianceConfig { enabled: true, coupling_magnitude: Some(0.5), ..Default::default() };
        let r = run_case1(&c, &mut link(), None).unwrap();
        assert!(r.segment_scales.iter().any(|s| *s == 0.5));
        let slowed = r.robot_trace.iter().filter(|s| s.scale == 0.5).map(|s| s.speed_deg).fold(0.0, f64::max);
        assert!(slowed > 0.0 && slowed <= 50.0 + 1e-9);

        let mut off = quick1(Task::One);
        off.compliance.enabled = true;
        let r = run_case1(&off, &mut link(), None).unwrap();
        assert!(r.segment_scales.iter().all(|s| *s == 1.0));
    }

    #[test]
    fn case1_is_deterministic() {
        let c = quick1(Task::Four);
        let mut la = link();
        let mut lb = link();
        let a = run_case1(&c, &mut la, None).unwrap();
        let b = run_case1(&c, &mut lb, None).unwrap();
        assert_eq!(a.labels(), b.labels());
        let export = |l: &mut LocalLink| {
            let rec = correct_recording(&l.finish().unwrap().unwrap()).unwrap();
            let mut out = Vec::new();
            export_epochs(&extract_epochs(&rec, "Robot approaching", 1.0, 2.0).unwrap(), &mut out).unwrap();
            out
        };
        let (ea, eb) = (export(&mut la), export(&mut lb));
        assert!(!ea.is_empty());
        assert_eq!(ea, eb);
    }

    #[test]
    fn case2_far_human() {
        let cfg = CaseTwoConfig::new("S02");
        let r = run_case2(&cfg, &mut link()).unwrap();
        let labels = r.labels();
        assert_eq!(labels, vec!["Experiment start", "Experiment end"]);
        assert_eq!(r.place_events.len(), 10);
        assert!((r.duration - r.baseline_duration).abs() < 20.0 * 2.0 / cfg.rate, "{} vs {}", r.duration, r.baseline_duration);
    }

    #[test]
    fn case2_crossing_human() {
        let mut cfg = CaseTwoConfig::new("S03");
        cfg.human = crossing_human();
        let mut l = link();
        let r = run_case2(&cfg, &mut l).unwrap();
        let labels = r.labels();
        let specific: Vec<&str> = labels.iter().copied().filter(|l| l.starts_with("Robot is")).collect();
        let pos = |from: usize, what: &str| specific[from..].iter().position(|l| *l == what).map(|p| p + from);
        let slow = pos(0, "Robot is slowing down").expect("slows");
        let stop = pos(slow, "Robot is stopping").expect("stops");
        pos(stop, "Robot is speeding up").expect("resumes");
        assert_eq!(labels.iter().filter(|l| **l == "Robot state change").count(), specific.len());
        assert_eq!(r.place_events.len(), 10);
        assert!(r.duration > r.baseline_duration);
        for (_, zone, d) in &r.zones {
            if *d < cfg.ssm.d_stop {
                assert_eq!(*zone, Zone::Stop);
            }
        }
        let rec = l.finish().unwrap().unwrap();
        assert_eq!(rec.footer.metadata["place_events"], json!(10));
        assert!(rec.streams().any(|d| d.info.name == "separation"));
    }
}
