//! Seeded stand-ins for the physical devices: physiological generators,
//! a scripted mocap subject and a joint-space trajectory executor.

use crate::model::{Sample, StreamInfo};
use crate::twin::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub const V_MAX_LIMIT_DEG: f64 = 100.0;
pub const A_NORMAL_DEG: f64 = 150.0;
pub const A_HIGH_DEG: f64 = 600.0;

pub const GSR_RATE: f64 = 32.0;
pub const PPG_RATE: f64 = 64.0;
pub const ECG_RATE: f64 = 256.0;
pub const MOCAP_RATE: f64 = 100.0;

/// Skin conductance response time constants, seconds.
pub const SCR_TAU1: f64 = 10.0;
pub const SCR_TAU2: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("plane {0} has no candidate waypoints")]
    EmptyPlane(usize),
    #[error("v_max {0} deg/s outside (0, 100]")]
    SpeedLimit(f64),
    #[error("a_max must be positive, got {0}")]
    BadAccel(f64),
    #[error("waypoints have mismatched joint counts")]
    JointMismatch,
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error("script segment {index}: {detail}")]
    ScriptGap { index: usize, detail: String },
    #[error("heart rate must be positive, got {0}")]
    BadHeartRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryMode {
    Fixed,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccelMode {
    Normal,
    High,
    /// Draws a_max uniformly in [normal, high] per segment. Not used by the
    /// four Case I tasks.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionLimits {
    /// deg/s
    pub v_max: f64,
    /// deg/s²
    pub a_normal: f64,
    pub a_high: f64,
}

impl Default for MotionLimits {
    fn default() -> Self {
        MotionLimits { v_max: V_MAX_LIMIT_DEG, a_normal: A_NORMAL_DEG, a_high: A_HIGH_DEG }
    }
}

impl MotionLimits {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.v_max > 0.0 && self.v_max <= V_MAX_LIMIT_DEG) {
            return Err(SimError::SpeedLimit(self.v_max));
        }
        for a in [self.a_normal, self.a_high] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(SimError::BadAccel(a));
            }
        }
        Ok(())
    }
}

/// Joint configuration in radians.
pub type JointConfig = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPlan {
    pub waypoints: Vec<JointConfig>,
    /// deg/s
    pub v_max: f64,
    /// deg/s², one per segment
    pub a_max: Vec<f64>,
    pub mode: TrajectoryMode,
}

pub fn plan_trajectory(
    pick: &[f64],
    place: &[f64],
    planes: &[Vec<JointConfig>],
    mode: TrajectoryMode,
    accel: AccelMode,
    limits: &MotionLimits,
    seed: u64,
) -> Result<TrajectoryPlan, SimError> {
    limits.validate()?;
    if pick.len() != place.len() {
        return Err(SimError::JointMismatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waypoints = vec![pick.to_vec()];
    if mode == TrajectoryMode::Random {
        for (i, plane) in planes.iter().enumerate() {
            if plane.is_empty() {
                return Err(SimError::EmptyPlane(i));
            }
            let w = &plane[rng.random_range(0..plane.len())];
            if w.len() != pick.len() {
                return Err(SimError::JointMismatch);
            }
            waypoints.push(w.clone());
        }
    }
    waypoints.push(place.to_vec());
    let a_max = (0..waypoints.len() - 1)
        .map(|_| match accel {
            AccelMode::Normal => limits.a_normal,
            AccelMode::High => limits.a_high,
            AccelMode::Random => {
                let (lo, hi) = (limits.a_normal.min(limits.a_high), limits.a_normal.max(limits.a_high));
                if lo == hi { lo } else { rng.random_range(lo..=hi) }
            }
        })
        .collect();
    Ok(TrajectoryPlan { waypoints, v_max: limits.v_max, a_max, mode })
}

/// Scalar trapezoidal (or triangular) profile over a path of `length`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trapezoid {
    pub length: f64,
    pub v_peak: f64,
    pub accel: f64,
    pub t_acc: f64,
    pub t_cruise: f64,
}

impl Trapezoid {
    pub fn new(length: f64, v_max: f64, a_max: f64) -> Self {
        let length = length.abs();
        if length == 0.0 {
            return Trapezoid { length, v_peak: 0.0, accel: a_max, t_acc: 0.0, t_cruise: 0.0 };
        }
        if length >= v_max * v_max / a_max {
            let t_acc = v_max / a_max;
            Trapezoid { length, v_peak: v_max, accel: a_max, t_acc, t_cruise: (length - v_max * t_acc) / v_max }
        } else {
            let v_peak = (length * a_max).sqrt();
            Trapezoid { length, v_peak, accel: a_max, t_acc: v_peak / a_max, t_cruise: 0.0 }
        }
    }

    pub fn duration(&self) -> f64 {
        2.0 * self.t_acc + self.t_cruise
    }

    /// Position and speed along the path at time `t` (clamped).
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let total = self.duration();
        if t <= 0.0 || total == 0.0 {
            return (0.0, 0.0);
        }
        if t >= total {
            return (self.length, 0.0);
        }
        let a = self.accel;
        let d_acc = 0.5 * a * self.t_acc * self.t_acc;
        if t < self.t_acc {
            (0.5 * a * t * t, a * t)
        } else if t < self.t_acc + self.t_cruise {
            (d_acc + self.v_peak * (t - self.t_acc), self.v_peak)
        } else {
            let r = total - t;
            (self.length - 0.5 * a * r * r, a * r)
        }
    }
}

/// One joint-space move. All joints share a single path parameter so they
/// start and stop together; the largest joint excursion sets the pace.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMotion {
    pub from: JointConfig,
    pub to: JointConfig,
    pub profile: Trapezoid,
}

impl SegmentMotion {
    /// `v_max` in deg/s, `a_max` in deg/s².
    pub fn new(from: &[f64], to: &[f64], v_max: f64, a_max: f64) -> Result<Self, SimError> {
        if from.len() != to.len() {
            return Err(SimError::JointMismatch);
        }
        if !(v_max > 0.0 && v_max <= V_MAX_LIMIT_DEG) {
            return Err(SimError::SpeedLimit(v_max));
        }
        if !(a_max > 0.0 && a_max.is_finite()) {
            return Err(SimError::BadAccel(a_max));
        }
        let length = from.iter().zip(to).map(|(a, b)| (b - a).abs()).fold(0.0, f64::max);
        let profile = Trapezoid::new(length, v_max.to_radians(), a_max.to_radians());
        Ok(SegmentMotion { from: from.to_vec(), to: to.to_vec(), profile })
    }

    pub fn duration(&self) -> f64 {
        self.profile.duration()
    }

    /// Joint angles and velocities (rad, rad/s) at local time `t`.
    pub fn eval(&self, t: f64) -> (JointConfig, JointConfig) {
        let (s, sd) = self.profile.eval(t);
        let len = self.profile.length;
        if len == 0.0 {
            return (self.from.clone(), vec![0.0; self.from.len()]);
        }
        if t >= self.duration() {
            return (self.to.clone(), vec![0.0; self.from.len()]);
        }
        let q = self.from.iter().zip(&self.to).map(|(a, b)| a + (b - a) * s / len).collect();
        let qd = self.from.iter().zip(&self.to).map(|(a, b)| (b - a) * sd / len).collect();
        (q, qd)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSample {
    pub t: f64,
    pub q: JointConfig,
    pub qd: JointConfig,
}

impl ProfileSample {
    /// Largest joint speed in deg/s.
    pub fn max_speed_deg(&self) -> f64 {
        self.qd.iter().map(|v| v.abs().to_degrees()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub samples: Vec<ProfileSample>,
    pub duration: f64,
    /// Start time of every segment.
    pub segment_starts: Vec<f64>,
}

/// Samples the whole plan at `dt`, always including both endpoints.
pub fn execute_profile(plan: &TrajectoryPlan, dt: f64) -> Result<Profile, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::BadStep(dt));
    }
    let mut segs = Vec::new();
    for (i, w) in plan.waypoints.windows(2).enumerate() {
        let a = plan.a_max.get(i).copied().unwrap_or(A_NORMAL_DEG);
        segs.push(SegmentMotion::new(&w[0], &w[1], plan.v_max, a)?);
    }
    let mut starts = Vec::with_capacity(segs.len());
    let mut acc = 0.0;
    for s in &segs {
        starts.push(acc);
        acc += s.duration();
    }
    let duration = acc;
    let at = |t: f64| -> ProfileSample {
        // last segment whose start is <= t
        let idx = starts.partition_point(|s| *s <= t).saturating_sub(1);
        match segs.get(idx) {
            Some(seg) => {
                let (q, qd) = seg.eval(t - starts[idx]);
                ProfileSample { t, q, qd }
            }
            None => {
                let q = plan.waypoints.first().cloned().unwrap_or_default();
                ProfileSample { t, qd: vec![0.0; q.len()], q }
            }
        }
    };
    let mut samples = Vec::new();
    let mut k = 0u64;
    loop {
        let t = k as f64 * dt;
        if t >= duration {
            break;
        }
        samples.push(at(t));
        k += 1;
    }
    samples.push(at(duration));
    Ok(Profile { samples, duration, segment_starts: starts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StimulusEvent {
    pub at: f64,
    pub magnitude: f64,
}

/// Time of the maximum of a single bi-exponential SCR.
pub fn scr_peak_time() -> f64 {
    SCR_TAU1 * SCR_TAU2 / (SCR_TAU1 - SCR_TAU2) * (SCR_TAU1 / SCR_TAU2).ln()
}

/// Skin conductance in µS.
pub fn gen_gsr(t: f64, tonic: f64, events: &[StimulusEvent]) -> f64 {
    let phasic: f64 = events
        .iter()
        .filter(|e| e.at <= t)
        .map(|e| {
            let x = t - e.at;
            e.magnitude * ((-x / SCR_TAU1).exp() - (-x / SCR_TAU2).exp())
        })
        .sum();
    (tonic + phasic).max(0.0)
}

/// Phase within the current beat, in [-period/2, period/2), with beats at
/// integer multiples of the period.
fn beat_phase(t: f64, period: f64) -> f64 {
    (t + 0.5 * period).rem_euclid(period) - 0.5 * period
}

/// Normalized pulse in [0, 1] with systolic peaks at multiples of 60/hr.
pub fn gen_ppg(t: f64, hr: f64) -> f64 {
    let period = 60.0 / hr;
    let width = 0.3 * period;
    let phi = beat_phase(t, period);
    if phi.abs() >= 0.5 * width {
        0.0
    } else {
        0.5 * (1.0 + (2.0 * PI * phi / width).cos())
    }
}

/// ECG wave components: (centre, width, amplitude) with centre and width as
/// fractions of the beat period relative to the R peak, amplitude in mV.
pub const ECG_WAVES: [(f64, f64, f64); 5] = [
    (-0.20, 0.025, 0.15),  // P
    (-0.035, 0.010, -0.15), // Q
    (0.0, 0.012, 1.20),    // R
    (0.035, 0.010, -0.25), // S
    (0.30, 0.040, 0.30),   // T
];

/// Synthetic ECG in mV with R peaks at multiples of 60/hr.
pub fn gen_ecg(t: f64, hr: f64) -> f64 {
    let period = 60.0 / hr;
    let x = beat_phase(t, period) / period;
    ECG_WAVES
        .iter()
        .map(|(c, w, a)| a * (-((x - c) * (x - c)) / (2.0 * w * w)).exp())
        .sum()
}

/// Constant-speed straight move of the human reference point, starting at
/// `start`. Between segments the subject holds position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveSegment {
    pub start: f64,
    pub from: [f64; 3],
    pub to: [f64; 3],
    /// m/s
    pub speed: f64,
}

impl MoveSegment {
    pub fn duration(&self) -> f64 {
        let d = (v3(self.to) - v3(self.from)).norm();
        if d == 0.0 { 0.0 } else { d / self.speed }
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration()
    }
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

pub const MOCAP_LABELS: [&str; 4] = ["head", "torso", "left_hand", "right_hand"];
/// Offsets from the torso reference point, metres.
pub const MOCAP_OFFSETS: [[f64; 3]; 4] = [[0.0, 0.0, 0.45], [0.0, 0.0, 0.0], [0.0, 0.25, -0.05], [0.0, -0.25, -0.05]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MocapScript {
    pub segments: Vec<MoveSegment>,
}

impl MocapScript {
    pub fn stationary(at: [f64; 3]) -> Self {
        MocapScript { segments: vec![MoveSegment { start: 0.0, from: at, to: at, speed: 1.0 }] }
    }

    /// Segments must be time-ordered, position-continuous and non-overlapping.
    pub fn validate(&self) -> Result<(), SimError> {
        let gap = |index, detail: String| Err(SimError::ScriptGap { index, detail });
        if self.segments.is_empty() {
            return gap(0, "script is empty".into());
        }
        for (i, s) in self.segments.iter().enumerate() {
            let moving = s.from != s.to;
            if !s.start.is_finite() || (moving && !(s.speed > 0.0 && s.speed.is_finite())) {
                return gap(i, "non-finite start or non-positive speed".into());
            }
        }
        for (i, w) in self.segments.windows(2).enumerate() {
            if w[1].from != w[0].to {
                return gap(i + 1, format!("starts at {:?} but previous ends at {:?}", w[1].from, w[0].to));
            }
            if w[1].start < w[0].end() - 1e-9 {
                return gap(i + 1, format!("starts at {} before previous ends at {}", w[1].start, w[0].end()));
            }
        }
        Ok(())
    }

    /// Torso reference position at `t`.
    pub fn reference(&self, t: f64) -> Vec3 {
        let first = &self.segments[0];
        if t <= first.start {
            return v3(first.from);
        }
        let idx = self.segments.partition_point(|s| s.start <= t) - 1;
        let s = &self.segments[idx];
        let dur = s.duration();
        if dur == 0.0 || t >= s.end() {
            return v3(s.to);
        }
        let f = (t - s.start) / dur;
        v3(s.from) + (v3(s.to) - v3(s.from)) * f
    }

    pub fn end_time(&self) -> f64 {
        self.segments.iter().map(MoveSegment::end).fold(0.0, f64::max)
    }
}

/// Labeled human points at `t`, in [`MOCAP_LABELS`] order.
pub fn gen_mocap(t: f64, script: &MocapScript) -> Result<Vec<(&'static str, Vec3)>, SimError> {
    script.validate()?;
    let r = script.reference(t);
    Ok(MOCAP_LABELS.iter().zip(MOCAP_OFFSETS).map(|(l, o)| (*l, r + v3(o))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Gsr,
    Ppg,
    Ecg,
    Mocap,
}

impl DeviceKind {
    pub fn default_rate(self) -> f64 {
        match self {
            DeviceKind::Gsr => GSR_RATE,
            DeviceKind::Ppg => PPG_RATE,
            DeviceKind::Ecg => ECG_RATE,
            DeviceKind::Mocap => MOCAP_RATE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DeviceKind::Gsr => "gsr",
            DeviceKind::Ppg => "ppg",
            DeviceKind::Ecg => "ecg",
            DeviceKind::Mocap => "mocap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub kind: DeviceKind,
    pub source_id: String,
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise, in signal units.
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "default_hr")]
    pub hr: f64,
    #[serde(default = "default_tonic")]
    pub tonic: f64,
    #[serde(default)]
    pub events: Vec<StimulusEvent>,
    #[serde(default)]
    pub script: Option<MocapScript>,
}

fn default_hr() -> f64 {
    72.0
}

fn default_tonic() -> f64 {
    2.0
}

impl DeviceConfig {
    pub fn new(kind: DeviceKind, source_id: &str) -> Self {
        DeviceConfig {
            kind,
            source_id: source_id.to_string(),
            rate: kind.default_rate(),
            seed: 0,
            noise_std: 0.0,
            hr: default_hr(),
            tonic: default_tonic(),
            events: vec![],
            script: None,
        }
    }

    pub fn stream_info(&self) -> StreamInfo {
        match self.kind {
            DeviceKind::Gsr => StreamInfo::numeric("gsr", &self.source_id, self.rate, &["conductance"], "uS"),
            DeviceKind::Ppg => StreamInfo::numeric("ppg", &self.source_id, self.rate, &["pulse"], "au"),
            DeviceKind::Ecg => StreamInfo::numeric("ecg", &self.source_id, self.rate, &["lead1"], "mV"),
            DeviceKind::Mocap => {
                let labels: Vec<String> = MOCAP_LABELS
                    .iter()
                    .flat_map(|l| ["x", "y", "z"].map(|a| format!("{l}_{a}")))
                    .collect();
                let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
                StreamInfo::numeric("mocap", &self.source_id, self.rate, &refs, "m")
            }
        }
    }
}

/// Sequential sample source for one simulated device. Output is a pure
/// function of the config (seed included) and the sample index.
#[derive(Debug, Clone)]
pub struct DeviceSim {
    pub cfg: DeviceConfig,
    next_index: u64,
    t0: f64,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl DeviceSim {
    /// `t0` is the producer-clock time of sample 0.
    pub fn new(cfg: DeviceConfig, t0: f64) -> Result<Self, SimError> {
        if matches!(cfg.kind, DeviceKind::Ppg | DeviceKind::Ecg) && !(cfg.hr > 0.0) {
            return Err(SimError::BadHeartRate(cfg.hr));
        }
        if let Some(s) = &cfg.script {
            s.validate()?;
        }
        let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("positive std"));
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(DeviceSim { cfg, next_index: 0, t0, rng, noise })
    }

    pub fn time_of(&self, index: u64) -> f64 {
        self.t0 + index as f64 / self.cfg.rate
    }

    pub fn next_time(&self) -> f64 {
        self.time_of(self.next_index)
    }

    pub fn produced(&self) -> u64 {
        self.next_index
    }

    /// Signal values at `t` seconds since sample 0, before noise.
    pub fn clean_values(&self, t: f64) -> Vec<f64> {
        let c = &self.cfg;
        match c.kind {
            DeviceKind::Gsr => vec![gen_gsr(t, c.tonic, &c.events)],
            DeviceKind::Ppg => vec![gen_ppg(t, c.hr)],
            DeviceKind::Ecg => vec![gen_ecg(t, c.hr)],
            DeviceKind::Mocap => {
                let script = c.script.clone().unwrap_or_else(|| MocapScript::stationary([2.0, 0.0, 1.0]));
                let r = script.reference(t);
                MOCAP_OFFSETS.iter().flat_map(|o| (r + v3(*o)).iter().copied().collect::<Vec<_>>()).collect()
            }
        }
    }

    pub fn next_sample(&mut self) -> Sample {
        let k = self.next_index;
        self.next_index += 1;
        let local = k as f64 / self.cfg.rate;
        let mut v = self.clean_values(local);
        if let Some(n) = &self.noise {
            for x in &mut v {
                *x += n.sample(&mut self.rng);
            }
        }
        Sample::new(self.t0 + local, v.into_iter().map(|x| x as f32).collect())
    }

    /// All samples whose time is strictly before `until` (producer clock).
    pub fn samples_until(&mut self, until: f64) -> Vec<Sample> {
        let mut out = Vec::new();
        while self.next_time() < until {
            out.push(self.next_sample());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planes() -> Vec<Vec<JointConfig>> {
        (0..3)
            .map(|p| (0..4).map(|c| vec![0.1 * p as f64 + 0.01 * c as f64, -0.2 * c as f64, 0.3]).collect())
            .collect()
    }

    #[test]
    fn fixed_plan_has_two_waypoints() {
        let p = plan_trajectory(&[0.0; 3], &[1.0; 3], &planes(), TrajectoryMode::Fixed, AccelMode::Normal, &MotionLimits::default(), 1).unwrap();
        assert_eq!(p.waypoints.len(), 2);
        assert_eq!(p.a_max, vec![A_NORMAL_DEG]);
    }

    #[test]
    fn random_plan_is_seeded_and_members() {
        let l = MotionLimits::default();
        let pl = planes();
        let a = plan_trajectory(&[0.0; 3], &[1.0; 3], &pl, TrajectoryMode::Random, AccelMode::High, &l, 42).unwrap();
        let b = plan_trajectory(&[0.0; 3], &[1.0; 3], &pl, TrajectoryMode::Random, AccelMode::High, &l, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.waypoints.len(), 5);
        for (i, plane) in pl.iter().enumerate() {
            assert!(plane.contains(&a.waypoints[i + 1]));
        }
        let seeds_differ = (0..20).any(|s| {
            plan_trajectory(&[0.0; 3], &[1.0; 3], &pl, TrajectoryMode::Random, AccelMode::High, &l, s).unwrap() != a
        });
        assert!(seeds_differ);
    }

    #[test]
    fn empty_plane_rejected() {
        let mut pl = planes();
        pl[1].clear();
        let e = plan_trajectory(&[0.0; 3], &[1.0; 3], &pl, TrajectoryMode::Random, AccelMode::Normal, &MotionLimits::default(), 1);
        assert_eq!(e.unwrap_err(), SimError::EmptyPlane(1));
    }

    #[test]
    fn speed_cap_enforced() {
        let l = MotionLimits { v_max: 120.0, ..Default::default() };
        assert!(matches!(
            plan_trajectory(&[0.0], &[1.0], &[], TrajectoryMode::Fixed, AccelMode::Normal, &l, 0),
            Err(SimError::SpeedLimit(_))
        ));
    }

    #[test]
    fn random_accel_within_bounds() {
        let l = MotionLimits::default();
        let p = plan_trajectory(&[0.0; 3], &[1.0; 3], &planes(), TrajectoryMode::Random, AccelMode::Random, &l, 3).unwrap();
        assert!(p.a_max.iter().all(|a| (A_NORMAL_DEG..=A_HIGH_DEG).contains(a)));
    }

    fn single(deg: f64, a: f64) -> TrajectoryPlan {
        TrajectoryPlan { waypoints: vec![vec![0.0], vec![deg.to_radians()]], v_max: 100.0, a_max: vec![a], mode: TrajectoryMode::Fixed }
    }

    #[test]
    fn plateau_at_full_speed() {
        let p = execute_profile(&single(90.0, 10_000.0), 0.001).unwrap();
        let peak = p.samples.iter().map(ProfileSample::max_speed_deg).fold(0.0, f64::max);
        assert!((peak - 100.0).abs() < 1e-9, "{peak}");
        let at_peak = p.samples.iter().filter(|s| (s.max_speed_deg() - 100.0).abs() < 1e-9).count();
        assert!(at_peak > 100);
        assert!((p.samples.last().unwrap().q[0] - 90f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn zero_length_is_still() {
        let plan = TrajectoryPlan { waypoints: vec![vec![0.5], vec![0.5]], v_max: 100.0, a_max: vec![150.0], mode: TrajectoryMode::Fixed };
        let p = execute_profile(&plan, 0.01).unwrap();
        assert_eq!(p.duration, 0.0);
        assert_eq!(p.samples.len(), 1);
        assert_eq!(p.samples[0].q, vec![0.5]);
    }

    #[test]
    fn triangle_when_short() {
        let t = Trapezoid::new(1.0, 10.0, 1.0);
        assert_eq!(t.t_cruise, 0.0);
        assert!((t.v_peak - 1.0).abs() < 1e-12);
        assert!((t.eval(t.duration()).0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn profile_bounds_and_integration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let wps: Vec<JointConfig> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let a_max: Vec<f64> = (0..3).map(|_| rng.random_range(150.0..600.0)).collect();
            let v_max = rng.random_range(20.0..100.0);
            let plan = TrajectoryPlan { waypoints: wps.clone(), v_max, a_max: a_max.clone(), mode: TrajectoryMode::Random };
            let dt = 1e-4;
            let p = execute_profile(&plan, dt).unwrap();
            let a_lim = a_max.iter().cloned().fold(0.0, f64::max).to_radians();
            let mut integ = wps[0].clone();
            let mut worst: f64 = 0.0;
            for w in p.samples.windows(2) {
                let h = w[1].t - w[0].t;
                assert!(w[1].max_speed_deg() <= v_max * (1.0 + 1e-12));
                for j in 0..6 {
                    assert!((w[1].qd[j] - w[0].qd[j]).abs() / h <= a_lim * (1.0 + 1e-6));
                    integ[j] += 0.5 * h * (w[0].qd[j] + w[1].qd[j]);
                    worst = worst.max((integ[j] - w[1].q[j]).abs());
                }
            }
            assert!(worst <= 1e-6, "integration error {worst}");
            let end = &p.samples.last().unwrap().q;
            for (e, w) in end.iter().zip(wps.last().unwrap()) {
                assert!((e - w).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gsr_shapes() {
        assert_eq!(gen_gsr(7.0, 2.0, &[]), 2.0);
        let ev = [StimulusEvent { at: 0.0, magnitude: 1.0 }];
        assert_eq!(gen_gsr(0.0, 0.0, &ev), 0.0);
        assert_eq!(gen_gsr(-1.0, 0.5, &ev), 0.5);
        // numeric argmax against the closed form
        let (mut best_t, mut best) = (0.0, f64::MIN);
        for k in 0..100_000 {
            let t = k as f64 * 1e-4;
            let v = gen_gsr(t, 0.0, &ev);
            if v > best {
                best = v;
                best_t = t;
            }
        }
        assert!((best_t - scr_peak_time()).abs() < 2e-4);
        assert!((scr_peak_time() - 2.558).abs() < 1e-3);
    }

    /// Local maxima refined by a parabola through the neighbours.
    fn peaks(xs: &[f64], rate: f64, min_height: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 1..xs.len() - 1 {
            if xs[i] > min_height && xs[i] > xs[i - 1] && xs[i] >= xs[i + 1] {
                let (a, b, c) = (xs[i - 1], xs[i], xs[i + 1]);
                let denom = a - 2.0 * b + c;
                let off = if denom == 0.0 { 0.0 } else { 0.5 * (a - c) / denom };
                out.push((i as f64 + off) / rate);
            }
        }
        out
    }

    fn hr_from(peaks: &[f64]) -> f64 {
        60.0 * (peaks.len() - 1) as f64 / (peaks.last().unwrap() - peaks[0])
    }

    #[test]
    fn ppg_period_and_peaks() {
        for k in 0..5 {
            assert!((gen_ppg(k as f64, 60.0) - 1.0).abs() < 1e-12);
        }
        assert!((gen_ppg(0.25, 120.0) - 0.0).abs() < 1e-12);
        assert!((gen_ppg(0.5, 120.0) - 1.0).abs() < 1e-12);
        for hr in [55.0, 72.0, 93.0, 130.0] {
            let xs: Vec<f64> = (0..(30.0 * PPG_RATE) as usize).map(|i| gen_ppg(i as f64 / PPG_RATE, hr)).collect();
            let est = hr_from(&peaks(&xs, PPG_RATE, 0.5));
            assert!((est - hr).abs() < 0.1, "{hr} -> {est}");
        }
    }

    #[test]
    fn ecg_r_peak() {
        let beat: Vec<f64> = (0..1000).map(|i| gen_ecg(-0.5 + i as f64 / 1000.0, 60.0)).collect();
        let argmax = beat.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 500);
        for hr in [60.0, 75.0, 110.0] {
            let xs: Vec<f64> = (0..(60.0 * ECG_RATE) as usize).map(|i| gen_ecg(i as f64 / ECG_RATE, hr)).collect();
            let p = peaks(&xs, ECG_RATE, 0.6);
            if hr == 60.0 {
                assert!(p.windows(2).all(|w| (w[1] - w[0] - 1.0).abs() < 1e-3));
            }
            assert!((hr_from(&p) - hr).abs() < 0.1);
        }
    }

    #[test]
    fn mocap_scripts() {
        let s = MocapScript::stationary([1.0, 2.0, 1.0]);
        assert_eq!(gen_mocap(0.0, &s).unwrap(), gen_mocap(100.0, &s).unwrap());
        let mv = MocapScript { segments: vec![MoveSegment { start: 0.0, from: [0.0; 3], to: [1.0, 0.0, 0.0], speed: 0.5 }] };
        assert!((mv.reference(2.0) - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((mv.reference(1.0) - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        let h = 1e-3;
        let v = (mv.reference(1.0 + h) - mv.reference(1.0 - h)).norm() / (2.0 * h);
        assert!((v - 0.5).abs() < 1e-6);
        let pts = gen_mocap(2.0, &mv).unwrap();
        assert_eq!(pts[0].0, "head");
        assert!((pts[0].1 - Vec3::new(1.0, 0.0, 0.45)).norm() < 1e-12);
    }

    #[test]
    fn mocap_gap_rejected() {
        let s = MocapScript {
            segments: vec![
                MoveSegment { start: 0.0, from: [0.0; 3], to: [1.0, 0.0, 0.0], speed: 1.0 },
                MoveSegment { start: 2.0, from: [2.0, 0.0, 0.0], to: [3.0, 0.0, 0.0], speed: 1.0 },
            ],
        };
        assert!(matches!(gen_mocap(0.0, &s), Err(SimError::ScriptGap { index: 1, .. })));
        let overlap = MocapScript {
            segments: vec![
                MoveSegment { start: 0.0, from: [0.0; 3], to: [1.0, 0.0, 0.0], speed: 0.5 },
                MoveSegment { start: 1.0, from: [1.0, 0.0, 0.0], to: [0.0; 3], speed: 1.0 },
            ],
        };
        assert!(overlap.validate().is_err());
    }

    #[test]
    fn device_sim_is_repeatable() {
        let mut cfg = DeviceConfig::new(DeviceKind::Gsr, "gsr-1");
        cfg.noise_std = 0.05;
        cfg.seed = 9;
        let mut a = DeviceSim::new(cfg.clone(), 10.0).unwrap();
        let mut b = DeviceSim::new(cfg, 10.0).unwrap();
        let sa = a.samples_until(20.0);
        assert_eq!(sa.len(), 320);
        assert_eq!(sa, b.samples_until(20.0));
        assert_eq!(sa[1].raw_timestamp, 10.0 + 1.0 / 32.0);
    }

    #[test]
    fn device_stream_shapes() {
        for kind in [DeviceKind::Gsr, DeviceKind::Ppg, DeviceKind::Ecg, DeviceKind::Mocap] {
            let cfg = DeviceConfig::new(kind, "dev");
            let info = cfg.stream_info();
            assert!(crate::model::validate_stream_info(&info).is_empty());
            let mut sim = DeviceSim::new(cfg, 0.0).unwrap();
            assert!(sim.next_sample().fits(&info));
        }
    }
}
