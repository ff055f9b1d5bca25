//! Digital twin of the shared workspace: robot geometry from joint angles,
//! human points from motion capture, separation metrics and the
//! speed-and-separation zone machine.

use crate::model::labels;
use nalgebra::{Isometry3, Matrix4, Point3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum TwinError {
    #[error("expected {expected} joint angles, got {got}")]
    JointCount { expected: usize, got: usize },
    #[error("kinematic model needs at least one joint with finite parameters")]
    BadModel,
    #[error("distance query needs at least one robot segment and one human point")]
    EmptyInput,
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error("invalid SSM configuration: {0}")]
    BadConfig(String),
}

/// Standard Denavit-Hartenberg parameters of one revolute joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhJoint {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
}

impl DhJoint {
    /// `Rz(theta) Tz(d) Tx(a) Rx(alpha)`.
    pub fn transform(&self, q: f64) -> Matrix4<f64> {
        let (st, ct) = (q + self.theta_offset).sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        Matrix4::new(
            ct, -st * ca, st * sa, self.a * ct,
            st, ct * ca, -ct * sa, self.a * st,
            0.0, sa, ca, self.d,
            0.0, 0.0, 0.0, 1.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BasePose {
    pub translation: [f64; 3],
    /// Roll, pitch, yaw in radians.
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl BasePose {
    pub fn isometry(&self) -> Isometry3<f64> {
        let [x, y, z] = self.translation;
        let [r, p, yw] = self.rpy;
        Isometry3::from_parts(Translation3::new(x, y, z), UnitQuaternion::from_euler_angles(r, p, yw))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicModel {
    pub joints: Vec<DhJoint>,
    #[serde(default)]
    pub base: BasePose,
    /// Tool point in the last joint frame; omitted when zero.
    #[serde(default)]
    pub tool: Option<[f64; 3]>,
}

impl KinematicModel {
    pub fn validate(&self) -> Result<(), TwinError> {
        let finite = |v: f64| v.is_finite();
        let ok = !self.joints.is_empty()
            && self.joints.iter().all(|j| finite(j.a) && finite(j.alpha) && finite(j.d) && finite(j.theta_offset))
            && self.base.translation.iter().chain(&self.base.rpy).all(|v| v.is_finite())
            && self.tool.is_none_or(|t| t.iter().all(|v| v.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(TwinError::BadModel)
        }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Base origin followed by every joint frame origin and the tool point.
    pub fn chain_points(&self, q: &[f64]) -> Result<Vec<Vec3>, TwinError> {
        let mut pts = vec![self.base.isometry().translation.vector];
        pts.extend(forward_kinematics(self, q)?);
        Ok(pts)
    }

    /// The robot as a polyline of segments between consecutive chain points.
    pub fn segments(&self, q: &[f64]) -> Result<Vec<Segment>, TwinError> {
        let pts = self.chain_points(q)?;
        Ok(pts.windows(2).map(|w| Segment::new(w[0], w[1])).collect())
    }
}

/// Frame transforms of every joint, base included, for the given angles.
pub fn joint_frames(model: &KinematicModel, q: &[f64]) -> Result<Vec<Matrix4<f64>>, TwinError> {
    if q.len() != model.joints.len() {
        return Err(TwinError::JointCount { expected: model.joints.len(), got: q.len() });
    }
    let mut t = model.base.isometry().to_homogeneous();
    let mut frames = Vec::with_capacity(q.len());
    for (j, qi) in model.joints.iter().zip(q) {
        t *= j.transform(*qi);
        frames.push(t);
    }
    Ok(frames)
}

/// World positions of each joint frame origin, plus the tool point when the
/// model has one.
pub fn forward_kinematics(model: &KinematicModel, q: &[f64]) -> Result<Vec<Vec3>, TwinError> {
    let frames = joint_frames(model, q)?;
    let mut out: Vec<Vec3> = frames.iter().map(|f| Vec3::new(f[(0, 3)], f[(1, 3)], f[(2, 3)])).collect();
    if let Some(tool) = model.tool {
        let last = frames.last().expect("validated non-empty");
        let p = last.transform_point(&Point3::new(tool[0], tool[1], tool[2]));
        out.push(p.coords);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec3,
    pub b: Vec3,
}

impl Segment {
    pub fn new(a: Vec3, b: Vec3) -> Self {
        Segment { a, b }
    }

    /// Closest point on the segment to `p`.
    pub fn closest_point(&self, p: &Vec3) -> Vec3 {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        if len2 == 0.0 {
            return self.a;
        }
        let s = ((p - self.a).dot(&ab) / len2).clamp(0.0, 1.0);
        self.a + ab * s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Zone {
    Normal,
    Reduced,
    Stop,
}

impl Zone {
    pub fn code(self) -> f32 {
        match self {
            Zone::Normal => 0.0,
            Zone::Reduced => 1.0,
            Zone::Stop => 2.0,
        }
    }

    pub fn from_code(v: f32) -> Option<Zone> {
        match v.round() as i32 {
            0 => Some(Zone::Normal),
            1 => Some(Zone::Reduced),
            2 => Some(Zone::Stop),
            _ => None,
        }
    }

    fn strictness(self) -> u8 {
        match self {
            Zone::Normal => 0,
            Zone::Reduced => 1,
            Zone::Stop => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationState {
    pub min_distance: f64,
    pub closest_robot_point: Vec3,
    pub closest_human_point: Vec3,
    /// Positive when human and robot approach each other.
    pub directed_speed: f64,
    pub zone: Zone,
}

/// Exact minimum distance between a robot polyline and a human point set.
/// Ties keep the first segment, then the first point.
pub fn min_distance(robot: &[Segment], human: &[Vec3]) -> Result<SeparationState, TwinError> {
    if robot.is_empty() || human.is_empty() {
        return Err(TwinError::EmptyInput);
    }
    let mut best: Option<(f64, Vec3, Vec3)> = None;
    for seg in robot {
        for p in human {
            let c = seg.closest_point(p);
            let d = (c - p).norm();
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, c, *p));
            }
        }
    }
    let (d, r, h) = best.unwrap();
    Ok(SeparationState {
        min_distance: d,
        closest_robot_point: r,
        closest_human_point: h,
        directed_speed: 0.0,
        zone: Zone::Normal,
    })
}

/// Rate of decrease of the separation between two states `dt` apart.
pub fn directed_speed(prev: &SeparationState, curr: &SeparationState, dt: f64) -> Result<f64, TwinError> {
    if !(dt > 0.0) {
        return Err(TwinError::BadStep(dt));
    }
    Ok((prev.min_distance - curr.min_distance) / dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub d_stop: f64,
    pub d_reduced: f64,
    #[serde(default)]
    pub hysteresis: f64,
    #[serde(default)]
    pub use_dynamic: bool,
    /// Seconds of human approach the thresholds grow by (reaction plus
    /// stopping time).
    #[serde(default)]
    pub v_h_gain: f64,
    #[serde(default)]
    pub c_margin: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig { d_stop: 0.5, d_reduced: 1.0, hysteresis: 0.05, use_dynamic: false, v_h_gain: 0.5, c_margin: 0.1 }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<(), TwinError> {
        let all_finite = [self.d_stop, self.d_reduced, self.hysteresis, self.v_h_gain, self.c_margin]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(TwinError::BadConfig("non-finite parameter".into()));
        }
        if !(0.0 < self.d_stop && self.d_stop < self.d_reduced) {
            return Err(TwinError::BadConfig(format!(
                "need 0 < d_stop < d_reduced, got {} and {}",
                self.d_stop, self.d_reduced
            )));
        }
        if self.hysteresis < 0.0 || self.v_h_gain < 0.0 || self.c_margin < 0.0 {
            return Err(TwinError::BadConfig("hysteresis, gain and margin must be non-negative".into()));
        }
        Ok(())
    }

    /// Effective (stop, reduced) thresholds for a given approach speed.
    pub fn thresholds(&self, directed_speed: f64) -> (f64, f64) {
        let extra = if self.use_dynamic { self.v_h_gain * directed_speed.max(0.0) + self.c_margin } else { 0.0 };
        (self.d_stop + extra, self.d_reduced + extra)
    }
}

/// Markers emitted for a zone transition. Leaving Stop for Reduced counts as
/// speeding up: the robot resumes motion.
pub fn transition_markers(from: Zone, to: Zone) -> Vec<&'static str> {
    if from == to {
        return vec![];
    }
    let specific = match (from, to) {
        (_, Zone::Stop) => labels::STOPPING,
        (Zone::Normal, Zone::Reduced) => labels::SLOWING_DOWN,
        (Zone::Stop, Zone::Reduced) => labels::SPEEDING_UP,
        (_, Zone::Normal) => labels::SPEEDING_UP,
        _ => unreachable!("same-zone handled above"),
    };
    vec![labels::STATE_CHANGE, specific]
}

/// One step of the zone machine. Entering a stricter zone is immediate;
/// leaving one requires clearing its threshold by the hysteresis band.
pub fn ssm_step(zone: Zone, sep: &SeparationState, cfg: &SsmConfig) -> (Zone, Vec<&'static str>) {
    let d = sep.min_distance;
    let (d_stop, d_red) = cfg.thresholds(sep.directed_speed);
    let raw = if d < d_stop {
        Zone::Stop
    } else if d < d_red {
        Zone::Reduced
    } else {
        Zone::Normal
    };
    let next = if raw.strictness() >= zone.strictness() {
        raw
    } else {
        match zone {
            Zone::Stop if d <= d_stop + cfg.hysteresis => Zone::Stop,
            Zone::Stop if d <= d_red + cfg.hysteresis => Zone::Reduced,
            Zone::Reduced if d <= d_red + cfg.hysteresis => Zone::Reduced,
            _ => raw,
        }
    };
    (next, transition_markers(zone, next))
}

/// Stateful twin: tracks the previous separation to derive directed speed
/// and owns the current zone.
#[derive(Debug, Clone)]
pub struct DigitalTwin {
    pub model: KinematicModel,
    pub ssm: SsmConfig,
    /// Subtracted from the geometric distance before zone evaluation.
    pub inflation_radius: f64,
    zone: Zone,
    prev: Option<(f64, SeparationState)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinUpdate {
    pub state: SeparationState,
    /// Distance used for zoning (geometric minus inflation, floored at 0).
    pub effective_distance: f64,
    pub markers: Vec<&'static str>,
}

impl DigitalTwin {
    pub fn new(model: KinematicModel, ssm: SsmConfig, inflation_radius: f64) -> Result<Self, TwinError> {
        model.validate()?;
        ssm.validate()?;
        Ok(DigitalTwin { model, ssm, inflation_radius: inflation_radius.max(0.0), zone: Zone::Normal, prev: None })
    }

    pub fn zone(&self) -> Zone {
        self.zone
    }

    pub fn update(&mut self, t: f64, q: &[f64], human: &[Vec3]) -> Result<TwinUpdate, TwinError> {
        let segments = self.model.segments(q)?;
        let mut state = min_distance(&segments, human)?;
        if let Some((pt, prev)) = &self.prev {
            if t > *pt {
                state.directed_speed = directed_speed(prev, &state, t - pt)?;
            }
        }
        let effective = (state.min_distance - self.inflation_radius).max(0.0);
        let probe = SeparationState { min_distance: effective, ..state };
        let (zone, markers) = ssm_step(self.zone, &probe, &self.ssm);
        self.zone = zone;
        state.zone = zone;
        self.prev = Some((t, state));
        Ok(TwinUpdate { state, effective_distance: effective, markers })
    }
}
