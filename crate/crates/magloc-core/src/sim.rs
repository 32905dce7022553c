//! Synthetic world and measurement generator: dipole anomalies over a base
//! geomagnetic field, analytic ground-truth trajectories, and the sensor
//! measurement process with Gaussian noise and outlier injection.
//!
//! Everything stochastic flows from one seed. Frame k of a run draws from
//! stream k of a counter-based generator, so frames are reproducible
//! per (seed, frame index) no matter how the synthesis is scheduled.

use crate::estimator::State;
use crate::map::RawMagSample;
use crate::so3::{RotMat, RotVec};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use rayon::prelude::*;

/// µ₀/4π expressed in µT·m³/(A·m²).
const DIPOLE_CONSTANT: f64 = 0.1;

/// Minimum distance from a dipole source at which the field is evaluated.
const SINGULARITY_RADIUS: f64 = 1e-6;

#[derive(Debug)]
pub enum SimError {
    /// Evaluation point too close to a dipole source.
    Singularity { source_index: usize, distance: f64 },
    InvalidInput(String),
}

impl std::fmt::Display for SimError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimError::Singularity { source_index, distance } => write!(
                f,
                "field evaluated {distance:.2e} m from dipole {source_index} (singularity)"
            ),
            SimError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
        }
    }
}

impl std::error::Error for SimError {}

/// Point magnetic dipole anomaly source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipoleSource {
    /// World position, meters.
    pub position: Vector3<f64>,
    /// Dipole moment, A·m².
    pub moment: Vector3<f64>,
}

impl DipoleSource {
    pub fn validate(&self) -> Result<(), SimError> {
        let finite = self.position.iter().all(|x| x.is_finite())
            && self.moment.iter().all(|x| x.is_finite());
        if !finite || self.moment.norm() == 0.0 {
            return Err(SimError::InvalidInput(format!("bad dipole source {self:?}")));
        }
        Ok(())
    }
}

/// Total field at `p`: base field plus the superposition of dipole terms
/// (µ₀/4π)·(3(m·r̂)r̂ − m)/‖r‖³.
pub fn world_field(
    sources: &[DipoleSource],
    base: &Vector3<f64>,
    p: &Vector3<f64>,
) -> Result<Vector3<f64>, SimError> {
    let mut field = *base;
    for (i, s) in sources.iter().enumerate() {
        let r = p - s.position;
        let dist = r.norm();
        if dist < SINGULARITY_RADIUS {
            return Err(SimError::Singularity { source_index: i, distance: dist });
        }
        let rhat = r / dist;
        let radial = 3.0 * s.moment.dot(&rhat);
        field += (rhat * radial - s.moment) * (DIPOLE_CONSTANT / (dist * dist * dist));
    }
    Ok(field)
}

/// Fixed extrinsics of one magnetometer in the body frame.
#[derive(Debug, Clone)]
pub struct SensorExtrinsic {
    pub rotation: RotMat,
    pub translation: Vector3<f64>,
}

/// The set of magnetometers rigidly mounted on the robot.
#[derive(Debug, Clone)]
pub struct SensorRig {
    pub sensors: Vec<SensorExtrinsic>,
}

impl SensorRig {
    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    /// World-frame pose of sensor `i` given the body pose.
    pub fn world_pose(
        &self,
        body_rot: &RotMat,
        body_pos: &Vector3<f64>,
        i: usize,
    ) -> (RotMat, Vector3<f64>) {
        let ext = &self.sensors[i];
        (body_rot.compose(&ext.rotation), body_rot.rotate(&ext.translation) + body_pos)
    }

    /// N identity-oriented sensors spread along the body y-axis, `pitch`
    /// meters apart, centered on the origin.
    pub fn linear_array(n: usize, pitch: f64) -> SensorRig {
        let mid = (n as f64 - 1.0) / 2.0;
        let sensors = (0..n)
            .map(|i| SensorExtrinsic {
                rotation: RotMat::identity(),
                translation: Vector3::new(0.0, (i as f64 - mid) * pitch, 0.0),
            })
            .collect();
        SensorRig { sensors }
    }
}

/// One timestamped set of sensor-frame readings.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    /// Seconds.
    pub t: f64,
    /// One reading per sensor, µT, in that sensor's own frame.
    pub readings: Vec<Vector3<f64>>,
    /// Simulator ground truth: which readings carry an injected outlier.
    pub truth_outlier_mask: Vec<bool>,
}

/// Measurement corruption parameters.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    /// Isotropic Gaussian noise std per component, µT.
    pub sigma_n: f64,
    /// Probability of an outlier per sensor per frame.
    pub outlier_rate: f64,
    /// Outlier offsets are drawn on a spherical shell of radius
    /// U(0.5, 1.0)·outlier_magnitude, µT.
    pub outlier_magnitude: f64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel { sigma_n: 0.0, outlier_rate: 0.0, outlier_magnitude: 0.0 }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.sigma_n >= 0.0
            && (0.0..=1.0).contains(&self.outlier_rate)
            && self.outlier_magnitude >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidInput(format!("bad noise model {self:?}")))
        }
    }
}

/// Generator for frame `frame_index` of the run seeded with `seed`.
pub fn frame_rng(seed: u64, frame_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index);
    rng
}

/// Synthesizes the sensor readings for one ground-truth state by inverting
/// the measurement model: Bᵢ = Rᵢᵀ(𝕄(pᵢ) + o + n).
pub fn synthesize_frame(
    truth: &State,
    rig: &SensorRig,
    sources: &[DipoleSource],
    base: &Vector3<f64>,
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> Result<MeasurementFrame, SimError> {
    noise.validate()?;
    if rig.is_empty() {
        return Err(SimError::InvalidInput("rig has no sensors".into()));
    }
    let body_rot = truth.rotation();
    let n = rig.len();
    let mut readings = Vec::with_capacity(n);
    let mut mask = vec![false; n];
    for i in 0..n {
        let (ri, pi) = rig.world_pose(&body_rot, &truth.p, i);
        let mut field = world_field(sources, base, &pi)?;
        for axis in 0..3 {
            let z: f64 = StandardNormal.sample(rng);
            field[axis] += noise.sigma_n * z;
        }
        let gate: f64 = rng.random();
        if gate < noise.outlier_rate {
            let dir: [f64; 3] = UnitSphere.sample(rng);
            let radius = rng.random_range(0.5..1.0) * noise.outlier_magnitude;
            field += Vector3::new(dir[0], dir[1], dir[2]) * radius;
            mask[i] = true;
        }
        readings.push(ri.rotate_inv(&field));
    }
    Ok(MeasurementFrame { t: truth.t, readings, truth_outlier_mask: mask })
}

/// Frames for every trajectory state after the first (which is the known
/// initial state of the run). Frame k draws from stream k.
pub fn simulate_frames(
    trajectory: &[State],
    rig: &SensorRig,
    sources: &[DipoleSource],
    base: &Vector3<f64>,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<MeasurementFrame>, SimError> {
    if trajectory.len() < 2 {
        return Err(SimError::InvalidInput("trajectory needs at least two states".into()));
    }
    trajectory[1..]
        .par_iter()
        .enumerate()
        .map(|(k, truth)| {
            let mut rng = frame_rng(seed, k as u64);
            synthesize_frame(truth, rig, sources, base, noise, &mut rng)
        })
        .collect()
}

/// Projects the readings of a mapping run into world-frame field samples,
/// one per (state, sensor), using the ground-truth poses as the mapping
/// odometry.
pub fn project_map_samples(
    trajectory: &[State],
    rig: &SensorRig,
    frames: &[MeasurementFrame],
) -> Vec<RawMagSample> {
    let mut out = Vec::with_capacity(frames.len() * rig.len());
    for (state, frame) in trajectory[1..].iter().zip(frames) {
        let body_rot = state.rotation();
        for i in 0..rig.len() {
            let (ri, pi) = rig.world_pose(&body_rot, &state.p, i);
            out.push(RawMagSample { position: pi, field: ri.rotate(&frame.readings[i]) });
        }
    }
    out
}

/// Whether the body yaw follows the path tangent or stays fixed at zero
/// (a holonomic platform sweeping sideways on return legs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadingMode {
    Path,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryFamily {
    /// Constant-velocity straight line along `direction` (normalized).
    Line { direction: Vector3<f64> },
    /// Planar circle; tangential speed is radius·angular_rate.
    Circle { radius: f64, angular_rate: f64 },
    /// Boustrophedon sweep: straight legs of `leg_length` along ±x joined by
    /// semicircular turns of radius spacing/2, advancing +y.
    Lawnmower { leg_length: f64, spacing: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectorySpec {
    pub family: TrajectoryFamily,
    /// Seconds.
    pub duration: f64,
    /// Samples per second.
    pub rate: f64,
    /// Path speed, m/s (ignored by `Circle`, which derives it).
    pub speed: f64,
    pub origin: Vector3<f64>,
    pub heading: HeadingMode,
}

impl TrajectorySpec {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0) || !(self.rate > 0.0) {
            return Err(SimError::InvalidInput(format!(
                "duration and rate must be positive, got {} and {}",
                self.duration, self.rate
            )));
        }
        match self.family {
            TrajectoryFamily::Line { direction } => {
                if direction.norm() == 0.0 {
                    return Err(SimError::InvalidInput("line direction is zero".into()));
                }
                if !(self.speed > 0.0) {
                    return Err(SimError::InvalidInput("line speed must be positive".into()));
                }
            }
            TrajectoryFamily::Circle { radius, angular_rate } => {
                if !(radius > 0.0) || angular_rate == 0.0 {
                    return Err(SimError::InvalidInput("bad circle parameters".into()));
                }
            }
            TrajectoryFamily::Lawnmower { leg_length, spacing } => {
                if !(leg_length > 0.0) || !(spacing > 0.0) || !(self.speed > 0.0) {
                    return Err(SimError::InvalidInput("bad lawnmower parameters".into()));
                }
            }
        }
        Ok(())
    }

    /// Times at which the lawnmower switches between legs and arcs (other
    /// families are smooth everywhere).
    pub fn segment_boundaries(&self) -> Vec<f64> {
        let TrajectoryFamily::Lawnmower { leg_length, spacing } = self.family else {
            return Vec::new();
        };
        let rho = spacing / 2.0;
        let pattern = [leg_length, std::f64::consts::PI * rho];
        let mut out = Vec::new();
        let mut u = 0.0;
        let total = self.duration * self.speed;
        let mut i = 0;
        while u < total {
            u += pattern[i % 2];
            i += 1;
            if u < total {
                out.push(u / self.speed);
            }
        }
        out
    }
}

/// Planar pose sample of a parametric path: position, velocity, yaw, yaw
/// rate. All quantities are exact derivatives of the path parametrization.
struct PathPoint {
    p: Vector3<f64>,
    v: Vector3<f64>,
    yaw: f64,
    yaw_rate: f64,
}

fn eval_path(spec: &TrajectorySpec, t: f64) -> PathPoint {
    match spec.family {
        TrajectoryFamily::Line { direction } => {
            let dir = direction.normalize();
            PathPoint {
                p: spec.origin + dir * (spec.speed * t),
                v: dir * spec.speed,
                yaw: dir.y.atan2(dir.x),
                yaw_rate: 0.0,
            }
        }
        TrajectoryFamily::Circle { radius, angular_rate } => {
            // Starts at the origin heading +x, curving left for ω > 0.
            let sign = angular_rate.signum();
            let theta = angular_rate.abs() * t;
            let p = spec.origin
                + Vector3::new(radius * theta.sin(), sign * radius * (1.0 - theta.cos()), 0.0);
            let v = Vector3::new(
                radius * angular_rate.abs() * theta.cos(),
                radius * angular_rate * theta.sin(),
                0.0,
            );
            PathPoint { p, v, yaw: angular_rate * t, yaw_rate: angular_rate }
        }
        TrajectoryFamily::Lawnmower { leg_length, spacing } => {
            let rho = spacing / 2.0;
            let period = 2.0 * (leg_length + std::f64::consts::PI * rho);
            let u_total = spec.speed * t;
            let row = (u_total / period).floor();
            let u = u_total - row * period;
            let y0 = spec.origin.y + row * 2.0 * spacing;
            let s = spec.speed;
            let arc = std::f64::consts::PI * rho;
            let (local_p, local_v, yaw, yaw_rate) = if u < leg_length {
                // Outbound leg, heading +x.
                (
                    Vector3::new(u, 0.0, 0.0),
                    Vector3::new(s, 0.0, 0.0),
                    0.0,
                    0.0,
                )
            } else if u < leg_length + arc {
                // Left turn: +x heading to −x heading, advancing +y.
                let alpha = (u - leg_length) / rho;
                (
                    Vector3::new(leg_length + rho * alpha.sin(), rho * (1.0 - alpha.cos()), 0.0),
                    Vector3::new(s * alpha.cos(), s * alpha.sin(), 0.0),
                    alpha,
                    s / rho,
                )
            } else if u < 2.0 * leg_length + arc {
                // Return leg, heading −x.
                let w = u - leg_length - arc;
                (
                    Vector3::new(leg_length - w, spacing, 0.0),
                    Vector3::new(-s, 0.0, 0.0),
                    std::f64::consts::PI,
                    0.0,
                )
            } else {
                // Right turn: −x heading back to +x heading, advancing +y.
                let beta = (u - 2.0 * leg_length - arc) / rho;
                (
                    Vector3::new(-rho * beta.sin(), spacing + rho * (1.0 - beta.cos()), 0.0),
                    Vector3::new(-s * beta.cos(), s * beta.sin(), 0.0),
                    std::f64::consts::PI - beta,
                    -s / rho,
                )
            };
            PathPoint {
                p: Vector3::new(spec.origin.x + local_p.x, y0 + local_p.y, spec.origin.z),
                v: local_v,
                yaw,
                yaw_rate,
            }
        }
    }
}

/// Ground-truth states sampled at `rate` over `duration` (inclusive of both
/// endpoints). Velocities and angular rates are the analytic derivatives of
/// the path, never finite differences.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<Vec<State>, SimError> {
    spec.validate()?;
    let count = (spec.duration * spec.rate).round() as usize + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = i as f64 / spec.rate;
        let point = eval_path(spec, t);
        let (phi, omega) = match spec.heading {
            HeadingMode::Path => (
                RotVec::new(Vector3::new(0.0, 0.0, point.yaw)),
                Vector3::new(0.0, 0.0, point.yaw_rate),
            ),
            HeadingMode::Fixed => (RotVec::zero(), Vector3::zeros()),
        };
        out.push(State { p: point.p, phi, v: point.v, omega, t });
    }
    Ok(out)
}
