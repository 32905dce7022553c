//! Sampling-based magnetic localization: the truncated matching cost, the
//! kinematic propagation, and the importance-weighted Monte-Carlo state
//! update with cost shifting.
//!
//! One step draws M motion increments τ = (a, ω) around a constant-velocity
//! prior, pushes each through the kinematic model, scores the resulting
//! states against the map with the truncated per-sensor cost, and returns the
//! softmax-weighted mean increment applied to the previous state. Sampling in
//! τ-space (6 dims) instead of full state space (12 dims) keeps the per-step
//! cost at a quarter of the full-state variant while producing exactly the
//! kinematically consistent subset of states.

use crate::map::MagneticMap;
use crate::numeric::pairwise_sum;
use crate::sim::{MeasurementFrame, SensorRig};
use crate::so3::{exp_so3, log_so3, RotMat, RotVec};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Full 12-dimensional robot state plus its timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    /// Position, meters, world frame.
    pub p: Vector3<f64>,
    /// Orientation as a canonical axis-angle vector.
    pub phi: RotVec,
    /// Linear velocity, m/s, world frame.
    pub v: Vector3<f64>,
    /// Angular velocity, rad/s, body frame.
    pub omega: Vector3<f64>,
    /// Seconds.
    pub t: f64,
}

impl State {
    pub fn at_rest(p: Vector3<f64>, t: f64) -> Self {
        State { p, phi: RotVec::zero(), v: Vector3::zeros(), omega: Vector3::zeros(), t }
    }

    pub fn rotation(&self) -> RotMat {
        exp_so3(&self.phi)
    }
}

/// Sampled 6-dim motion increment: acceleration and angular velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSample {
    /// m/s², world frame.
    pub a: Vector3<f64>,
    /// rad/s, body frame.
    pub omega: Vector3<f64>,
}

impl ControlSample {
    pub fn zero() -> Self {
        ControlSample { a: Vector3::zeros(), omega: Vector3::zeros() }
    }
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    /// Monte-Carlo sample count M.
    pub samples: usize,
    /// Softmax temperature λ, in cost units (µT²).
    pub lambda: f64,
    /// Truncation ceiling c² per sensor, µT². `f64::INFINITY` disables
    /// truncation (the non-robust ablation).
    pub c_squared: f64,
    /// Per-axis standard deviations of the sampled acceleration, m/s².
    pub accel_std: Vector3<f64>,
    /// Per-axis standard deviations of the sampled angular velocity, rad/s.
    pub omega_std: Vector3<f64>,
    pub rng_seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            samples: 1024,
            lambda: 1.0,
            c_squared: default_cost_ceiling(0.5),
            accel_std: Vector3::new(1.0, 1.0, 1.0),
            omega_std: Vector3::new(0.3, 0.3, 0.3),
            rng_seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let ok = self.samples >= 1
            && self.lambda > 0.0
            && self.c_squared > 0.0
            && self.accel_std.iter().all(|s| *s >= 0.0)
            && self.omega_std.iter().all(|s| *s >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(EstimatorError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Residual ceiling for a 3-sigma-per-component inlier bound: (3σ·√3)².
///
/// This covers measurement noise only; scenes with strong in-cell field
/// gradients should add margin on top (see the tuning notes in the README).
pub fn default_cost_ceiling(sigma_n: f64) -> f64 {
    (3.0 * sigma_n).powi(2) * 3.0
}

/// Per-step observability of the sampler internals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    /// Best sample cost S_min, µT².
    pub s_min: f64,
    /// 1/Σw² of the normalized weights.
    pub effective_sample_size: f64,
    /// Inlier fraction of the best sample.
    pub inlier_fraction: f64,
    /// Wall-clock seconds spent in the step.
    pub elapsed: f64,
    /// Samples dropped for non-finite cost.
    pub discarded: usize,
    /// True when the step failed and the state is a constant-velocity coast.
    pub failed: bool,
}

#[derive(Debug)]
pub enum EstimatorError {
    EmptyMap,
    NonPositiveDt { prev_t: f64, frame_t: f64 },
    FrameRigMismatch { readings: usize, sensors: usize },
    /// Every sample produced a non-finite cost.
    AllSamplesDiscarded,
    FramesNotTimeOrdered,
    NoFrames,
    InvalidConfig(String),
}

impl std::fmt::Display for EstimatorError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorError::EmptyMap => write!(f, "magnetic map holds no cells"),
            EstimatorError::NonPositiveDt { prev_t, frame_t } => {
                write!(f, "frame time {frame_t} not after state time {prev_t}")
            }
            EstimatorError::FrameRigMismatch { readings, sensors } => {
                write!(f, "frame has {readings} readings but rig has {sensors} sensors")
            }
            EstimatorError::AllSamplesDiscarded => {
                write!(f, "all samples discarded (non-finite costs)")
            }
            EstimatorError::FramesNotTimeOrdered => {
                write!(f, "frames are not strictly time-ordered after the initial state")
            }
            EstimatorError::NoFrames => write!(f, "empty frame list"),
            EstimatorError::InvalidConfig(msg) => write!(f, "invalid estimator config: {msg}"),
        }
    }
}

impl std::error::Error for EstimatorError {}

/// World-frame pose of sensor `i`: Rᵢ = R·ᵇRᵢ, pᵢ = R·ᵇpᵢ + p.
pub fn sensor_pose(x: &State, rig: &SensorRig, i: usize) -> (RotMat, Vector3<f64>) {
    let r = x.rotation();
    sensor_pose_with(&r, &x.p, rig, i)
}

#[inline]
fn sensor_pose_with(
    r: &RotMat,
    p: &Vector3<f64>,
    rig: &SensorRig,
    i: usize,
) -> (RotMat, Vector3<f64>) {
    let ext = &rig.sensors[i];
    (r.compose(&ext.rotation), r.rotate(&ext.translation) + p)
}

/// Truncated matching cost of a state against one measurement frame.
///
/// Per sensor: r² = ‖𝕄(pᵢ) − Rᵢ·Bᵢ‖²; an unmapped cell or r² ≥ c² counts as
/// an outlier contributing exactly c², otherwise the sensor is an inlier
/// contributing r². Returns the summed cost and the inlier count.
pub fn matching_cost(
    x: &State,
    frame: &MeasurementFrame,
    map: &MagneticMap,
    rig: &SensorRig,
    c_squared: f64,
) -> (f64, usize) {
    let r = x.rotation();
    matching_cost_with(&r, &x.p, frame, map, rig, c_squared)
}

#[inline]
fn matching_cost_with(
    r: &RotMat,
    p: &Vector3<f64>,
    frame: &MeasurementFrame,
    map: &MagneticMap,
    rig: &SensorRig,
    c_squared: f64,
) -> (f64, usize) {
    let mut cost = 0.0;
    let mut inliers = 0usize;
    for i in 0..rig.len() {
        let (ri, pi) = sensor_pose_with(r, p, rig, i);
        match map.query(&pi) {
            Some(field) => {
                let world_reading = ri.rotate(&frame.readings[i]);
                let r2 = (field - world_reading).norm_squared();
                if r2 >= c_squared {
                    cost += c_squared;
                } else {
                    cost += r2;
                    inliers += 1;
                }
            }
            None => cost += c_squared,
        }
    }
    (cost, inliers)
}

/// Kinematic propagation over dt:
/// p' = p + vΔt + ½aΔt², R' = exp(⌊ωΔt⌋ₓ)·R, v' = v + aΔt, ω' = ω.
pub fn propagate(x: &State, tau: &ControlSample, dt: f64) -> State {
    let p = x.p + x.v * dt + tau.a * (0.5 * dt * dt);
    let r = exp_so3(&RotVec::new(tau.omega * dt)).compose(&x.rotation());
    State {
        p,
        phi: log_so3(&r),
        v: x.v + tau.a * dt,
        omega: tau.omega,
        t: x.t + dt,
    }
}

/// Shifted softmax weights exp(−(Sⱼ−S_min)/λ) / Σₖ exp(−(Sₖ−S_min)/λ).
///
/// Non-finite costs get weight zero and are excluded from S_min. Returns the
/// normalized weights, S_min, and the number of valid samples; `None` when no
/// cost was finite. Subtracting S_min keeps the best exponent at zero so the
/// normalization never underflows to 0/0.
pub fn softmax_weights(costs: &[f64], lambda: f64) -> Option<(Vec<f64>, f64, usize)> {
    let mut s_min = f64::INFINITY;
    let mut valid = 0usize;
    for &s in costs {
        if s.is_finite() {
            valid += 1;
            if s < s_min {
                s_min = s;
            }
        }
    }
    if valid == 0 {
        return None;
    }
    let mut weights: Vec<f64> = costs
        .iter()
        .map(|&s| if s.is_finite() { (-(s - s_min) / lambda).exp() } else { 0.0 })
        .collect();
    let total = pairwise_sum(&weights);
    for w in &mut weights {
        *w /= total;
    }
    Some((weights, s_min, valid))
}

/// 1/Σw² of already-normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let sq: Vec<f64> = weights.iter().map(|w| w * w).collect();
    1.0 / pairwise_sum(&sq)
}

/// Per-step sampling stream: one generator per (seed, frame time).
fn step_rng(seed: u64, frame_t: f64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_t.to_bits());
    rng
}

/// Draws M motion increments around `center` with the configured per-axis
/// standard deviations.
pub(crate) fn draw_controls(
    rng: &mut ChaCha8Rng,
    center: &ControlSample,
    cfg: &EstimatorConfig,
) -> Vec<ControlSample> {
    let normal = StandardNormal;
    (0..cfg.samples)
        .map(|_| {
            let mut a = Vector3::zeros();
            let mut w = Vector3::zeros();
            for i in 0..3 {
                let z: f64 = normal.sample(rng);
                a[i] = center.a[i] + cfg.accel_std[i] * z;
            }
            for i in 0..3 {
                let z: f64 = normal.sample(rng);
                w[i] = center.omega[i] + cfg.omega_std[i] * z;
            }
            ControlSample { a, omega: w }
        })
        .collect()
}

/// Weighted mean increment, reduced per component with fixed-order pairwise
/// summation so the result does not depend on evaluation order.
pub fn weighted_mean_control(taus: &[ControlSample], weights: &[f64]) -> ControlSample {
    debug_assert_eq!(taus.len(), weights.len());
    let mut terms = vec![0.0; taus.len()];
    let mut component = |get: &dyn Fn(&ControlSample) -> f64| -> f64 {
        for (slot, (tau, w)) in terms.iter_mut().zip(taus.iter().zip(weights)) {
            *slot = get(tau) * w;
        }
        pairwise_sum(&terms)
    };
    let a = Vector3::new(
        component(&|t| t.a.x),
        component(&|t| t.a.y),
        component(&|t| t.a.z),
    );
    let omega = Vector3::new(
        component(&|t| t.omega.x),
        component(&|t| t.omega.y),
        component(&|t| t.omega.z),
    );
    ControlSample { a, omega }
}

/// One estimation step: sample, propagate, score, and collapse to the
/// weighted mean increment. Deterministic given `cfg.rng_seed` and the frame
/// timestamp; the M cost evaluations run in parallel against the read-only
/// map and frame.
pub fn estimate_step(
    prev: &State,
    frame: &MeasurementFrame,
    map: &MagneticMap,
    rig: &SensorRig,
    cfg: &EstimatorConfig,
) -> Result<(State, StepDiagnostics), EstimatorError> {
    let started = std::time::Instant::now();
    cfg.validate()?;
    if map.is_empty() {
        return Err(EstimatorError::EmptyMap);
    }
    if frame.readings.len() != rig.len() {
        return Err(EstimatorError::FrameRigMismatch {
            readings: frame.readings.len(),
            sensors: rig.len(),
        });
    }
    let dt = frame.t - prev.t;
    if !(dt > 0.0) {
        return Err(EstimatorError::NonPositiveDt { prev_t: prev.t, frame_t: frame.t });
    }

    // Constant-velocity prior: zero acceleration, previous angular velocity
    // (the ω̂ of the last accepted increment lives on in the state).
    let center = ControlSample { a: Vector3::zeros(), omega: prev.omega };
    let mut rng = step_rng(cfg.rng_seed, frame.t);
    let taus = draw_controls(&mut rng, &center, cfg);

    let sensors = rig.len() as f64;
    let scored: Vec<(f64, usize)> = taus
        .par_iter()
        .map(|tau| {
            let candidate = propagate(prev, tau, dt);
            matching_cost(&candidate, frame, map, rig, cfg.c_squared)
        })
        .collect();

    let costs: Vec<f64> = scored.iter().map(|(c, _)| *c).collect();
    let (weights, s_min, valid) =
        softmax_weights(&costs, cfg.lambda).ok_or(EstimatorError::AllSamplesDiscarded)?;

    let tau_hat = weighted_mean_control(&taus, &weights);
    let state = propagate(prev, &tau_hat, dt);

    let best = costs
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("at least one valid sample");
    let diag = StepDiagnostics {
        s_min,
        effective_sample_size: effective_sample_size(&weights),
        inlier_fraction: scored[best].1 as f64 / sensors,
        elapsed: started.elapsed().as_secs_f64(),
        discarded: cfg.samples - valid,
        failed: false,
    };
    Ok((state, diag))
}

/// Folds [`estimate_step`] over a time-ordered frame sequence. A step whose
/// samples are all discarded does not abort the run: the state coasts at
/// constant velocity and the record carries `failed = true`.
pub fn run_sequence(
    frames: &[MeasurementFrame],
    initial: &State,
    map: &MagneticMap,
    rig: &SensorRig,
    cfg: &EstimatorConfig,
) -> Result<Vec<(State, StepDiagnostics)>, EstimatorError> {
    if frames.is_empty() {
        return Err(EstimatorError::NoFrames);
    }
    let mut t_prev = initial.t;
    for f in frames {
        if !(f.t > t_prev) {
            return Err(EstimatorError::FramesNotTimeOrdered);
        }
        t_prev = f.t;
    }

    let mut out = Vec::with_capacity(frames.len());
    let mut state = *initial;
    for frame in frames {
        match estimate_step(&state, frame, map, rig, cfg) {
            Ok((next, diag)) => {
                state = next;
                out.push((state, diag));
            }
            Err(EstimatorError::AllSamplesDiscarded) => {
                let dt = frame.t - state.t;
                let coast = ControlSample { a: Vector3::zeros(), omega: state.omega };
                state = propagate(&state, &coast, dt);
                out.push((
                    state,
                    StepDiagnostics {
                        s_min: f64::NAN,
                        effective_sample_size: 0.0,
                        inlier_fraction: 0.0,
                        elapsed: 0.0,
                        discarded: cfg.samples,
                        failed: true,
                    },
                ));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{MagneticMap, MapCellKey};
    use crate::sim::{MeasurementFrame, SensorExtrinsic, SensorRig};
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use rand::Rng;
    use std::collections::HashMap;
    use std::f64::consts::PI;

    fn constant_map(extent_cells: i32, field: Vector3<f64>) -> MagneticMap {
        let mut cells = HashMap::new();
        for ix in -extent_cells..extent_cells {
            for iy in -extent_cells..extent_cells {
                for iz in -2..2 {
                    cells.insert(MapCellKey { ix, iy, iz }, field);
                }
            }
        }
        MagneticMap::from_cells(0.05, cells, field).unwrap()
    }

    fn simple_rig(n: usize) -> SensorRig {
        let sensors = (0..n)
            .map(|i| SensorExtrinsic {
                rotation: RotMat::identity(),
                translation: Vector3::new(0.0, 0.1 * i as f64, 0.0),
            })
            .collect();
        SensorRig { sensors }
    }

    #[test]
    fn sensor_pose_identity() {
        let rig = simple_rig(1);
        let x = State::at_rest(Vector3::zeros(), 0.0);
        let (r, p) = sensor_pose(&x, &rig, 0);
        assert_eq!(r.matrix(), RotMat::identity().matrix());
        assert_eq!(p, Vector3::zeros());
    }

    #[test]
    fn sensor_pose_translation_composes() {
        let rig = SensorRig {
            sensors: vec![SensorExtrinsic {
                rotation: RotMat::identity(),
                translation: Vector3::new(0.0, 1.0, 0.0),
            }],
        };
        let x = State::at_rest(Vector3::new(1.0, 0.0, 0.0), 0.0);
        let (_, p) = sensor_pose(&x, &rig, 0);
        assert_eq!(p, Vector3::new(1.0, 1.0, 0.0));
    }

    #[test]
    fn sensor_pose_matches_homogeneous_transform_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let rand_vec = |rng: &mut rand_chacha::ChaCha8Rng, s: f64| {
                Vector3::new(
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                )
            };
            let phi = RotVec::new(rand_vec(&mut rng, 1.5));
            let ext_phi = RotVec::new(rand_vec(&mut rng, 1.5));
            let rig = SensorRig {
                sensors: vec![SensorExtrinsic {
                    rotation: exp_so3(&ext_phi),
                    translation: rand_vec(&mut rng, 0.5),
                }],
            };
            let x = State {
                p: rand_vec(&mut rng, 5.0),
                phi,
                v: Vector3::zeros(),
                omega: Vector3::zeros(),
                t: 0.0,
            };
            let (r, p) = sensor_pose(&x, &rig, 0);

            // Oracle: 4×4 homogeneous matrix composition.
            let homog = |rot: &RotMat, trans: &Vector3<f64>| {
                let mut m = Matrix4::identity();
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
                m.fixed_view_mut::<3, 1>(0, 3).copy_from(trans);
                m
            };
            let world = homog(&x.rotation(), &x.p)
                * homog(&rig.sensors[0].rotation, &rig.sensors[0].translation);
            for i in 0..3 {
                assert_relative_eq!(p[i], world[(i, 3)], epsilon = 1e-12);
                for j in 0..3 {
                    assert_relative_eq!(r.matrix()[(i, j)], world[(i, j)], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn matching_cost_zero_for_perfect_readings() {
        let field = Vector3::new(20.0, 0.0, -45.0);
        let map = constant_map(10, field);
        let rig = simple_rig(3);
        let x = State::at_rest(Vector3::new(0.02, 0.02, 0.02), 0.0);
        let frame = MeasurementFrame {
            t: 0.1,
            readings: vec![field; 3],
            truth_outlier_mask: vec![false; 3],
        };
        let (cost, inliers) = matching_cost(&x, &frame, &map, &rig, 6.75);
        assert!(cost < 1e-20);
        assert_eq!(inliers, 3);
    }

    #[test]
    fn matching_cost_all_unmapped_hits_ceiling() {
        let map = constant_map(4, Vector3::new(20.0, 0.0, -45.0));
        let rig = simple_rig(5);
        let x = State::at_rest(Vector3::new(100.0, 100.0, 0.0), 0.0);
        let frame = MeasurementFrame {
            t: 0.1,
            readings: vec![Vector3::zeros(); 5],
            truth_outlier_mask: vec![false; 5],
        };
        let c2 = 6.75;
        let (cost, inliers) = matching_cost(&x, &frame, &map, &rig, c2);
        assert_relative_eq!(cost, 5.0 * c2, epsilon = 1e-12);
        assert_eq!(inliers, 0);
    }

    #[test]
    fn matching_cost_matches_per_sensor_hand_evaluation() {
        let field = Vector3::new(20.0, 0.0, -45.0);
        let map = constant_map(10, field);
        let rig = simple_rig(3);
        let x = State::at_rest(Vector3::new(0.02, 0.02, 0.02), 0.0);
        let c2 = 6.75;
        // Sensor 1 gets a gross offset, the others a small one.
        let small = Vector3::new(0.5, 0.0, 0.0);
        let frame = MeasurementFrame {
            t: 0.1,
            readings: vec![field + small, field + Vector3::new(30.0, 0.0, 0.0), field + small],
            truth_outlier_mask: vec![false; 3],
        };
        let (cost, inliers) = matching_cost(&x, &frame, &map, &rig, c2);
        // Hand oracle: residual = map − reading per sensor.
        let expected = 0.25 + c2 + 0.25;
        assert_relative_eq!(cost, expected, epsilon = 1e-12);
        assert_eq!(inliers, 2);
    }

    #[test]
    fn outlier_replacement_leaves_cost_unchanged() {
        let field = Vector3::new(20.0, 0.0, -45.0);
        let map = constant_map(10, field);
        let rig = simple_rig(4);
        let x = State::at_rest(Vector3::new(0.02, 0.02, 0.02), 0.0);
        let c2 = 6.75;
        let mut readings = vec![field; 4];
        readings[2] = field + Vector3::new(10.0, 0.0, 0.0);
        let frame = MeasurementFrame {
            t: 0.1,
            readings: readings.clone(),
            truth_outlier_mask: vec![false; 4],
        };
        let (base_cost, base_inliers) = matching_cost(&x, &frame, &map, &rig, c2);
        // Any replacement that keeps r² ≥ c² must not move the cost at all.
        for offset in [11.0, 50.0, 400.0, -25.0] {
            let mut other = readings.clone();
            other[2] = field + Vector3::new(offset, offset, 0.0);
            let frame2 = MeasurementFrame {
                t: 0.1,
                readings: other,
                truth_outlier_mask: vec![false; 4],
            };
            let (cost, inliers) = matching_cost(&x, &frame2, &map, &rig, c2);
            assert_eq!(cost, base_cost);
            assert_eq!(inliers, base_inliers);
        }
    }

    #[test]
    fn truncation_ceiling_property() {
        let field = Vector3::new(20.0, 0.0, -45.0);
        let map = constant_map(10, field);
        let rig = simple_rig(5);
        let c2 = 6.75;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let x = State::at_rest(
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-0.2..0.2),
                ),
                0.0,
            );
            let readings: Vec<Vector3<f64>> = (0..5)
                .map(|_| {
                    field
                        + Vector3::new(
                            rng.random_range(-20.0..20.0),
                            rng.random_range(-20.0..20.0),
                            rng.random_range(-20.0..20.0),
                        )
                })
                .collect();
            let frame =
                MeasurementFrame { t: 0.1, readings, truth_outlier_mask: vec![false; 5] };
            let (cost, inliers) = matching_cost(&x, &frame, &map, &rig, c2);
            assert!(cost <= 5.0 * c2 + 1e-12);
            if inliers == 0 {
                assert_relative_eq!(cost, 5.0 * c2, epsilon = 1e-12);
            } else {
                assert!(cost < 5.0 * c2);
            }
        }
    }

    #[test]
    fn propagate_zero_motion_is_fixed_point() {
        let x = State::at_rest(Vector3::new(1.0, 2.0, 3.0), 5.0);
        let next = propagate(&x, &ControlSample::zero(), 0.25);
        assert_eq!(next.p, x.p);
        assert_eq!(next.phi, x.phi);
        assert_eq!(next.v, x.v);
        assert_eq!(next.omega, x.omega);
        assert_relative_eq!(next.t, 5.25);
    }

    #[test]
    fn propagate_advances_position_by_velocity() {
        let mut x = State::at_rest(Vector3::zeros(), 0.0);
        x.v = Vector3::new(1.0, 0.0, 0.0);
        let next = propagate(&x, &ControlSample::zero(), 0.01);
        assert_relative_eq!(next.p, Vector3::new(0.01, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn propagate_matches_independent_integrators() {
        // Quaternion integration oracle, written without the so3 module.
        fn quat_from_axis_angle(v: &Vector3<f64>) -> [f64; 4] {
            let theta = v.norm();
            if theta < 1e-12 {
                return [1.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z];
            }
            let half = 0.5 * theta;
            let s = half.sin() / theta;
            [half.cos(), v.x * s, v.y * s, v.z * s]
        }
        fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
            [
                a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
            ]
        }
        fn quat_to_matrix(q: &[f64; 4]) -> nalgebra::Matrix3<f64> {
            let [w, x, y, z] = *q;
            nalgebra::Matrix3::new(
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            )
        }

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dt = 0.01;
        for _ in 0..100 {
            let rand_vec = |rng: &mut rand_chacha::ChaCha8Rng, s: f64| {
                Vector3::new(
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                )
            };
            let x = State {
                p: rand_vec(&mut rng, 5.0),
                phi: RotVec::new(rand_vec(&mut rng, 1.5)),
                v: rand_vec(&mut rng, 2.0),
                omega: rand_vec(&mut rng, 1.0),
                t: 0.0,
            };
            let tau =
                ControlSample { a: rand_vec(&mut rng, 3.0), omega: rand_vec(&mut rng, 2.0) };
            let next = propagate(&x, &tau, dt);

            // Two-term Taylor position oracle, computed per component.
            for i in 0..3 {
                let expect = x.p[i] + x.v[i] * dt + 0.5 * tau.a[i] * dt * dt;
                assert_relative_eq!(next.p[i], expect, epsilon = 1e-15);
                assert_relative_eq!(next.v[i], x.v[i] + tau.a[i] * dt, epsilon = 1e-15);
            }

            let q_prev = quat_from_axis_angle(x.phi.as_vector());
            let q_inc = quat_from_axis_angle(&(tau.omega * dt));
            let oracle = quat_to_matrix(&quat_mul(&q_inc, &q_prev));
            let got = next.rotation();
            for i in 0..3 {
                for j in 0..3 {
                    assert_relative_eq!(got.matrix()[(i, j)], oracle[(i, j)], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn softmax_closed_form_two_samples() {
        let lambda = 0.7;
        let costs = [0.0, lambda * 3f64.ln()];
        let (w, s_min, valid) = softmax_weights(&costs, lambda).unwrap();
        assert_relative_eq!(w[0], 0.75, epsilon = 1e-12);
        assert_relative_eq!(w[1], 0.25, epsilon = 1e-12);
        assert_eq!(s_min, 0.0);
        assert_eq!(valid, 2);
    }

    #[test]
    fn weights_normalize_within_1e12() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let costs: Vec<f64> =
                (0..2048).map(|_| rng.random_range(0.0..100.0)).collect();
            let (w, _, _) = softmax_weights(&costs, 1.0).unwrap();
            assert!((pairwise_sum(&w) - 1.0).abs() < 1e-12);
            let ess = effective_sample_size(&w);
            assert!(ess > 0.0 && ess <= costs.len() as f64 + 1e-9);
        }
    }

    #[test]
    fn cost_shift_matches_unshifted_and_survives_huge_costs() {
        // Unshifted oracle, valid while nothing underflows.
        let naive = |costs: &[f64], lambda: f64| -> Vec<f64> {
            let raw: Vec<f64> = costs.iter().map(|s| (-s / lambda).exp()).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|r| r / total).collect()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let costs: Vec<f64> = (0..512).map(|_| rng.random_range(0.0..50.0)).collect();
        let (shifted, _, _) = softmax_weights(&costs, 1.0).unwrap();
        let reference = naive(&costs, 1.0);
        for (a, b) in shifted.iter().zip(&reference) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }

        // Costs near 10⁶: the shifted weights stay finite, the naive form
        // collapses to 0/0.
        let huge: Vec<f64> = (0..64).map(|i| 1e6 + i as f64).collect();
        let (w, s_min, _) = softmax_weights(&huge, 1.0).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert_relative_eq!(pairwise_sum(&w), 1.0, epsilon = 1e-12);
        assert_eq!(s_min, 1e6);
        assert!(naive(&huge, 1.0).iter().all(|x| x.is_nan()));
    }

    #[test]
    fn non_finite_costs_are_discarded() {
        let costs = [1.0, f64::INFINITY, 2.0, f64::NAN];
        let (w, s_min, valid) = softmax_weights(&costs, 1.0).unwrap();
        assert_eq!(valid, 2);
        assert_eq!(w[1], 0.0);
        assert_eq!(w[3], 0.0);
        assert_eq!(s_min, 1.0);
        assert!(softmax_weights(&[f64::NAN, f64::INFINITY], 1.0).is_none());
    }

    /// Discrete check of the variational identities behind the weights: with
    /// q* ∝ q·exp(−S/λ), the expected cost plus λ·KL(q*‖q) equals the free
    /// energy −λ·log E_q[exp(−S/λ)] exactly, and any other distribution only
    /// increases the left-hand side.
    #[test]
    fn weight_identities_hold_on_discrete_toy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for lambda in [0.1, 1.0, 10.0] {
            let n = 64;
            let mut q: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let qt: f64 = q.iter().sum();
            q.iter_mut().for_each(|x| *x /= qt);
            let costs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();

            let z: f64 = q.iter().zip(&costs).map(|(qi, s)| qi * (-s / lambda).exp()).sum();
            let free_energy = -lambda * z.ln();
            let q_star: Vec<f64> =
                q.iter().zip(&costs).map(|(qi, s)| qi * (-s / lambda).exp() / z).collect();

            let expected_cost: f64 = q_star.iter().zip(&costs).map(|(p, s)| p * s).sum();
            let kl: f64 = q_star
                .iter()
                .zip(&q)
                .map(|(p, qi)| if *p > 0.0 { p * (p / qi).ln() } else { 0.0 })
                .sum();
            assert_relative_eq!(expected_cost + lambda * kl, free_energy, epsilon = 1e-9);

            // Perturbed distribution: the bound must hold with slack.
            let mut alt: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let at: f64 = alt.iter().sum();
            alt.iter_mut().for_each(|x| *x /= at);
            let alt_cost: f64 = alt.iter().zip(&costs).map(|(p, s)| p * s).sum();
            let alt_kl: f64 =
                alt.iter().zip(&q).map(|(p, qi)| p * (p / qi).ln()).sum();
            assert!(alt_cost + lambda * alt_kl >= free_energy - 1e-9);
        }
    }

    #[test]
    fn equal_costs_give_arithmetic_mean_of_samples() {
        // Far outside the map every sample scores N·c², so the weighted mean
        // must equal the plain mean of the drawn increments.
        let map = constant_map(4, Vector3::new(20.0, 0.0, -45.0));
        let rig = simple_rig(3);
        let cfg = EstimatorConfig { samples: 256, rng_seed: 42, ..Default::default() };
        let prev = State::at_rest(Vector3::new(50.0, 50.0, 0.0), 0.0);
        let frame = MeasurementFrame {
            t: 0.1,
            readings: vec![Vector3::zeros(); 3],
            truth_outlier_mask: vec![false; 3],
        };
        let (state, diag) = estimate_step(&prev, &frame, &map, &rig, &cfg).unwrap();

        let center = ControlSample { a: Vector3::zeros(), omega: prev.omega };
        let mut rng = step_rng(cfg.rng_seed, frame.t);
        let taus = draw_controls(&mut rng, &center, &cfg);
        let uniform = vec![1.0 / taus.len() as f64; taus.len()];
        let mean = weighted_mean_control(&taus, &uniform);
        let expect = propagate(&prev, &mean, 0.1);
        assert_relative_eq!(state.p, expect.p, epsilon = 1e-9);
        assert_relative_eq!(state.v, expect.v, epsilon = 1e-9);
        assert_relative_eq!(diag.effective_sample_size, 256.0, epsilon = 1e-6);
        assert_relative_eq!(diag.s_min, 3.0 * cfg.c_squared, epsilon = 1e-12);
    }

    #[test]
    fn lambda_to_zero_converges_to_argmin_sample() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let taus: Vec<ControlSample> = (0..128)
            .map(|_| ControlSample {
                a: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0),
                omega: Vector3::new(0.0, 0.0, rng.random_range(-1.0..1.0)),
            })
            .collect();
        let costs: Vec<f64> = (0..128).map(|_| rng.random_range(1.0..100.0)).collect();
        let (w, _, _) = softmax_weights(&costs, 1e-6).unwrap();
        let mean = weighted_mean_control(&taus, &w);
        let best = costs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        assert!((mean.a - taus[best].a).norm() < 1e-6);
        assert!((mean.omega - taus[best].omega).norm() < 1e-6);
    }

    #[test]
    fn tau_sampling_equals_restricted_full_state_sampling() {
        // With identity starting orientation the manifold update is linear in
        // ωΔt, so averaging propagated states equals propagating the averaged
        // increment. Position and velocity are linear in τ for any start.
        let prev = State {
            p: Vector3::new(1.0, -2.0, 0.5),
            phi: RotVec::zero(),
            v: Vector3::new(0.3, 0.0, 0.0),
            omega: Vector3::new(0.0, 0.0, 0.2),
            t: 0.0,
        };
        let dt = 0.05;
        let cfg = EstimatorConfig { samples: 512, rng_seed: 3, ..Default::default() };
        let center = ControlSample { a: Vector3::zeros(), omega: prev.omega };
        let mut rng = step_rng(cfg.rng_seed, dt);
        let taus = draw_controls(&mut rng, &center, &cfg);
        let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let raw: Vec<f64> = (0..taus.len()).map(|_| rng2.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

        // Route A: collapse in τ-space, then propagate.
        let tau_hat = weighted_mean_control(&taus, &weights);
        let via_tau = propagate(&prev, &tau_hat, dt);

        // Route B: propagate every sample (full-state construction), then
        // average the kinematically consistent states.
        let states: Vec<State> = taus.iter().map(|t| propagate(&prev, t, dt)).collect();
        let avg = |get: &dyn Fn(&State) -> f64| -> f64 {
            states.iter().zip(&weights).map(|(s, w)| get(s) * w).sum()
        };
        for i in 0..3 {
            assert_relative_eq!(via_tau.p[i], avg(&|s: &State| s.p[i]), epsilon = 1e-9);
            assert_relative_eq!(via_tau.v[i], avg(&|s: &State| s.v[i]), epsilon = 1e-9);
            assert_relative_eq!(via_tau.omega[i], avg(&|s: &State| s.omega[i]), epsilon = 1e-9);
            assert_relative_eq!(
                via_tau.phi.as_vector()[i],
                avg(&|s: &State| s.phi.as_vector()[i]),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn estimate_step_errors() {
        let empty =
            MagneticMap::from_cells(0.05, HashMap::new(), Vector3::zeros()).unwrap();
        let rig = simple_rig(2);
        let prev = State::at_rest(Vector3::zeros(), 0.0);
        let frame = MeasurementFrame {
            t: 0.1,
            readings: vec![Vector3::zeros(); 2],
            truth_outlier_mask: vec![false; 2],
        };
        assert!(matches!(
            estimate_step(&prev, &frame, &empty, &rig, &EstimatorConfig::default()),
            Err(EstimatorError::EmptyMap)
        ));

        let map = constant_map(4, Vector3::new(20.0, 0.0, -45.0));
        let stale = MeasurementFrame { t: -1.0, ..frame.clone() };
        assert!(matches!(
            estimate_step(&prev, &stale, &map, &rig, &EstimatorConfig::default()),
            Err(EstimatorError::NonPositiveDt { .. })
        ));

        let short = MeasurementFrame {
            t: 0.1,
            readings: vec![Vector3::zeros()],
            truth_outlier_mask: vec![false],
        };
        assert!(matches!(
            estimate_step(&prev, &short, &map, &rig, &EstimatorConfig::default()),
            Err(EstimatorError::FrameRigMismatch { .. })
        ));
    }

    #[test]
    fn run_sequence_base_cases() {
        let map = constant_map(10, Vector3::new(20.0, 0.0, -45.0));
        let rig = simple_rig(2);
        let initial = State::at_rest(Vector3::new(0.02, 0.02, 0.02), 0.0);
        let frame = MeasurementFrame {
            t: 0.1,
            readings: vec![Vector3::new(20.0, 0.0, -45.0); 2],
            truth_outlier_mask: vec![false; 2],
        };
        let cfg = EstimatorConfig { samples: 64, ..Default::default() };
        let out = run_sequence(&[frame.clone()], &initial, &map, &rig, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert!(!out[0].1.failed);

        assert!(matches!(
            run_sequence(&[], &initial, &map, &rig, &cfg),
            Err(EstimatorError::NoFrames)
        ));
        let unordered = vec![frame.clone(), frame.clone()];
        assert!(matches!(
            run_sequence(&unordered, &initial, &map, &rig, &cfg),
            Err(EstimatorError::FramesNotTimeOrdered)
        ));
    }

    #[test]
    fn run_sequence_is_seed_deterministic() {
        let map = constant_map(10, Vector3::new(20.0, 0.0, -45.0));
        let rig = simple_rig(3);
        let initial = State::at_rest(Vector3::new(0.02, 0.02, 0.02), 0.0);
        let frames: Vec<MeasurementFrame> = (1..10)
            .map(|k| MeasurementFrame {
                t: k as f64 * 0.1,
                readings: vec![Vector3::new(20.0, 0.0, -45.0); 3],
                truth_outlier_mask: vec![false; 3],
            })
            .collect();
        let cfg = EstimatorConfig { samples: 128, rng_seed: 77, ..Default::default() };
        let a = run_sequence(&frames, &initial, &map, &rig, &cfg).unwrap();
        let b = run_sequence(&frames, &initial, &map, &rig, &cfg).unwrap();
        for ((sa, da), (sb, db)) in a.iter().zip(&b) {
            for i in 0..3 {
                assert_eq!(sa.p[i].to_bits(), sb.p[i].to_bits());
                assert_eq!(sa.v[i].to_bits(), sb.v[i].to_bits());
                assert_eq!(sa.phi.as_vector()[i].to_bits(), sb.phi.as_vector()[i].to_bits());
            }
            assert_eq!(da.s_min.to_bits(), db.s_min.to_bits());
        }
    }

    #[test]
    fn rotvec_half_pi_canonical_in_config_space() {
        // Guard that orientation canonicalization is preserved through
        // propagation with large sampled rates.
        let x = State::at_rest(Vector3::zeros(), 0.0);
        let tau = ControlSample { a: Vector3::zeros(), omega: Vector3::new(0.0, 0.0, 40.0) };
        let next = propagate(&x, &tau, 0.1);
        assert!(next.phi.angle() <= PI + 1e-12);
    }
}
