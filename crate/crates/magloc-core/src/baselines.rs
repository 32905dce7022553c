//! Reference estimators for the comparison harness: a bootstrap particle
//! filter with a Gaussian measurement likelihood and a Gauss-Newton
//! map-matching localizer.
//!
//! Both implement the mechanisms of the compared method families at desk
//! scale, deliberately without outlier handling: the PF multiplies plain
//! Gaussian likelihoods over the summed sensor residuals, and GN minimizes
//! the untruncated least-squares alignment cost. Their failure modes under
//! heavy-tailed noise (weight collapse, flat-gradient degeneracy) are the
//! point of the comparison, not a defect.

use crate::estimator::{propagate, ControlSample, State, StepDiagnostics};
use crate::map::MagneticMap;
use crate::numeric::pairwise_sum;
use crate::sim::{MeasurementFrame, SensorRig};
use crate::so3::{exp_so3, log_so3, skew, RotVec};
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug)]
pub enum BaselineError {
    NoParticles,
    EmptyMap,
    NonPositiveDt { prev_t: f64, frame_t: f64 },
    FrameRigMismatch { readings: usize, sensors: usize },
    NoFrames,
    FramesNotTimeOrdered,
}

impl std::fmt::Display for BaselineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BaselineError::NoParticles => write!(f, "particle set is empty"),
            BaselineError::EmptyMap => write!(f, "magnetic map holds no cells"),
            BaselineError::NonPositiveDt { prev_t, frame_t } => {
                write!(f, "frame time {frame_t} not after state time {prev_t}")
            }
            BaselineError::FrameRigMismatch { readings, sensors } => {
                write!(f, "frame has {readings} readings but rig has {sensors} sensors")
            }
            BaselineError::NoFrames => write!(f, "empty frame list"),
            BaselineError::FramesNotTimeOrdered => write!(f, "frames are not time-ordered"),
        }
    }
}

impl std::error::Error for BaselineError {}

/// One weighted state hypothesis.
#[derive(Debug, Clone, Copy)]
pub struct Particle {
    pub state: State,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct PfConfig {
    pub particles: usize,
    /// Measurement likelihood std σ, µT: weight ∝ exp(−Σr²/(2σ²)).
    pub meas_std: f64,
    /// Per-axis std of the sampled acceleration, m/s².
    pub accel_std: Vector3<f64>,
    /// Per-axis std of the sampled angular velocity, rad/s.
    pub omega_std: Vector3<f64>,
    pub rng_seed: u64,
}

impl Default for PfConfig {
    fn default() -> Self {
        PfConfig {
            particles: 1024,
            meas_std: 0.5,
            accel_std: Vector3::new(1.0, 1.0, 1.0),
            omega_std: Vector3::new(0.3, 0.3, 0.3),
            rng_seed: 0,
        }
    }
}

/// All particles at the initial state with uniform weights.
pub fn init_particles(initial: &State, count: usize) -> Vec<Particle> {
    vec![Particle { state: *initial, weight: 1.0 / count as f64 }; count]
}

/// Summed squared residual over all sensors, Gaussian-likelihood style (no
/// truncation). A sensor over an unmapped cell returns `None`: the particle
/// has left the known map and gets zero likelihood.
fn summed_residual(
    state: &State,
    frame: &MeasurementFrame,
    map: &MagneticMap,
    rig: &SensorRig,
) -> Option<f64> {
    let rot = state.rotation();
    let mut total = 0.0;
    for i in 0..rig.len() {
        let (ri, pi) = rig.world_pose(&rot, &state.p, i);
        let field = map.query(&pi)?;
        total += (field - ri.rotate(&frame.readings[i])).norm_squared();
    }
    Some(total)
}

#[derive(Debug, Clone, Copy)]
pub struct PfStepInfo {
    /// Best summed residual across particles, µT².
    pub best_residual: f64,
    pub ess: f64,
    pub resampled: bool,
    /// All likelihoods evaluated to exactly zero; weights were reset to
    /// uniform in lieu of a global re-initialization.
    pub degenerate: bool,
}

/// One bootstrap PF step: constant-velocity propagation with sampled noise,
/// Gaussian likelihood update, systematic resampling when ESS < M/2.
pub fn pf_step(
    particles: &mut Vec<Particle>,
    frame: &MeasurementFrame,
    map: &MagneticMap,
    rig: &SensorRig,
    cfg: &PfConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PfStepInfo, BaselineError> {
    if particles.is_empty() {
        return Err(BaselineError::NoParticles);
    }
    if map.is_empty() {
        return Err(BaselineError::EmptyMap);
    }
    if frame.readings.len() != rig.len() {
        return Err(BaselineError::FrameRigMismatch {
            readings: frame.readings.len(),
            sensors: rig.len(),
        });
    }
    let dt = frame.t - particles[0].state.t;
    if !(dt > 0.0) {
        return Err(BaselineError::NonPositiveDt {
            prev_t: particles[0].state.t,
            frame_t: frame.t,
        });
    }

    let inv_two_var = 1.0 / (2.0 * cfg.meas_std * cfg.meas_std);
    let mut best_residual = f64::INFINITY;
    for particle in particles.iter_mut() {
        let mut tau = ControlSample { a: Vector3::zeros(), omega: particle.state.omega };
        for i in 0..3 {
            let z: f64 = StandardNormal.sample(rng);
            tau.a[i] += cfg.accel_std[i] * z;
        }
        for i in 0..3 {
            let z: f64 = StandardNormal.sample(rng);
            tau.omega[i] += cfg.omega_std[i] * z;
        }
        particle.state = propagate(&particle.state, &tau, dt);
        match summed_residual(&particle.state, frame, map, rig) {
            Some(r2) => {
                if r2 < best_residual {
                    best_residual = r2;
                }
                particle.weight *= (-r2 * inv_two_var).exp();
            }
            None => particle.weight = 0.0,
        }
    }

    let weights: Vec<f64> = particles.iter().map(|p| p.weight).collect();
    let total = pairwise_sum(&weights);
    let m = particles.len() as f64;
    if total <= 0.0 || !total.is_finite() {
        // Every hypothesis is incompatible with the frame under the Gaussian
        // model. Reset to uniform; a global re-localizer would re-seed here.
        for p in particles.iter_mut() {
            p.weight = 1.0 / m;
        }
        return Ok(PfStepInfo { best_residual, ess: m, resampled: false, degenerate: true });
    }
    for p in particles.iter_mut() {
        p.weight /= total;
    }
    let sq: Vec<f64> = particles.iter().map(|p| p.weight * p.weight).collect();
    let ess = 1.0 / pairwise_sum(&sq);

    let mut resampled = false;
    if ess < m / 2.0 {
        systematic_resample(particles, rng);
        resampled = true;
    }
    Ok(PfStepInfo { best_residual, ess, resampled, degenerate: false })
}

fn systematic_resample(particles: &mut Vec<Particle>, rng: &mut ChaCha8Rng) {
    let m = particles.len();
    let start: f64 = rng.random_range(0.0..1.0 / m as f64);
    let mut cumulative = 0.0;
    let mut out = Vec::with_capacity(m);
    let mut idx = 0usize;
    for k in 0..m {
        let u = start + k as f64 / m as f64;
        while idx < m - 1 && cumulative + particles[idx].weight < u {
            cumulative += particles[idx].weight;
            idx += 1;
        }
        out.push(Particle { state: particles[idx].state, weight: 1.0 / m as f64 });
    }
    *particles = out;
}

/// Weighted mean of the particle set. The orientation is the weighted mean
/// of the axis-angle vectors, adequate for the small angular spreads of a
/// tracking filter.
pub fn particle_mean(particles: &[Particle]) -> State {
    let mut p = Vector3::zeros();
    let mut phi = Vector3::zeros();
    let mut v = Vector3::zeros();
    let mut omega = Vector3::zeros();
    for particle in particles {
        let w = particle.weight;
        p += particle.state.p * w;
        phi += particle.state.phi.as_vector() * w;
        v += particle.state.v * w;
        omega += particle.state.omega * w;
    }
    State { p, phi: RotVec::new(phi), v, omega, t: particles[0].state.t }
}

/// Closed-loop PF driver mirroring the estimator's sequence contract:
/// degenerate steps emit a failure record and the filter keeps coasting.
pub fn pf_run_sequence(
    frames: &[MeasurementFrame],
    initial: &State,
    map: &MagneticMap,
    rig: &SensorRig,
    cfg: &PfConfig,
) -> Result<Vec<(State, StepDiagnostics)>, BaselineError> {
    if frames.is_empty() {
        return Err(BaselineError::NoFrames);
    }
    let mut t_prev = initial.t;
    for f in frames {
        if !(f.t > t_prev) {
            return Err(BaselineError::FramesNotTimeOrdered);
        }
        t_prev = f.t;
    }
    let mut particles = init_particles(initial, cfg.particles);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        let started = std::time::Instant::now();
        let info = pf_step(&mut particles, frame, map, rig, cfg, &mut rng)?;
        let mean = particle_mean(&particles);
        let mapped = count_mapped_sensors(&mean, map, rig);
        out.push((
            mean,
            StepDiagnostics {
                s_min: info.best_residual,
                effective_sample_size: info.ess,
                inlier_fraction: mapped as f64 / rig.len() as f64,
                elapsed: started.elapsed().as_secs_f64(),
                discarded: 0,
                failed: info.degenerate,
            },
        ));
    }
    Ok(out)
}

fn count_mapped_sensors(state: &State, map: &MagneticMap, rig: &SensorRig) -> usize {
    let rot = state.rotation();
    (0..rig.len())
        .filter(|&i| {
            let (_, pi) = rig.world_pose(&rot, &state.p, i);
            map.query(&pi).is_some()
        })
        .count()
}

#[derive(Debug, Clone, Copy)]
pub struct GnConfig {
    pub max_iters: usize,
    /// Step-norm threshold for convergence, meters (the rotational part is
    /// measured in radians on the same norm).
    pub convergence_tol: f64,
    /// Levenberg damping added to the normal matrix after the singularity
    /// check.
    pub step_damping: f64,
}

impl Default for GnConfig {
    fn default() -> Self {
        GnConfig { max_iters: 20, convergence_tol: 1e-4, step_damping: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GnStepReport {
    pub state: State,
    pub converged: bool,
    /// Unmapped finite-difference neighbor or singular normal matrix.
    pub degenerate: bool,
    pub iterations: usize,
    pub final_step_norm: f64,
}

/// Gauss-Newton refinement of (p, φ) against the map, with the map gradient
/// taken by central differences at map resolution. Velocity and angular rate
/// are recovered from the pose increment over dt afterward by the caller.
pub fn gn_step(
    prev: &State,
    frame: &MeasurementFrame,
    map: &MagneticMap,
    rig: &SensorRig,
    cfg: &GnConfig,
) -> Result<GnStepReport, BaselineError> {
    if map.is_empty() {
        return Err(BaselineError::EmptyMap);
    }
    if frame.readings.len() != rig.len() {
        return Err(BaselineError::FrameRigMismatch {
            readings: frame.readings.len(),
            sensors: rig.len(),
        });
    }

    let h = map.resolution();
    let mut p = prev.p;
    let mut rot = prev.rotation();
    let mut converged = false;
    let mut step_norm = f64::INFINITY;
    let mut iterations = 0usize;

    for iter in 0..cfg.max_iters {
        iterations = iter + 1;
        let mut hessian = Matrix6::<f64>::zeros();
        let mut gradient = Vector6::<f64>::zeros();

        for i in 0..rig.len() {
            let (ri, pi) = rig.world_pose(&rot, &p, i);
            let Some(field) = map.query(&pi) else {
                return Ok(GnStepReport {
                    state: with_pose(prev, &p, &rot, frame.t),
                    converged: false,
                    degenerate: true,
                    iterations,
                    final_step_norm: step_norm,
                });
            };
            // Central-difference map gradient; all six neighbors must be
            // mapped or the problem is unobservable here.
            let mut grad = Matrix3::<f64>::zeros();
            for axis in 0..3 {
                let mut dp = Vector3::zeros();
                dp[axis] = h;
                let (Some(fwd), Some(back)) = (map.query(&(pi + dp)), map.query(&(pi - dp)))
                else {
                    return Ok(GnStepReport {
                        state: with_pose(prev, &p, &rot, frame.t),
                        converged: false,
                        degenerate: true,
                        iterations,
                        final_step_norm: step_norm,
                    });
                };
                grad.set_column(axis, &((fwd - back) / (2.0 * h)));
            }

            let rotated_reading = ri.rotate(&frame.readings[i]);
            let residual = field - rotated_reading;
            let lever = rot.rotate(&rig.sensors[i].translation);
            // With a left perturbation R ← exp(δφ)R:
            //   ∂pᵢ/∂δφ = −⌊R·ᵇpᵢ⌋ₓ, ∂(RᵢBᵢ)/∂δφ = −⌊RᵢBᵢ⌋ₓ.
            let de_dphi = -grad * skew(&lever) + skew(&rotated_reading);
            let mut jac = nalgebra::SMatrix::<f64, 3, 6>::zeros();
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&grad);
            jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&de_dphi);
            hessian += jac.transpose() * jac;
            gradient += jac.transpose() * residual;
        }

        // Structural singularity check before damping: a flat field leaves
        // the position block rank-deficient.
        if hessian.cholesky().is_none() {
            return Ok(GnStepReport {
                state: with_pose(prev, &p, &rot, frame.t),
                converged: false,
                degenerate: true,
                iterations,
                final_step_norm: step_norm,
            });
        }
        let damped = hessian + Matrix6::identity() * cfg.step_damping;
        let delta = match damped.cholesky() {
            Some(chol) => chol.solve(&(-gradient)),
            None => {
                return Ok(GnStepReport {
                    state: with_pose(prev, &p, &rot, frame.t),
                    converged: false,
                    degenerate: true,
                    iterations,
                    final_step_norm: step_norm,
                })
            }
        };

        p += Vector3::new(delta[0], delta[1], delta[2]);
        let dphi = Vector3::new(delta[3], delta[4], delta[5]);
        rot = exp_so3(&RotVec::new(dphi)).compose(&rot);
        step_norm = delta.norm();
        if step_norm < cfg.convergence_tol {
            converged = true;
            break;
        }
    }

    Ok(GnStepReport {
        state: with_pose(prev, &p, &rot, frame.t),
        converged,
        degenerate: false,
        iterations,
        final_step_norm: step_norm,
    })
}

fn with_pose(prev: &State, p: &Vector3<f64>, rot: &crate::so3::RotMat, t: f64) -> State {
    State { p: *p, phi: log_so3(rot), v: prev.v, omega: prev.omega, t }
}

/// Closed-loop GN driver: constant-velocity prediction, GN refinement, and
/// velocity recovery from the pose increment. Degenerate steps coast and are
/// flagged.
pub fn gn_run_sequence(
    frames: &[MeasurementFrame],
    initial: &State,
    map: &MagneticMap,
    rig: &SensorRig,
    cfg: &GnConfig,
) -> Result<Vec<(State, StepDiagnostics)>, BaselineError> {
    if frames.is_empty() {
        return Err(BaselineError::NoFrames);
    }
    let mut state = *initial;
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        let started = std::time::Instant::now();
        let dt = frame.t - state.t;
        if !(dt > 0.0) {
            return Err(BaselineError::FramesNotTimeOrdered);
        }
        let predicted = propagate(
            &state,
            &ControlSample { a: Vector3::zeros(), omega: state.omega },
            dt,
        );
        let report = gn_step(&predicted, frame, map, rig, cfg)?;
        let next = if report.degenerate {
            predicted
        } else {
            // Pose-only solver: back out velocity and angular rate from the
            // refined pose increment.
            let v = (report.state.p - state.p) / dt;
            let rel = report.state.rotation().compose(&state.rotation().transpose());
            let omega = log_so3(&rel).as_vector() / dt;
            State { v, omega, ..report.state }
        };
        let mapped = count_mapped_sensors(&next, map, rig);
        out.push((
            next,
            StepDiagnostics {
                s_min: f64::NAN,
                effective_sample_size: if report.degenerate { 0.0 } else { 1.0 },
                inlier_fraction: mapped as f64 / rig.len() as f64,
                elapsed: started.elapsed().as_secs_f64(),
                discarded: 0,
                failed: report.degenerate,
            },
        ));
        state = next;
    }
    Ok(out)
}
