//! Trajectory evaluation: absolute trajectory error and velocity error over
//! matched timestamps.
//!
//! Both trajectories live in the map's world frame, so errors are computed
//! without any alignment step; aligning first would hide exactly the global
//! drift this metric exists to expose.

use crate::estimator::{State, StepDiagnostics};
use crate::numeric::pairwise_sum;
use nalgebra::Vector3;

/// Timestamps closer than this are considered the same instant, seconds.
pub const MATCH_TOLERANCE: f64 = 1e-3;

#[derive(Debug)]
pub enum EvalError {
    TooFewMatches { matched: usize },
    UnmatchedTimestamp { t: f64 },
}

impl std::fmt::Display for EvalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalError::TooFewMatches { matched } => {
                write!(f, "need at least 2 matched timestamps, found {matched}")
            }
            EvalError::UnmatchedTimestamp { t } => {
                write!(f, "estimate timestamp {t} has no ground-truth match within 1 ms")
            }
        }
    }
}

impl std::error::Error for EvalError {}

/// One row of an estimated trajectory: the state plus step diagnostics in
/// the shape of the output CSV. `ess == 0` marks a failed (coasted) step;
/// successful steps always have ESS ≥ 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateRecord {
    pub state: State,
    pub s_min: f64,
    pub ess: f64,
    pub inliers: u32,
    pub elapsed_us: f64,
}

impl EstimateRecord {
    pub fn failed(&self) -> bool {
        self.ess == 0.0
    }
}

/// Converts estimator output into CSV-shaped records.
pub fn records_from_run(
    results: &[(State, StepDiagnostics)],
    sensor_count: usize,
) -> Vec<EstimateRecord> {
    results
        .iter()
        .map(|(state, diag)| EstimateRecord {
            state: *state,
            s_min: diag.s_min,
            ess: if diag.failed { 0.0 } else { diag.effective_sample_size },
            inliers: (diag.inlier_fraction * sensor_count as f64).round() as u32,
            elapsed_us: diag.elapsed * 1e6,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteReport {
    /// RMSE of the position error norm, meters.
    pub ate_rmse: f64,
    /// Per-axis position RMSE, meters.
    pub per_axis_rmse: Vector3<f64>,
    /// Largest position error norm, meters.
    pub max_error: f64,
    /// RMSE of the velocity error norm, m/s.
    pub velocity_rmse: f64,
    /// Steps that failed and coasted.
    pub failure_steps: usize,
    /// Matched timestamp count the statistics are over.
    pub matched: usize,
}

/// Position and velocity RMSE between an estimate and ground truth over
/// matched timestamps (1 ms tolerance), without trajectory alignment.
pub fn compute_ate(est: &[EstimateRecord], truth: &[State]) -> Result<AteReport, EvalError> {
    let mut pos_sq = Vec::with_capacity(est.len());
    let mut axis_sq = [Vec::with_capacity(est.len()), Vec::new(), Vec::new()];
    axis_sq[1].reserve(est.len());
    axis_sq[2].reserve(est.len());
    let mut vel_sq = Vec::with_capacity(est.len());
    let mut max_error = 0.0f64;
    let mut failure_steps = 0usize;

    for record in est {
        let t = record.state.t;
        let matched = truth
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .filter(|s| (s.t - t).abs() <= MATCH_TOLERANCE)
            .ok_or(EvalError::UnmatchedTimestamp { t })?;
        let pe = record.state.p - matched.p;
        let ve = record.state.v - matched.v;
        pos_sq.push(pe.norm_squared());
        for axis in 0..3 {
            axis_sq[axis].push(pe[axis] * pe[axis]);
        }
        vel_sq.push(ve.norm_squared());
        max_error = max_error.max(pe.norm());
        failure_steps += record.failed() as usize;
    }

    let matched = pos_sq.len();
    if matched < 2 {
        return Err(EvalError::TooFewMatches { matched });
    }
    let n = matched as f64;
    Ok(AteReport {
        ate_rmse: (pairwise_sum(&pos_sq) / n).sqrt(),
        per_axis_rmse: Vector3::new(
            (pairwise_sum(&axis_sq[0]) / n).sqrt(),
            (pairwise_sum(&axis_sq[1]) / n).sqrt(),
            (pairwise_sum(&axis_sq[2]) / n).sqrt(),
        ),
        max_error,
        velocity_rmse: (pairwise_sum(&vel_sq) / n).sqrt(),
        failure_steps,
        matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::RotVec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state_at(t: f64, p: Vector3<f64>, v: Vector3<f64>) -> State {
        State { p, phi: RotVec::zero(), v, omega: Vector3::zeros(), t }
    }

    fn records_from_states(states: &[State]) -> Vec<EstimateRecord> {
        states
            .iter()
            .map(|s| EstimateRecord {
                state: *s,
                s_min: 0.0,
                ess: 1.0,
                inliers: 0,
                elapsed_us: 0.0,
            })
            .collect()
    }

    fn line_truth(n: usize) -> Vec<State> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                state_at(t, Vector3::new(t, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0))
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_give_zero_report() {
        let truth = line_truth(20);
        let report = compute_ate(&records_from_states(&truth), &truth).unwrap();
        assert_eq!(report.ate_rmse, 0.0);
        assert_eq!(report.max_error, 0.0);
        assert_eq!(report.velocity_rmse, 0.0);
        assert_eq!(report.per_axis_rmse, Vector3::zeros());
        assert_eq!(report.failure_steps, 0);
        assert_eq!(report.matched, 20);
    }

    #[test]
    fn constant_offset_gives_that_offset() {
        let truth = line_truth(20);
        let offset = Vector3::new(0.1, 0.0, 0.0);
        let est: Vec<State> = truth
            .iter()
            .map(|s| State { p: s.p + offset, ..*s })
            .collect();
        let report = compute_ate(&records_from_states(&est), &truth).unwrap();
        assert_relative_eq!(report.ate_rmse, 0.1, epsilon = 1e-12);
        assert_relative_eq!(report.max_error, 0.1, epsilon = 1e-12);
        assert_relative_eq!(report.per_axis_rmse.x, 0.1, epsilon = 1e-12);
        assert_eq!(report.per_axis_rmse.y, 0.0);
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut rand_vec = |s: f64| {
            Vector3::new(
                rng.random_range(-s..s),
                rng.random_range(-s..s),
                rng.random_range(-s..s),
            )
        };
        let truth: Vec<State> = (0..50)
            .map(|i| state_at(i as f64 * 0.1, rand_vec(5.0), rand_vec(1.0)))
            .collect();
        let est: Vec<State> = truth
            .iter()
            .map(|s| State { p: s.p + rand_vec(0.2), v: s.v + rand_vec(0.1), ..*s })
            .collect();
        let report = compute_ate(&records_from_states(&est), &truth).unwrap();

        // Oracle: direct per-timestamp accumulation.
        let mut sum = 0.0;
        let mut vsum = 0.0;
        let mut max = 0.0f64;
        for (e, t) in est.iter().zip(&truth) {
            sum += (e.p - t.p).norm_squared();
            vsum += (e.v - t.v).norm_squared();
            max = max.max((e.p - t.p).norm());
        }
        let n = truth.len() as f64;
        assert_relative_eq!(report.ate_rmse, (sum / n).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(report.velocity_rmse, (vsum / n).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(report.max_error, max, epsilon = 1e-12);
    }

    #[test]
    fn shifting_both_trajectories_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let truth: Vec<State> = (0..30)
            .map(|i| {
                state_at(
                    i as f64 * 0.1,
                    Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.0),
                    Vector3::zeros(),
                )
            })
            .collect();
        let est: Vec<State> = truth
            .iter()
            .map(|s| State { p: s.p + Vector3::new(0.05, -0.02, 0.01), ..*s })
            .collect();
        let base = compute_ate(&records_from_states(&est), &truth).unwrap();

        let shift = Vector3::new(100.0, -40.0, 7.0);
        let truth_shifted: Vec<State> =
            truth.iter().map(|s| State { p: s.p + shift, ..*s }).collect();
        let est_shifted: Vec<State> =
            est.iter().map(|s| State { p: s.p + shift, ..*s }).collect();
        let shifted = compute_ate(&records_from_states(&est_shifted), &truth_shifted).unwrap();
        assert_relative_eq!(base.ate_rmse, shifted.ate_rmse, epsilon = 1e-12);
        assert_relative_eq!(base.max_error, shifted.max_error, epsilon = 1e-12);
    }

    #[test]
    fn too_few_matches_is_an_error() {
        let truth = line_truth(5);
        let est = records_from_states(&truth[..1]);
        assert!(matches!(compute_ate(&est, &truth), Err(EvalError::TooFewMatches { matched: 1 })));
    }

    #[test]
    fn unmatched_timestamp_is_an_error() {
        let truth = line_truth(5);
        let stray = vec![state_at(7.77, Vector3::zeros(), Vector3::zeros()); 3];
        assert!(matches!(
            compute_ate(&records_from_states(&stray), &truth),
            Err(EvalError::UnmatchedTimestamp { .. })
        ));
    }

    #[test]
    fn failed_records_are_counted() {
        let truth = line_truth(10);
        let mut records = records_from_states(&truth);
        records[3].ess = 0.0;
        records[7].ess = 0.0;
        let report = compute_ate(&records, &truth).unwrap();
        assert_eq!(report.failure_steps, 2);
    }
}
