//! Latency benchmark for the estimation step over a (sample count × sensor
//! count) matrix, on a fixed synthetic scene.

use crate::estimator::{estimate_step, EstimatorConfig, State};
use crate::map::{MagneticMap, MapCellKey};
use crate::numeric::{linear_fit, percentile};
use crate::sim::{synthesize_frame, world_field, DipoleSource, NoiseModel, SensorRig};
use nalgebra::Vector3;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy)]
pub struct BenchCell {
    pub m: usize,
    pub n: usize,
    pub mean_s: f64,
    pub p99_s: f64,
}

/// Least-squares latency fit along one axis of the matrix with the other
/// held at `fixed`.
#[derive(Debug, Clone, Copy)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub fixed: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
    /// Latency vs M at the reference sensor count.
    pub m_fit: ScalingFit,
    /// Latency vs N at the reference sample count.
    pub n_fit: ScalingFit,
}

impl BenchReport {
    pub fn cell(&self, m: usize, n: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.m == m && c.n == n)
    }
}

fn bench_scene() -> (MagneticMap, Vec<DipoleSource>, Vector3<f64>) {
    let sources = vec![
        DipoleSource {
            position: Vector3::new(1.0, 0.8, 1.2),
            moment: Vector3::new(60.0, -40.0, 150.0),
        },
        DipoleSource {
            position: Vector3::new(-0.8, -1.0, -1.3),
            moment: Vector3::new(-90.0, 50.0, 120.0),
        },
    ];
    let base = Vector3::new(20.0, 0.0, -45.0);
    let res = 0.05;
    let n = 40i32;
    let mut cells = HashMap::new();
    for ix in -n..n {
        for iy in -n..n {
            for iz in -4..4 {
                let center = Vector3::new(
                    (ix as f64 + 0.5) * res,
                    (iy as f64 + 0.5) * res,
                    (iz as f64 + 0.5) * res,
                );
                cells.insert(
                    MapCellKey { ix, iy, iz },
                    world_field(&sources, &base, &center).unwrap(),
                );
            }
        }
    }
    (MagneticMap::from_cells(res, cells, base).unwrap(), sources, base)
}

/// Measures mean and p99 `estimate_step` latency for every (M, N) pair.
/// The scaling fits run along the middle element of the other list.
pub fn bench_matrix(m_list: &[usize], n_list: &[usize], reps: usize) -> BenchReport {
    assert!(!m_list.is_empty() && !n_list.is_empty() && reps >= 1);
    let (map, sources, base) = bench_scene();
    let m_ref = m_list[m_list.len() / 2];
    let n_ref = n_list[n_list.len() / 2];

    let mut cells = Vec::new();
    for &n in n_list {
        let rig = SensorRig::linear_array(n, 0.08);
        let mut prev = State::at_rest(Vector3::new(0.025, 0.025, 0.025), 0.0);
        prev.v = Vector3::new(0.5, 0.0, 0.0);
        let truth = State { p: prev.p + prev.v * 0.1, t: 0.1, ..prev };
        let mut rng = crate::sim::frame_rng(1234, 0);
        let frame = synthesize_frame(
            &truth,
            &rig,
            &sources,
            &base,
            &NoiseModel { sigma_n: 0.5, outlier_rate: 0.0, outlier_magnitude: 0.0 },
            &mut rng,
        )
        .expect("bench frame");
        for &m in m_list {
            let cfg = EstimatorConfig { samples: m, rng_seed: 7, ..Default::default() };
            for _ in 0..3 {
                estimate_step(&prev, &frame, &map, &rig, &cfg).expect("warmup step");
            }
            let mut samples_s = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t0 = std::time::Instant::now();
                estimate_step(&prev, &frame, &map, &rig, &cfg).expect("bench step");
                samples_s.push(t0.elapsed().as_secs_f64());
            }
            samples_s.sort_by(f64::total_cmp);
            let mean = samples_s.iter().sum::<f64>() / reps as f64;
            cells.push(BenchCell { m, n, mean_s: mean, p99_s: percentile(&samples_s, 99.0) });
        }
    }

    let m_slice: Vec<&BenchCell> = cells.iter().filter(|c| c.n == n_ref).collect();
    let xs: Vec<f64> = m_slice.iter().map(|c| c.m as f64).collect();
    let ys: Vec<f64> = m_slice.iter().map(|c| c.mean_s).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys);
    let m_fit = ScalingFit { slope, intercept, r_squared: r2, fixed: n_ref };

    let n_slice: Vec<&BenchCell> = cells.iter().filter(|c| c.m == m_ref).collect();
    let xs: Vec<f64> = n_slice.iter().map(|c| c.n as f64).collect();
    let ys: Vec<f64> = n_slice.iter().map(|c| c.mean_s).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys);
    let n_fit = ScalingFit { slope, intercept, r_squared: r2, fixed: m_ref };

    BenchReport { cells, m_fit, n_fit }
}

/// Key-value rendering of a report, one `config.<i>.*` block per cell plus
/// the two fits.
pub fn render_report(report: &BenchReport) -> String {
    let mut out = String::new();
    for (i, c) in report.cells.iter().enumerate() {
        out.push_str(&format!("config.{i}.m = {}\n", c.m));
        out.push_str(&format!("config.{i}.n = {}\n", c.n));
        out.push_str(&format!("config.{i}.mean_s = {}\n", c.mean_s));
        out.push_str(&format!("config.{i}.p99_s = {}\n", c.p99_s));
    }
    out.push_str(&format!("fit.m.slope_s_per_sample = {}\n", report.m_fit.slope));
    out.push_str(&format!("fit.m.intercept_s = {}\n", report.m_fit.intercept));
    out.push_str(&format!("fit.m.r_squared = {}\n", report.m_fit.r_squared));
    out.push_str(&format!("fit.m.fixed_n = {}\n", report.m_fit.fixed));
    out.push_str(&format!("fit.n.slope_s_per_sensor = {}\n", report.n_fit.slope));
    out.push_str(&format!("fit.n.intercept_s = {}\n", report.n_fit.intercept));
    out.push_str(&format!("fit.n.r_squared = {}\n", report.n_fit.r_squared));
    out.push_str(&format!("fit.n.fixed_m = {}\n", report.n_fit.fixed));
    out
}
