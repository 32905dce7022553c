//! End-to-end experiment orchestration: simulate the mapping run, build the
//! map, simulate the online run, localize with each requested method, and
//! evaluate — writing every artifact to the output directory.

use crate::baselines::{gn_run_sequence, pf_run_sequence};
use crate::config::{
    parse_experiment, parse_method_params, parse_rig, parse_trajectory, parse_world,
    ConfigError, Method, MethodParams,
};
use crate::estimator::{run_sequence, State, StepDiagnostics};
use crate::eval::{compute_ate, records_from_run, AteReport, EstimateRecord};
use crate::map::{build_map, save_map, MagneticMap};
use crate::sim::{
    generate_trajectory, project_map_samples, simulate_frames, MeasurementFrame, NoiseModel,
    SensorRig,
};
use std::path::{Path, PathBuf};

/// Seed salt separating the mapping run's randomness from the online run's.
const MAPPING_SEED_SALT: u64 = 0x6d61705f73616c74;

#[derive(Debug)]
pub enum HarnessError {
    Config(ConfigError),
    Io(String),
    Stage { stage: &'static str, message: String },
}

impl HarnessError {
    /// CLI exit code: 2 config, 3 stage failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Stage { .. } => 3,
            HarnessError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for HarnessError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HarnessError::Config(e) => write!(f, "config error: {e}"),
            HarnessError::Io(msg) => write!(f, "i/o error: {msg}"),
            HarnessError::Stage { stage, message } => {
                write!(f, "stage `{stage}` failed: {message}")
            }
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Config(e)
    }
}

impl From<crate::io::IoError> for HarnessError {
    fn from(e: crate::io::IoError) -> Self {
        HarnessError::Io(e.to_string())
    }
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> HarnessError {
    move |e| HarnessError::Stage { stage, message: e.to_string() }
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub report: AteReport,
    pub est_path: PathBuf,
    pub report_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub map_cells: usize,
    pub map_path: PathBuf,
    pub truth_path: PathBuf,
    pub frames_path: PathBuf,
    pub methods: Vec<MethodOutcome>,
}

/// Runs one method against already-simulated data. Exposed for the
/// acceptance suite, which drives sweeps without touching the filesystem.
pub fn localize_with_method(
    method: Method,
    frames: &[MeasurementFrame],
    initial: &State,
    map: &MagneticMap,
    rig: &SensorRig,
    params: &MethodParams,
    seed: u64,
) -> Result<Vec<(State, StepDiagnostics)>, HarnessError> {
    match method {
        Method::IdfMfl => {
            let cfg = crate::estimator::EstimatorConfig { rng_seed: seed, ..params.estimator.clone() };
            run_sequence(frames, initial, map, rig, &cfg).map_err(stage_err("localize"))
        }
        Method::IdfMflNoRobust => {
            let cfg = crate::estimator::EstimatorConfig {
                rng_seed: seed,
                c_squared: f64::INFINITY,
                ..params.estimator.clone()
            };
            run_sequence(frames, initial, map, rig, &cfg).map_err(stage_err("localize"))
        }
        Method::Pf => {
            let cfg = crate::baselines::PfConfig { rng_seed: seed, ..params.pf.clone() };
            pf_run_sequence(frames, initial, map, rig, &cfg).map_err(stage_err("localize"))
        }
        Method::Gn => {
            gn_run_sequence(frames, initial, map, rig, &params.gn).map_err(stage_err("localize"))
        }
    }
}

pub fn render_ate_report(method: Method, report: &AteReport) -> String {
    format!(
        "method = {}\nate_rmse_m = {}\nrmse_x_m = {}\nrmse_y_m = {}\nrmse_z_m = {}\n\
         max_error_m = {}\nvelocity_rmse_mps = {}\nfailure_steps = {}\nmatched_timestamps = {}\n",
        method.name(),
        report.ate_rmse,
        report.per_axis_rmse.x,
        report.per_axis_rmse.y,
        report.per_axis_rmse.z,
        report.max_error,
        report.velocity_rmse,
        report.failure_steps,
        report.matched
    )
}

/// Full pipeline from an experiment config: simulate → build-map → localize
/// (each method) → evaluate, with all artifacts under `out_dir`.
pub fn run_experiment(
    cfg_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<ExperimentOutcome, HarnessError> {
    let cfg = parse_experiment(cfg_path)?;
    let seed = seed_override.unwrap_or(cfg.seed);
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::Io(e.to_string()))?;

    let world = parse_world(&cfg.world)?;
    let rig = parse_rig(&cfg.rig)?;
    let params = parse_method_params(&cfg.estimator)?;
    let mapping_spec = parse_trajectory(&cfg.mapping_trajectory)?;
    let online_spec = parse_trajectory(&cfg.online_trajectory)?;

    // Mapping run: curated noise, outliers off unless configured otherwise.
    let mapping_traj =
        generate_trajectory(&mapping_spec).map_err(stage_err("simulate-mapping"))?;
    let mapping_noise = NoiseModel {
        sigma_n: cfg.mapping_sigma_n.unwrap_or(world.noise.sigma_n),
        outlier_rate: cfg.mapping_outlier_rate,
        outlier_magnitude: world.noise.outlier_magnitude,
    };
    let mapping_frames = simulate_frames(
        &mapping_traj,
        &rig,
        &world.sources,
        &world.base_field,
        &mapping_noise,
        seed ^ MAPPING_SEED_SALT,
    )
    .map_err(stage_err("simulate-mapping"))?;
    let samples = project_map_samples(&mapping_traj, &rig, &mapping_frames);
    let samples_path = out_dir.join("samples.csv");
    crate::io::write_samples_csv(&samples_path, &samples)?;

    let map = build_map(&samples, cfg.map_resolution, &cfg.gp, world.base_field)
        .map_err(stage_err("build-map"))?;
    let map_path = out_dir.join("map.mfm");
    save_map(&map, &map_path).map_err(stage_err("build-map"))?;

    // Online run.
    let online_traj = generate_trajectory(&online_spec).map_err(stage_err("simulate"))?;
    let frames = simulate_frames(
        &online_traj,
        &rig,
        &world.sources,
        &world.base_field,
        &world.noise,
        seed,
    )
    .map_err(stage_err("simulate"))?;
    let truth_path = out_dir.join("truth.csv");
    let frames_path = out_dir.join("frames.csv");
    crate::io::write_truth_csv(&truth_path, &online_traj)?;
    crate::io::write_frames_csv(&frames_path, &frames)?;

    let initial = online_traj[0];
    let mut methods = Vec::new();
    for method in &cfg.methods {
        let results =
            localize_with_method(*method, &frames, &initial, &map, &rig, &params, seed)?;
        let records: Vec<EstimateRecord> = records_from_run(&results, rig.len());
        let est_path = out_dir.join(format!("est_{}.csv", method.name()));
        crate::io::write_est_csv(&est_path, &records)?;

        let report = compute_ate(&records, &online_traj).map_err(stage_err("evaluate"))?;
        let report_path = out_dir.join(format!("report_{}.txt", method.name()));
        std::fs::write(&report_path, render_ate_report(*method, &report))
            .map_err(|e| HarnessError::Io(e.to_string()))?;

        crate::io::write_overlay_csv(
            &out_dir.join(format!("plot_traj_{}.csv", method.name())),
            &online_traj,
            &records,
        )?;
        crate::io::write_velocity_csv(
            &out_dir.join(format!("plot_vel_{}.csv", method.name())),
            &online_traj,
            &records,
        )?;

        methods.push(MethodOutcome { method: *method, report, est_path, report_path });
    }

    Ok(ExperimentOutcome {
        map_cells: map.cell_count(),
        map_path,
        truth_path,
        frames_path,
        methods,
    })
}

/// Evaluate stage as its own entry point (CLI `evaluate`).
pub fn evaluate_files(
    est_path: &Path,
    truth_path: &Path,
) -> Result<AteReport, HarnessError> {
    let est = crate::io::read_est_csv(est_path)?;
    let truth = crate::io::read_truth_csv(truth_path)?;
    compute_ate(&est, &truth).map_err(stage_err("evaluate"))
}
