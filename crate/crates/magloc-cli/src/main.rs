//! `magloc` — build magnetic maps, simulate measurement runs, localize with
//! several methods, evaluate trajectories, and benchmark the estimator.
//!
//! Exit codes: 0 success, 2 config error, 3 stage failure, 4 I/O error.

use clap::{Args, Parser, Subcommand};
use magloc_core::baselines::{gn_run_sequence, pf_run_sequence};
use magloc_core::config::{
    parse_method_params, parse_rig, parse_trajectory, parse_world, Method,
};
use magloc_core::estimator::{run_sequence, EstimatorConfig};
use magloc_core::eval::records_from_run;
use magloc_core::harness::{
    evaluate_files, render_ate_report, run_experiment, HarnessError,
};
use magloc_core::map::{build_map, load_map, save_map, GpHyperparams};
use magloc_core::sim::{generate_trajectory, project_map_samples, simulate_frames};
use nalgebra::Vector3;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "magloc", version, about = "Magnetic-field localization toolkit")]
struct Cli {
    /// Seed for every stochastic stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for multi-file commands.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GpArgs {
    #[arg(long, default_value_t = 0.3)]
    gp_length_scale: f64,
    #[arg(long, default_value_t = 5.0)]
    gp_sigma_f: f64,
    #[arg(long, default_value_t = 0.5)]
    gp_sigma_n: f64,
    #[arg(long, default_value_t = 0.5)]
    gp_support_radius: f64,
    #[arg(long, default_value_t = 3)]
    gp_min_neighbors: usize,
    #[arg(long, default_value_t = 64)]
    gp_max_neighbors: usize,
}

impl GpArgs {
    fn to_params(&self) -> GpHyperparams {
        GpHyperparams {
            length_scale: self.gp_length_scale,
            sigma_f: self.gp_sigma_f,
            sigma_n: self.gp_sigma_n,
            support_radius: self.gp_support_radius,
            min_neighbors: self.gp_min_neighbors,
            max_neighbors: self.gp_max_neighbors,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Densify world-frame field samples into a hash-grid map file.
    BuildMap {
        /// samples.csv with columns px,py,pz,bx,by,bz.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        resolution: f64,
        /// Output .mfm map file.
        #[arg(long)]
        out: PathBuf,
        /// Base field metadata stored in the map, µT ("x y z").
        #[arg(long, default_value = "20 0 -45")]
        base_field: String,
        #[command(flatten)]
        gp: GpArgs,
    },
    /// Generate a measurement run (and optionally mapping samples) from a
    /// world and trajectory config.
    Simulate {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        /// frames.csv output.
        #[arg(long)]
        out: PathBuf,
        /// truth.csv output.
        #[arg(long)]
        truth: PathBuf,
        /// rig.cfg describing the sensor array.
        #[arg(long)]
        rig: PathBuf,
        /// Also write world-frame projected samples for map building.
        #[arg(long)]
        map_samples: Option<PathBuf>,
        /// Override the world's noise std, µT.
        #[arg(long)]
        sigma_n: Option<f64>,
        /// Override the world's outlier rate.
        #[arg(long)]
        outlier_rate: Option<f64>,
        /// Override the world's outlier magnitude, µT.
        #[arg(long)]
        outlier_magnitude: Option<f64>,
    },
    /// Estimate a trajectory from recorded frames against a map.
    Localize {
        /// idfmfl | pf | gn | idfmfl-norobust
        #[arg(long, default_value = "idfmfl")]
        method: String,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        rig: PathBuf,
        /// Estimator/baseline tuning config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// truth.csv providing the initial state (first row).
        #[arg(long)]
        truth: PathBuf,
        /// est.csv output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated trajectory against ground truth.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure estimate_step latency over a sample-count × sensor-count matrix.
    Bench {
        /// Comma-separated sample counts.
        #[arg(long, default_value = "256,512,1024,2048,4096")]
        m_list: String,
        /// Comma-separated sensor counts.
        #[arg(long, default_value = "1,7,14")]
        n_list: String,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline from an experiment config: simulate, build the map,
    /// localize with every requested method, evaluate.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()
        {
            eprintln!("magloc: cannot configure thread pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("magloc: {message}");
            ExitCode::from(code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

fn config_err(message: String) -> CliError {
    CliError { code: EXIT_CONFIG, message }
}

fn stage_err(message: String) -> CliError {
    CliError { code: EXIT_STAGE, message }
}

fn io_err(message: String) -> CliError {
    CliError { code: EXIT_IO, message }
}

impl From<magloc_core::config::ConfigError> for CliError {
    fn from(e: magloc_core::config::ConfigError) -> Self {
        config_err(e.to_string())
    }
}

impl From<magloc_core::io::IoError> for CliError {
    fn from(e: magloc_core::io::IoError) -> Self {
        io_err(e.to_string())
    }
}

impl From<magloc_core::map::MapError> for CliError {
    fn from(e: magloc_core::map::MapError) -> Self {
        io_err(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError { code: e.exit_code() as u8, message: e.to_string() }
    }
}

fn parse_vector3_arg(text: &str) -> Result<Vector3<f64>, CliError> {
    let parts: Vec<f64> = text
        .split_whitespace()
        .map(|p| p.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| config_err(format!("`{text}` is not three numbers")))?;
    if parts.len() != 3 {
        return Err(config_err(format!("`{text}` is not three numbers")));
    }
    Ok(Vector3::new(parts[0], parts[1], parts[2]))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildMap { input, resolution, out, base_field, gp } => {
            let samples = magloc_core::io::read_samples_csv(&input)?;
            let base = parse_vector3_arg(&base_field)?;
            let map = build_map(&samples, resolution, &gp.to_params(), base)
                .map_err(|e| stage_err(format!("build-map: {e}")))?;
            save_map(&map, &out)?;
            println!(
                "built map: {} cells at {} m resolution -> {}",
                map.cell_count(),
                map.resolution(),
                out.display()
            );
            Ok(())
        }
        Command::Simulate {
            world,
            traj,
            out,
            truth,
            rig,
            map_samples,
            sigma_n,
            outlier_rate,
            outlier_magnitude,
        } => {
            let world_cfg = parse_world(&world)?;
            let spec = parse_trajectory(&traj)?;
            let rig_cfg = parse_rig(&rig)?;
            let mut noise = world_cfg.noise;
            if let Some(s) = sigma_n {
                noise.sigma_n = s;
            }
            if let Some(r) = outlier_rate {
                noise.outlier_rate = r;
            }
            if let Some(m) = outlier_magnitude {
                noise.outlier_magnitude = m;
            }
            let states =
                generate_trajectory(&spec).map_err(|e| config_err(e.to_string()))?;
            let frames = simulate_frames(
                &states,
                &rig_cfg,
                &world_cfg.sources,
                &world_cfg.base_field,
                &noise,
                cli.seed,
            )
            .map_err(|e| stage_err(format!("simulate: {e}")))?;
            magloc_core::io::write_truth_csv(&truth, &states)?;
            magloc_core::io::write_frames_csv(&out, &frames)?;
            if let Some(samples_path) = map_samples {
                let samples = project_map_samples(&states, &rig_cfg, &frames);
                magloc_core::io::write_samples_csv(&samples_path, &samples)?;
            }
            println!("simulated {} frames over {} s", frames.len(), spec.duration);
            Ok(())
        }
        Command::Localize { method, map, frames, rig, config, truth, out } => {
            let method = Method::parse(&method)
                .ok_or_else(|| config_err(format!("unknown method name `{method}`")))?;
            let map = load_map(&map)?;
            let frames = magloc_core::io::read_frames_csv(&frames)?;
            let rig_cfg = parse_rig(&rig)?;
            let truth_states = magloc_core::io::read_truth_csv(&truth)?;
            let initial = *truth_states
                .first()
                .ok_or_else(|| io_err("truth.csv is empty".to_string()))?;
            let params = match config {
                Some(path) => parse_method_params(&path)?,
                None => magloc_core::config::MethodParams {
                    estimator: EstimatorConfig::default(),
                    pf: Default::default(),
                    gn: Default::default(),
                },
            };
            let results = match method {
                Method::IdfMfl => {
                    let cfg =
                        EstimatorConfig { rng_seed: cli.seed, ..params.estimator.clone() };
                    run_sequence(&frames, &initial, &map, &rig_cfg, &cfg)
                        .map_err(|e| stage_err(format!("localize: {e}")))?
                }
                Method::IdfMflNoRobust => {
                    let cfg = EstimatorConfig {
                        rng_seed: cli.seed,
                        c_squared: f64::INFINITY,
                        ..params.estimator.clone()
                    };
                    run_sequence(&frames, &initial, &map, &rig_cfg, &cfg)
                        .map_err(|e| stage_err(format!("localize: {e}")))?
                }
                Method::Pf => {
                    let cfg = magloc_core::baselines::PfConfig {
                        rng_seed: cli.seed,
                        ..params.pf.clone()
                    };
                    pf_run_sequence(&frames, &initial, &map, &rig_cfg, &cfg)
                        .map_err(|e| stage_err(format!("localize: {e}")))?
                }
                Method::Gn => gn_run_sequence(&frames, &initial, &map, &rig_cfg, &params.gn)
                    .map_err(|e| stage_err(format!("localize: {e}")))?,
            };
            let records = records_from_run(&results, rig_cfg.len());
            magloc_core::io::write_est_csv(&out, &records)?;
            let failures = records.iter().filter(|r| r.failed()).count();
            println!(
                "localized {} frames with {} ({} failure steps)",
                records.len(),
                method.name(),
                failures
            );
            Ok(())
        }
        Command::Evaluate { est, truth, out } => {
            let report = evaluate_files(&est, &truth)?;
            let text = render_ate_report(Method::IdfMfl, &report);
            // Drop the method line: evaluate sees only trajectories.
            let text = text.lines().skip(1).collect::<Vec<_>>().join("\n") + "\n";
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| io_err(e.to_string()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Bench { m_list, n_list, reps, out } => {
            let parse_list = |text: &str| -> Result<Vec<usize>, CliError> {
                text.split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<usize>()
                            .map_err(|_| config_err(format!("`{p}` is not a count")))
                    })
                    .collect()
            };
            let m = parse_list(&m_list)?;
            let n = parse_list(&n_list)?;
            if m.is_empty() || n.is_empty() || reps == 0 {
                return Err(config_err("m-list, n-list, and reps must be non-empty".into()));
            }
            let report = magloc_core::bench::bench_matrix(&m, &n, reps);
            let text = magloc_core::bench::render_report(&report);
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| io_err(e.to_string()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Run { config } => {
            let outcome = run_experiment(&config, &cli.out_dir, Some(cli.seed))?;
            println!("map: {} cells -> {}", outcome.map_cells, outcome.map_path.display());
            for m in &outcome.methods {
                println!(
                    "{}: ate_rmse = {:.4} m, velocity_rmse = {:.4} m/s, failures = {} -> {}",
                    m.method.name(),
                    m.report.ate_rmse,
                    m.report.velocity_rmse,
                    m.report.failure_steps,
                    m.report_path.display()
                );
            }
            Ok(())
        }
    }
}
