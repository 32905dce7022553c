//! Key-value config files (`key = value`, `#` comments) and the typed
//! schemas for world, trajectory, rig, estimator, and experiment configs.
//!
//! Parsing is strict: unknown keys, missing required keys, and malformed
//! values are all errors that name the offending key and line.

use crate::baselines::{GnConfig, PfConfig};
use crate::estimator::EstimatorConfig;
use crate::map::GpHyperparams;
use crate::sim::{
    DipoleSource, HeadingMode, NoiseModel, SensorExtrinsic, SensorRig, TrajectoryFamily,
    TrajectorySpec,
};
use crate::so3::{exp_so3, RotVec};
use nalgebra::Vector3;
use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ConfigError {
    pub file: String,
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.file)?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
        }
        if let Some(key) = &self.key {
            write!(f, " (key `{key}`)")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// A parsed key-value file with consumed-key tracking.
#[derive(Debug)]
pub struct KvFile {
    name: String,
    entries: HashMap<String, (String, usize)>,
    consumed: HashSet<String>,
}

impl KvFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            file: path.display().to_string(),
            line: None,
            key: None,
            message: format!("cannot read file: {e}"),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, name: &str) -> Result<Self, ConfigError> {
        let mut entries = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError {
                    file: name.to_string(),
                    line: Some(line_no),
                    key: None,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), (value, line_no)).is_some() {
                return Err(ConfigError {
                    file: name.to_string(),
                    line: Some(line_no),
                    key: Some(key),
                    message: "duplicate key".to_string(),
                });
            }
        }
        Ok(KvFile { name: name.to_string(), entries, consumed: HashSet::new() })
    }

    fn err(&self, key: &str, message: String) -> ConfigError {
        let line = self.entries.get(key).map(|(_, l)| *l);
        ConfigError { file: self.name.clone(), line, key: Some(key.to_string()), message }
    }

    fn raw(&mut self, key: &str) -> Option<&str> {
        if self.entries.contains_key(key) {
            self.consumed.insert(key.to_string());
        }
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn require_str(&mut self, key: &str) -> Result<String, ConfigError> {
        match self.raw(key) {
            Some(v) => Ok(v.to_string()),
            None => Err(self.err(key, "missing required key".to_string())),
        }
    }

    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        self.raw(key).map(str::to_string).unwrap_or_else(|| default.to_string())
    }

    pub fn require_f64(&mut self, key: &str) -> Result<f64, ConfigError> {
        let v = self.require_str(key)?;
        v.parse().map_err(|_| self.err(key, format!("`{v}` is not a number")))
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.raw(key) {
            Some(v) => {
                let text = v.to_string();
                text.parse().map_err(|_| self.err(key, format!("`{text}` is not a number")))
            }
            None => Ok(default),
        }
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.raw(key) {
            Some(v) => {
                let text = v.to_string();
                text.parse().map_err(|_| self.err(key, format!("`{text}` is not a count")))
            }
            None => Ok(default),
        }
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.raw(key) {
            Some(v) => {
                let text = v.to_string();
                text.parse().map_err(|_| self.err(key, format!("`{text}` is not an integer")))
            }
            None => Ok(default),
        }
    }

    pub fn require_vector3(&mut self, key: &str) -> Result<Vector3<f64>, ConfigError> {
        let v = self.require_str(key)?;
        parse_vector3(&v).ok_or_else(|| {
            self.err(key, format!("`{v}` is not three whitespace-separated numbers"))
        })
    }

    pub fn vector3_or(
        &mut self,
        key: &str,
        default: Vector3<f64>,
    ) -> Result<Vector3<f64>, ConfigError> {
        match self.raw(key) {
            Some(v) => {
                let text = v.to_string();
                parse_vector3(&text).ok_or_else(|| {
                    self.err(key, format!("`{text}` is not three whitespace-separated numbers"))
                })
            }
            None => Ok(default),
        }
    }

    /// Errors on any key the schema never consumed (catches typos).
    pub fn finish(self) -> Result<(), ConfigError> {
        let mut unknown: Vec<&String> =
            self.entries.keys().filter(|k| !self.consumed.contains(*k)).collect();
        unknown.sort();
        if let Some(key) = unknown.first() {
            let line = self.entries.get(*key).map(|(_, l)| *l);
            return Err(ConfigError {
                file: self.name.clone(),
                line,
                key: Some((*key).clone()),
                message: "unknown key".to_string(),
            });
        }
        Ok(())
    }
}

fn parse_vector3(text: &str) -> Option<Vector3<f64>> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 3 {
        return None;
    }
    let x = parts[0].parse().ok()?;
    let y = parts[1].parse().ok()?;
    let z = parts[2].parse().ok()?;
    Some(Vector3::new(x, y, z))
}

/// World config: base field, dipole anomaly sources, and the measurement
/// noise model.
///
/// Keys: `base_field = x y z` (µT), `sigma_n` (µT), `outlier_rate` (0..1),
/// `outlier_magnitude` (µT), `dipole_count`, and per dipole
/// `dipole.<i>.position = x y z` (m), `dipole.<i>.moment = x y z` (A·m²).
#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub base_field: Vector3<f64>,
    pub sources: Vec<DipoleSource>,
    pub noise: NoiseModel,
}

pub fn parse_world(path: &Path) -> Result<WorldConfig, ConfigError> {
    let mut kv = KvFile::load(path)?;
    let base_field = kv.vector3_or("base_field", Vector3::new(20.0, 0.0, -45.0))?;
    let noise = NoiseModel {
        sigma_n: kv.f64_or("sigma_n", 0.5)?,
        outlier_rate: kv.f64_or("outlier_rate", 0.0)?,
        outlier_magnitude: kv.f64_or("outlier_magnitude", 30.0)?,
    };
    let count = kv.usize_or("dipole_count", 0)?;
    let mut sources = Vec::with_capacity(count);
    for i in 0..count {
        let position = kv.require_vector3(&format!("dipole.{i}.position"))?;
        let moment = kv.require_vector3(&format!("dipole.{i}.moment"))?;
        let source = DipoleSource { position, moment };
        source.validate().map_err(|e| ConfigError {
            file: path.display().to_string(),
            line: None,
            key: Some(format!("dipole.{i}.moment")),
            message: e.to_string(),
        })?;
        sources.push(source);
    }
    noise.validate().map_err(|e| ConfigError {
        file: path.display().to_string(),
        line: None,
        key: Some("sigma_n".to_string()),
        message: e.to_string(),
    })?;
    kv.finish()?;
    Ok(WorldConfig { base_field, sources, noise })
}

/// Trajectory config.
///
/// Keys: `family` (`line` | `circle` | `lawnmower`), `duration` (s), `rate`
/// (Hz), `speed` (m/s), `origin = x y z` (m), `heading` (`path` | `fixed`),
/// and per family `direction = x y z`, `radius` + `angular_rate`, or
/// `leg_length` + `spacing`.
pub fn parse_trajectory(path: &Path) -> Result<TrajectorySpec, ConfigError> {
    let mut kv = KvFile::load(path)?;
    let family_name = kv.require_str("family")?;
    let family = match family_name.as_str() {
        "line" => TrajectoryFamily::Line {
            direction: kv.vector3_or("direction", Vector3::new(1.0, 0.0, 0.0))?,
        },
        "circle" => TrajectoryFamily::Circle {
            radius: kv.require_f64("radius")?,
            angular_rate: kv.require_f64("angular_rate")?,
        },
        "lawnmower" => TrajectoryFamily::Lawnmower {
            leg_length: kv.require_f64("leg_length")?,
            spacing: kv.require_f64("spacing")?,
        },
        other => {
            return Err(kv.err("family", format!("unknown trajectory family `{other}`")));
        }
    };
    let heading = match kv.str_or("heading", "path").as_str() {
        "path" => HeadingMode::Path,
        "fixed" => HeadingMode::Fixed,
        other => return Err(kv.err("heading", format!("unknown heading mode `{other}`"))),
    };
    let spec = TrajectorySpec {
        family,
        duration: kv.require_f64("duration")?,
        rate: kv.require_f64("rate")?,
        speed: kv.f64_or("speed", 1.0)?,
        origin: kv.vector3_or("origin", Vector3::zeros())?,
        heading,
    };
    kv.finish()?;
    Ok(spec)
}

/// Rig config: `sensor_count = N` and per sensor
/// `sensor.<i>.rotation = x y z` (axis-angle, rad) and
/// `sensor.<i>.translation = x y z` (m) in the body frame.
pub fn parse_rig(path: &Path) -> Result<SensorRig, ConfigError> {
    let mut kv = KvFile::load(path)?;
    let count = kv.usize_or("sensor_count", 0)?;
    if count == 0 {
        return Err(kv.err("sensor_count", "rig needs at least one sensor".to_string()));
    }
    let mut sensors = Vec::with_capacity(count);
    for i in 0..count {
        let rotation = kv.vector3_or(&format!("sensor.{i}.rotation"), Vector3::zeros())?;
        let translation = kv.require_vector3(&format!("sensor.{i}.translation"))?;
        sensors.push(SensorExtrinsic {
            rotation: exp_so3(&RotVec::new(rotation)),
            translation,
        });
    }
    kv.finish()?;
    Ok(SensorRig { sensors })
}

/// Estimator + baseline tuning knobs shared by `localize` methods.
///
/// Keys: `samples`, `lambda` (µT²), `c_squared` (µT², `inf` disables
/// truncation), `accel_std = x y z` (m/s²), `omega_std = x y z` (rad/s),
/// `pf_particles`, `pf_meas_std` (µT), `gn_max_iters`, `gn_tol` (m),
/// `gn_damping`.
#[derive(Debug, Clone)]
pub struct MethodParams {
    pub estimator: EstimatorConfig,
    pub pf: PfConfig,
    pub gn: GnConfig,
}

pub fn parse_method_params(path: &Path) -> Result<MethodParams, ConfigError> {
    let mut kv = KvFile::load(path)?;
    let defaults = EstimatorConfig::default();
    let c_squared = match kv.str_or("c_squared", "").as_str() {
        "" => defaults.c_squared,
        "inf" => f64::INFINITY,
        text => text
            .parse()
            .map_err(|_| kv.err("c_squared", format!("`{text}` is not a number or `inf`")))?,
    };
    let accel_std = kv.vector3_or("accel_std", defaults.accel_std)?;
    let omega_std = kv.vector3_or("omega_std", defaults.omega_std)?;
    let estimator = EstimatorConfig {
        samples: kv.usize_or("samples", defaults.samples)?,
        lambda: kv.f64_or("lambda", defaults.lambda)?,
        c_squared,
        accel_std,
        omega_std,
        rng_seed: 0,
    };
    let pf_defaults = PfConfig::default();
    let pf = PfConfig {
        particles: kv.usize_or("pf_particles", pf_defaults.particles)?,
        meas_std: kv.f64_or("pf_meas_std", pf_defaults.meas_std)?,
        accel_std: kv.vector3_or("pf_accel_std", accel_std)?,
        omega_std: kv.vector3_or("pf_omega_std", omega_std)?,
        rng_seed: 0,
    };
    let gn_defaults = GnConfig::default();
    let gn = GnConfig {
        max_iters: kv.usize_or("gn_max_iters", gn_defaults.max_iters)?,
        convergence_tol: kv.f64_or("gn_tol", gn_defaults.convergence_tol)?,
        step_damping: kv.f64_or("gn_damping", gn_defaults.step_damping)?,
    };
    kv.finish()?;
    Ok(MethodParams { estimator, pf, gn })
}

/// The localization methods the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// The importance-sampling estimator with truncated cost.
    IdfMfl,
    /// Bootstrap particle filter, Gaussian likelihood.
    Pf,
    /// Gauss-Newton map matching.
    Gn,
    /// Ablation: the estimator with the truncation disabled (c² = ∞).
    IdfMflNoRobust,
}

impl Method {
    pub fn parse(name: &str) -> Option<Method> {
        match name {
            "idfmfl" => Some(Method::IdfMfl),
            "pf" => Some(Method::Pf),
            "gn" => Some(Method::Gn),
            "idfmfl-norobust" => Some(Method::IdfMflNoRobust),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::IdfMfl => "idfmfl",
            Method::Pf => "pf",
            Method::Gn => "gn",
            Method::IdfMflNoRobust => "idfmfl-norobust",
        }
    }
}

/// Full experiment description for `run`: referenced config files (paths
/// relative to this file), GP/map build settings, methods, and the seed.
///
/// Keys: `world`, `rig`, `mapping_trajectory`, `online_trajectory`,
/// `estimator`, `methods` (space-separated), `map_resolution`,
/// `mapping_outlier_rate`, `mapping_sigma_n`, `gp_length_scale`,
/// `gp_sigma_f`, `gp_sigma_n`, `gp_support_radius`, `gp_min_neighbors`,
/// `gp_max_neighbors`, `seed`.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub world: PathBuf,
    pub rig: PathBuf,
    pub mapping_trajectory: PathBuf,
    pub online_trajectory: PathBuf,
    pub estimator: PathBuf,
    pub methods: Vec<Method>,
    pub map_resolution: f64,
    pub gp: GpHyperparams,
    /// Outlier rate override for the curated mapping run.
    pub mapping_outlier_rate: f64,
    /// Noise override for the mapping run (defaults to the world's σ_n).
    pub mapping_sigma_n: Option<f64>,
    pub seed: u64,
}

pub fn parse_experiment(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let mut kv = KvFile::load(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: String| dir.join(p);

    let methods_text = kv.str_or("methods", "idfmfl");
    let mut methods = Vec::new();
    for name in methods_text.split_whitespace() {
        match Method::parse(name) {
            Some(m) => methods.push(m),
            None => {
                return Err(kv.err("methods", format!("unknown method name `{name}`")));
            }
        }
    }

    let gp_defaults = GpHyperparams::default();
    let gp = GpHyperparams {
        length_scale: kv.f64_or("gp_length_scale", gp_defaults.length_scale)?,
        sigma_f: kv.f64_or("gp_sigma_f", gp_defaults.sigma_f)?,
        sigma_n: kv.f64_or("gp_sigma_n", gp_defaults.sigma_n)?,
        support_radius: kv.f64_or("gp_support_radius", gp_defaults.support_radius)?,
        min_neighbors: kv.usize_or("gp_min_neighbors", gp_defaults.min_neighbors)?,
        max_neighbors: kv.usize_or("gp_max_neighbors", gp_defaults.max_neighbors)?,
    };

    let cfg = ExperimentConfig {
        world: resolve(kv.require_str("world")?),
        rig: resolve(kv.require_str("rig")?),
        mapping_trajectory: resolve(kv.require_str("mapping_trajectory")?),
        online_trajectory: resolve(kv.require_str("online_trajectory")?),
        estimator: resolve(kv.require_str("estimator")?),
        methods,
        map_resolution: kv.f64_or("map_resolution", 0.05)?,
        gp,
        mapping_outlier_rate: kv.f64_or("mapping_outlier_rate", 0.0)?,
        mapping_sigma_n: if kv.has("mapping_sigma_n") {
            Some(kv.require_f64("mapping_sigma_n")?)
        } else {
            None
        },
        seed: kv.u64_or("seed", 0)?,
    };
    kv.finish()?;
    Ok(cfg)
}
