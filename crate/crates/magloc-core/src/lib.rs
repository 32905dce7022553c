//! Outlier-robust magnetic-field localization without infrastructure:
//! offline hash-grid map construction with local GP densification, a
//! synthetic measurement simulator, an importance-sampling state estimator
//! with a truncated matching cost, reference baselines, and an experiment
//! harness.

pub mod baselines;
pub mod bench;
pub mod config;
pub mod estimator;
pub mod eval;
pub mod harness;
pub mod io;
pub mod map;
pub mod numeric;
pub mod sim;
pub mod so3;

pub use estimator::{
    estimate_step, matching_cost, propagate, run_sequence, ControlSample, EstimatorConfig,
    State, StepDiagnostics,
};
pub use eval::{compute_ate, AteReport, EstimateRecord};
pub use map::{build_map, cell_key, load_map, save_map, GpHyperparams, MagneticMap, MapCellKey};
pub use sim::{
    generate_trajectory, synthesize_frame, world_field, DipoleSource, MeasurementFrame,
    NoiseModel, SensorRig, TrajectorySpec,
};
pub use so3::{exp_so3, log_so3, skew, RotMat, RotVec};
