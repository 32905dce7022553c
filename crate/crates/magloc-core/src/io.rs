//! CSV readers and writers for the pipeline artifacts.
//!
//! Formats (all with a header row):
//! - samples.csv: `px,py,pz,bx,by,bz` — world-frame field samples.
//! - truth.csv:   `t,px,py,pz,phix,phiy,phiz,vx,vy,vz,wx,wy,wz`.
//! - frames.csv:  `t,sensor_id,bx,by,bz,is_outlier` — one row per sensor,
//!   rows of one frame contiguous with sensor_id counting up from 0.
//! - est.csv:     truth columns plus `s_min,ess,inliers,elapsed_us`; a row
//!   with `ess = 0` is a failed (coasted) step.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! write/read cycles reproduce values bit-exactly.

use crate::estimator::State;
use crate::eval::EstimateRecord;
use crate::map::RawMagSample;
use crate::sim::MeasurementFrame;
use crate::so3::RotVec;
use nalgebra::Vector3;
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Debug)]
pub enum IoError {
    Io(std::io::Error),
    Parse { file: String, line: usize, message: String },
}

impl std::fmt::Display for IoError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IoError::Io(e) => write!(f, "i/o error: {e}"),
            IoError::Parse { file, line, message } => write!(f, "{file}:{line}: {message}"),
        }
    }
}

impl std::error::Error for IoError {}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Io(e)
    }
}

fn parse_err(file: &Path, line: usize, message: String) -> IoError {
    IoError::Parse { file: file.display().to_string(), line, message }
}

struct CsvReader {
    rows: Vec<(usize, Vec<String>)>,
}

fn read_csv(path: &Path, expected_header: &str) -> Result<CsvReader, IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(parse_err(path, 1, "empty file".to_string()));
    };
    if header.trim() != expected_header {
        return Err(parse_err(
            path,
            1,
            format!("expected header `{expected_header}`, got `{}`", header.trim()),
        ));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows.push((idx + 1, line.split(',').map(|s| s.trim().to_string()).collect()));
    }
    Ok(CsvReader { rows })
}

fn field_f64(path: &Path, line: usize, fields: &[String], idx: usize) -> Result<f64, IoError> {
    let text = fields
        .get(idx)
        .ok_or_else(|| parse_err(path, line, format!("missing column {idx}")))?;
    text.parse()
        .map_err(|_| parse_err(path, line, format!("column {idx}: `{text}` is not a number")))
}

pub fn write_samples_csv(path: &Path, samples: &[RawMagSample]) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "px,py,pz,bx,by,bz")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.position.x, s.position.y, s.position.z, s.field.x, s.field.y, s.field.z
        )?;
    }
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<RawMagSample>, IoError> {
    let reader = read_csv(path, "px,py,pz,bx,by,bz")?;
    let mut out = Vec::with_capacity(reader.rows.len());
    for (line, fields) in &reader.rows {
        let mut v = [0.0; 6];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = field_f64(path, *line, fields, i)?;
        }
        out.push(RawMagSample {
            position: Vector3::new(v[0], v[1], v[2]),
            field: Vector3::new(v[3], v[4], v[5]),
        });
    }
    Ok(out)
}

const TRUTH_HEADER: &str = "t,px,py,pz,phix,phiy,phiz,vx,vy,vz,wx,wy,wz";

fn write_state_fields(w: &mut impl Write, s: &State) -> Result<(), std::io::Error> {
    write!(
        w,
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        s.t,
        s.p.x,
        s.p.y,
        s.p.z,
        s.phi.as_vector().x,
        s.phi.as_vector().y,
        s.phi.as_vector().z,
        s.v.x,
        s.v.y,
        s.v.z,
        s.omega.x,
        s.omega.y,
        s.omega.z
    )
}

fn state_from_fields(
    path: &Path,
    line: usize,
    fields: &[String],
) -> Result<State, IoError> {
    let mut v = [0.0; 13];
    for (i, slot) in v.iter_mut().enumerate() {
        *slot = field_f64(path, line, fields, i)?;
    }
    Ok(State {
        t: v[0],
        p: Vector3::new(v[1], v[2], v[3]),
        phi: RotVec::new(Vector3::new(v[4], v[5], v[6])),
        v: Vector3::new(v[7], v[8], v[9]),
        omega: Vector3::new(v[10], v[11], v[12]),
    })
}

pub fn write_truth_csv(path: &Path, states: &[State]) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{TRUTH_HEADER}")?;
    for s in states {
        write_state_fields(&mut w, s)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_truth_csv(path: &Path) -> Result<Vec<State>, IoError> {
    let reader = read_csv(path, TRUTH_HEADER)?;
    reader
        .rows
        .iter()
        .map(|(line, fields)| state_from_fields(path, *line, fields))
        .collect()
}

pub fn write_frames_csv(path: &Path, frames: &[MeasurementFrame]) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,sensor_id,bx,by,bz,is_outlier")?;
    for f in frames {
        for (i, reading) in f.readings.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                f.t,
                i,
                reading.x,
                reading.y,
                reading.z,
                f.truth_outlier_mask[i] as u8
            )?;
        }
    }
    Ok(())
}

pub fn read_frames_csv(path: &Path) -> Result<Vec<MeasurementFrame>, IoError> {
    let reader = read_csv(path, "t,sensor_id,bx,by,bz,is_outlier")?;
    let mut frames: Vec<MeasurementFrame> = Vec::new();
    for (line, fields) in &reader.rows {
        let t = field_f64(path, *line, fields, 0)?;
        let sensor_id = field_f64(path, *line, fields, 1)? as usize;
        let reading = Vector3::new(
            field_f64(path, *line, fields, 2)?,
            field_f64(path, *line, fields, 3)?,
            field_f64(path, *line, fields, 4)?,
        );
        let outlier = match fields.get(5).map(String::as_str) {
            Some("0") => false,
            Some("1") => true,
            other => {
                return Err(parse_err(
                    path,
                    *line,
                    format!("is_outlier must be 0 or 1, got {other:?}"),
                ))
            }
        };
        let start_new = frames.last().map(|f| f.t != t).unwrap_or(true);
        if start_new {
            if sensor_id != 0 {
                return Err(parse_err(
                    path,
                    *line,
                    format!("frame at t={t} must start with sensor_id 0, got {sensor_id}"),
                ));
            }
            frames.push(MeasurementFrame {
                t,
                readings: vec![reading],
                truth_outlier_mask: vec![outlier],
            });
        } else {
            let frame = frames.last_mut().unwrap();
            if sensor_id != frame.readings.len() {
                return Err(parse_err(
                    path,
                    *line,
                    format!(
                        "expected sensor_id {}, got {sensor_id} at t={t}",
                        frame.readings.len()
                    ),
                ));
            }
            frame.readings.push(reading);
            frame.truth_outlier_mask.push(outlier);
        }
    }
    Ok(frames)
}

const EST_HEADER: &str = "t,px,py,pz,phix,phiy,phiz,vx,vy,vz,wx,wy,wz,s_min,ess,inliers,elapsed_us";

pub fn write_est_csv(path: &Path, records: &[EstimateRecord]) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{EST_HEADER}")?;
    for r in records {
        write_state_fields(&mut w, &r.state)?;
        writeln!(w, ",{},{},{},{}", r.s_min, r.ess, r.inliers, r.elapsed_us)?;
    }
    Ok(())
}

pub fn read_est_csv(path: &Path) -> Result<Vec<EstimateRecord>, IoError> {
    let reader = read_csv(path, EST_HEADER)?;
    let mut out = Vec::with_capacity(reader.rows.len());
    for (line, fields) in &reader.rows {
        let state = state_from_fields(path, *line, fields)?;
        out.push(EstimateRecord {
            state,
            s_min: field_f64(path, *line, fields, 13)?,
            ess: field_f64(path, *line, fields, 14)?,
            inliers: field_f64(path, *line, fields, 15)? as u32,
            elapsed_us: field_f64(path, *line, fields, 16)?,
        });
    }
    Ok(out)
}

/// Trajectory overlay series for plotting: matched truth and estimate
/// positions per timestamp.
pub fn write_overlay_csv(
    path: &Path,
    truth: &[State],
    est: &[EstimateRecord],
) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,px_true,py_true,pz_true,px_est,py_est,pz_est")?;
    for r in est {
        if let Some(m) = truth
            .iter()
            .find(|s| (s.t - r.state.t).abs() <= crate::eval::MATCH_TOLERANCE)
        {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.state.t, m.p.x, m.p.y, m.p.z, r.state.p.x, r.state.p.y, r.state.p.z
            )?;
        }
    }
    Ok(())
}

/// Velocity series for plotting: matched truth and estimated velocities.
pub fn write_velocity_csv(
    path: &Path,
    truth: &[State],
    est: &[EstimateRecord],
) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,vx_true,vy_true,vz_true,vx_est,vy_est,vz_est")?;
    for r in est {
        if let Some(m) = truth
            .iter()
            .find(|s| (s.t - r.state.t).abs() <= crate::eval::MATCH_TOLERANCE)
        {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.state.t, m.v.x, m.v.y, m.v.z, r.state.v.x, r.state.v.y, r.state.v.z
            )?;
        }
    }
    Ok(())
}
