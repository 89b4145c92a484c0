use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{SimConfig, WindCondition};

pub const TRAJECTORY_SCHEMA: &str = "learnsysid-traj-v1";

pub const TRAJECTORY_COLUMNS: [&str; 27] = [
    "t", "px", "py", "pz", "vx", "vy", "vz", "r11", "r12", "r13", "r21", "r22", "r23", "r31", "r32", "r33", "wx",
    "wy", "wz", "T", "taux", "tauy", "tauz", "n1", "n2", "n3", "n4",
];

/// One logged sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub p: [f64; 3],
    pub v: [f64; 3],
    /// Row-major rotation matrix.
    pub r: [f64; 9],
    pub omega: [f64; 3],
    pub thrust: f64,
    pub torque: [f64; 3],
    pub motor_speeds: [f64; 4],
}

/// Time-stamped flight log on a uniform grid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub p: Vec<[f64; 3]>,
    pub v: Vec<[f64; 3]>,
    pub r: Vec<[f64; 9]>,
    pub omega: Vec<[f64; 3]>,
    pub thrust: Vec<f64>,
    pub torque: Vec<[f64; 3]>,
    pub motor_speeds: Vec<[f64; 4]>,
    /// Exact derivatives when the source knows them (simulator output).
    pub v_dot: Option<Vec<[f64; 3]>>,
    pub omega_dot: Option<Vec<[f64; 3]>>,
}

impl Trajectory {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            t: Vec::with_capacity(n),
            p: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            r: Vec::with_capacity(n),
            omega: Vec::with_capacity(n),
            thrust: Vec::with_capacity(n),
            torque: Vec::with_capacity(n),
            motor_speeds: Vec::with_capacity(n),
            v_dot: None,
            omega_dot: None,
        }
    }

    pub fn push(&mut self, s: Sample) {
        self.t.push(s.t);
        self.p.push(s.p);
        self.v.push(s.v);
        self.r.push(s.r);
        self.omega.push(s.omega);
        self.thrust.push(s.thrust);
        self.torque.push(s.torque);
        self.motor_speeds.push(s.motor_speeds);
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn sample(&self, k: usize) -> Sample {
        Sample {
            t: self.t[k],
            p: self.p[k],
            v: self.v[k],
            r: self.r[k],
            omega: self.omega[k],
            thrust: self.thrust[k],
            torque: self.torque[k],
            motor_speeds: self.motor_speeds[k],
        }
    }

    pub fn rotation(&self, k: usize) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.r[k])
    }

    /// Mean step of the time grid.
    pub fn dt(&self) -> Result<f64> {
        let n = self.len();
        if n < 2 {
            return Err(Error::Empty(format!("need at least 2 samples for a time step, got {n}")));
        }
        Ok((self.t[n - 1] - self.t[0]) / (n - 1) as f64)
    }

    /// Array lengths agree and the grid is uniform within relative `tol`.
    pub fn validate_grid(&self, tol: f64) -> Result<()> {
        let n = self.len();
        let lens = [
            self.p.len(),
            self.v.len(),
            self.r.len(),
            self.omega.len(),
            self.thrust.len(),
            self.torque.len(),
            self.motor_speeds.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::shape("Trajectory", format!("{n} samples in every array"), format!("{lens:?}")));
        }
        let nominal = self.dt()?;
        if !(nominal > 0.0) {
            return Err(Error::NonUniformGrid {
                index: 1,
                dt: nominal,
                nominal,
            });
        }
        for k in 1..n {
            let dt = self.t[k] - self.t[k - 1];
            if ((dt - nominal) / nominal).abs() > tol {
                return Err(Error::NonUniformGrid { index: k, dt, nominal });
            }
        }
        Ok(())
    }

    /// Largest `|R^T R - I|_F` over the samples.
    pub fn max_orthonormality_error(&self) -> f64 {
        (0..self.len())
            .map(|k| {
                let r = self.rotation(k);
                (r.transpose() * r - Matrix3::identity()).norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Metadata sidecar written next to every simulated trajectory CSV.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryMeta {
    pub schema: String,
    pub wind: WindCondition,
    pub dt: f64,
    pub duration: f64,
    pub samples: usize,
    pub seed: u64,
    pub simulator: SimConfig,
}

/// Sidecar path: the CSV path with its extension replaced by `json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(TRAJECTORY_COLUMNS)?;
    for k in 0..traj.len() {
        let s = traj.sample(k);
        let mut row = Vec::with_capacity(TRAJECTORY_COLUMNS.len());
        row.push(s.t);
        row.extend(s.p);
        row.extend(s.v);
        row.extend(s.r);
        row.extend(s.omega);
        row.push(s.thrust);
        row.extend(s.torque);
        row.extend(s.motor_speeds);
        w.write_record(row.into_iter().map(fmt_f64))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_metadata(path: &Path, meta: &TrajectoryMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Renames applied to external CSV headers before schema lookup,
/// `{"external name": "schema name"}`.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct ColumnMapping(pub HashMap<String, String>);

impl ColumnMapping {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub mapping: ColumnMapping,
    /// Relative tolerance on the time step.
    pub dt_tolerance: f64,
    /// Rotations worse than this produce a warning.
    pub rotation_tolerance: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            mapping: ColumnMapping::default(),
            dt_tolerance: 1e-6,
            rotation_tolerance: 1e-3,
        }
    }
}

/// Parses a trajectory CSV keyed by header names, so column order is free.
pub fn load_trajectory(path: &Path, opts: &LoadOptions) -> Result<Trajectory> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| opts.mapping.0.get(h).cloned().unwrap_or_else(|| h.to_string()))
        .collect();
    let mut index = [0usize; TRAJECTORY_COLUMNS.len()];
    for (slot, name) in index.iter_mut().zip(TRAJECTORY_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }

    let mut traj = Trajectory::default();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        // header is line 1
        let line = i + 2;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut vals = [0.0; TRAJECTORY_COLUMNS.len()];
        for (k, &col) in index.iter().enumerate() {
            let field = &record[col];
            vals[k] = field.parse().map_err(|_| Error::Parse {
                row: line,
                message: format!("column {}: cannot parse {field:?} as a number", TRAJECTORY_COLUMNS[k]),
            })?;
        }
        let arr = |a: usize, b: usize| -> Vec<f64> { vals[a..b].to_vec() };
        traj.push(Sample {
            t: vals[0],
            p: arr(1, 4).try_into().unwrap(),
            v: arr(4, 7).try_into().unwrap(),
            r: arr(7, 16).try_into().unwrap(),
            omega: arr(16, 19).try_into().unwrap(),
            thrust: vals[19],
            torque: arr(20, 23).try_into().unwrap(),
            motor_speeds: arr(23, 27).try_into().unwrap(),
        });
    }
    if traj.len() < 2 {
        return Err(Error::Empty(format!("{} has fewer than 2 samples", path.display())));
    }
    traj.validate_grid(opts.dt_tolerance)?;
    let rot = traj.max_orthonormality_error();
    if rot > opts.rotation_tolerance {
        log::warn!(
            "{}: rotation matrices deviate from orthonormal by up to {rot:.3e}",
            path.display()
        );
    }
    Ok(traj)
}
