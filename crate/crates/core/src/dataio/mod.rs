//! Trajectory schema and CSV ingestion, derivative estimation and the
//! (X, Y) regression matrices for the three dynamics formulations.

mod derivative;
mod trajectory;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use derivative::{differentiate, differentiate_columns, moving_average};
pub use trajectory::{
    load_trajectory, sidecar_path, write_metadata, write_trajectory, ColumnMapping, LoadOptions, Sample, Trajectory,
    TrajectoryMeta, TRAJECTORY_COLUMNS, TRAJECTORY_SCHEMA,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// `v' = f(v, R f_u)`
    Translational,
    /// `w' = g(w, n)`
    Attitude,
    /// `[v', w'] = h(v, w, n^2)`
    Full,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [Formulation::Translational, Formulation::Attitude, Formulation::Full];

    pub fn state_dim(self) -> usize {
        match self {
            Formulation::Translational | Formulation::Attitude => 3,
            Formulation::Full => 6,
        }
    }

    pub fn control_dim(self) -> usize {
        match self {
            Formulation::Translational => 3,
            Formulation::Attitude | Formulation::Full => 4,
        }
    }

    pub fn input_dim(self) -> usize {
        self.state_dim() + self.control_dim()
    }

    pub fn name(self) -> &'static str {
        match self {
            Formulation::Translational => "translational",
            Formulation::Attitude => "attitude",
            Formulation::Full => "full",
        }
    }

    pub fn input_names(self) -> Vec<&'static str> {
        match self {
            Formulation::Translational => vec!["vx", "vy", "vz", "fx", "fy", "fz"],
            Formulation::Attitude => vec!["wx", "wy", "wz", "n1", "n2", "n3", "n4"],
            Formulation::Full => vec!["vx", "vy", "vz", "wx", "wy", "wz", "n1sq", "n2sq", "n3sq", "n4sq"],
        }
    }

    pub fn output_names(self) -> Vec<&'static str> {
        match self {
            Formulation::Translational => vec!["dvx", "dvy", "dvz"],
            Formulation::Attitude => vec!["dwx", "dwy", "dwz"],
            Formulation::Full => vec!["dvx", "dvy", "dvz", "dwx", "dwy", "dwz"],
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Formulation::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown formulation {s:?}")))
    }
}

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    /// Columns with std below 1e-12 keep a unit scale.
    pub fn fit(t: &Tensor) -> Result<Self> {
        let (n, c) = t.shape();
        if n == 0 {
            return Err(Error::Empty("cannot compute statistics of zero rows".into()));
        }
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(t.row_slice(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(t.row_slice(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(cols: usize) -> Self {
        Self {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.cols() != self.dim() {
            return Err(Error::shape("ColumnStats", format!("{} columns", self.dim()), t.cols()));
        }
        Ok(())
    }

    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let mut out = t.clone();
        let c = t.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Ok(out)
    }

    pub fn denormalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let mut out = t.clone();
        let c = t.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = *v * self.std[j] + self.mean[j];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x: ColumnStats,
    pub y: ColumnStats,
}

impl Normalization {
    pub fn fit(x: &Tensor, y: &Tensor) -> Result<Self> {
        Ok(Self {
            x: ColumnStats::fit(x)?,
            y: ColumnStats::fit(y)?,
        })
    }

    pub fn identity(x_cols: usize, y_cols: usize) -> Self {
        Self {
            x: ColumnStats::identity(x_cols),
            y: ColumnStats::identity(y_cols),
        }
    }
}

/// `(X, Y)` for one formulation and one wind task, in physical units,
/// together with the statistics used to normalize it.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    pub x: Tensor,
    pub y: Tensor,
    pub formulation: Formulation,
    pub label: String,
    pub norm: Normalization,
}

impl RegressionDataset {
    /// Statistics are fit on the data itself.
    pub fn new(x: Tensor, y: Tensor, formulation: Formulation, label: impl Into<String>) -> Result<Self> {
        if x.cols() != formulation.input_dim() || y.cols() != formulation.state_dim() {
            return Err(Error::shape(
                "RegressionDataset",
                format!("X width {} and Y width {}", formulation.input_dim(), formulation.state_dim()),
                format!("X width {} and Y width {}", x.cols(), y.cols()),
            ));
        }
        if x.rows() != y.rows() {
            return Err(Error::shape("RegressionDataset rows", x.rows(), y.rows()));
        }
        let norm = Normalization::fit(&x, &y)?;
        Ok(Self {
            x,
            y,
            formulation,
            label: label.into(),
            norm,
        })
    }

    pub fn with_norm(mut self, norm: Normalization) -> Self {
        self.norm = norm;
        self
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn normalized_x(&self) -> Result<Tensor> {
        self.norm.x.normalize(&self.x)
    }

    pub fn normalized_y(&self) -> Result<Tensor> {
        self.norm.y.normalize(&self.y)
    }

    /// Rows `idx`, keeping the statistics.
    pub fn select(&self, idx: &[usize]) -> RegressionDataset {
        RegressionDataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            formulation: self.formulation,
            label: self.label.clone(),
            norm: self.norm.clone(),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> RegressionDataset {
        RegressionDataset {
            x: self.x.slice_rows(start, end),
            y: self.y.slice_rows(start, end),
            formulation: self.formulation,
            label: self.label.clone(),
            norm: self.norm.clone(),
        }
    }
}

/// `v'` and `w'` by finite differences after optional smoothing.
pub fn estimate_derivatives(traj: &Trajectory, smoothing_window: usize) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    if traj.len() < 3 {
        return Err(Error::Empty(format!(
            "derivative estimation needs at least 3 samples, got {}",
            traj.len()
        )));
    }
    let dt = traj.dt()?;
    Ok((
        differentiate_columns(&traj.v, dt, smoothing_window)?,
        differentiate_columns(&traj.omega, dt, smoothing_window)?,
    ))
}

/// Regression matrices for `formulation`; targets come from
/// [`estimate_derivatives`].
///
/// With a smoothing window above 1, the `window / 2` samples at each end are
/// dropped: their window is truncated down to the raw sample, and the
/// one-sided end stencil amplifies that noise several-fold.
pub fn build_features(
    traj: &Trajectory,
    formulation: Formulation,
    smoothing_window: usize,
    label: &str,
) -> Result<RegressionDataset> {
    traj.validate_grid(1e-6)?;
    let (v_dot, w_dot) = estimate_derivatives(traj, smoothing_window)?;
    let edge = if smoothing_window > 1 { smoothing_window / 2 } else { 0 };
    if traj.len() <= 2 * edge {
        return Err(Error::Empty(format!(
            "{label}: {} samples leave nothing after trimming {edge} per end for smoothing window {smoothing_window}",
            traj.len()
        )));
    }
    let n = traj.len() - 2 * edge;
    let mut x = Vec::with_capacity(n * formulation.input_dim());
    let mut y = Vec::with_capacity(n * formulation.state_dim());
    for k in edge..edge + n {
        let s = traj.sample(k);
        match formulation {
            Formulation::Translational => {
                x.extend(s.v);
                // R [0, 0, T]^T is T times the third column of R
                x.extend([s.r[2], s.r[5], s.r[8]].map(|c| c * s.thrust));
                y.extend(v_dot[k]);
            }
            Formulation::Attitude => {
                x.extend(s.omega);
                x.extend(s.motor_speeds);
                y.extend(w_dot[k]);
            }
            Formulation::Full => {
                x.extend(s.v);
                x.extend(s.omega);
                x.extend(s.motor_speeds.map(|m| m * m));
                y.extend(v_dot[k]);
                y.extend(w_dot[k]);
            }
        }
    }
    RegressionDataset::new(
        Tensor::from_vec(n, formulation.input_dim(), x)?,
        Tensor::from_vec(n, formulation.state_dim(), y)?,
        formulation,
        label,
    )
}

/// Chronological split: the first `floor(N * fraction)` samples adapt, the
/// rest evaluate. Both halves carry statistics of the adaptation half.
pub fn split_task(ds: &RegressionDataset, adapt_fraction: f64) -> Result<(RegressionDataset, RegressionDataset)> {
    if !(adapt_fraction > 0.0 && adapt_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "adapt fraction must lie in (0, 1), got {adapt_fraction}"
        )));
    }
    let n = ds.len();
    let cut = (n as f64 * adapt_fraction).floor() as usize;
    if cut == 0 || cut == n {
        return Err(Error::Empty(format!(
            "split of {n} samples at fraction {adapt_fraction} leaves an empty side"
        )));
    }
    let adapt = ds.slice(0, cut);
    let norm = Normalization::fit(&adapt.x, &adapt.y)?;
    Ok((adapt.with_norm(norm.clone()), ds.slice(cut, n).with_norm(norm)))
}
