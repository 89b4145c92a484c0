//! Fixed elementwise basis library and sequentially thresholded least
//! squares (STLSQ).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataio::{Formulation, Normalization, RegressionDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFunction {
    Sin,
    Cos,
    Identity,
}

impl BasisFunction {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            BasisFunction::Sin => x.sin(),
            BasisFunction::Cos => x.cos(),
            BasisFunction::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BasisFunction::Sin => "sin",
            BasisFunction::Cos => "cos",
            BasisFunction::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedLibrary {
    pub functions: Vec<BasisFunction>,
    /// Appends the raw features as one more basis block.
    #[serde(default)]
    pub include_identity: bool,
}

impl Default for FixedLibrary {
    fn default() -> Self {
        Self {
            functions: vec![BasisFunction::Sin, BasisFunction::Cos],
            include_identity: false,
        }
    }
}

impl FixedLibrary {
    pub fn basis(&self) -> Vec<BasisFunction> {
        let mut b = self.functions.clone();
        if self.include_identity && !b.contains(&BasisFunction::Identity) {
            b.push(BasisFunction::Identity);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.basis().len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis().is_empty()
    }
}

/// Column `b * F + j` holds basis `b` applied to feature `j`.
pub fn build_library(x: &Tensor, lib: &FixedLibrary) -> Result<Tensor> {
    let basis = lib.basis();
    if basis.is_empty() {
        return Err(Error::InvalidArgument("basis library is empty".into()));
    }
    if let Some(i) = x.first_non_finite() {
        return Err(Error::NonFinite {
            context: "library input",
            index: i,
        });
    }
    let (n, f) = x.shape();
    let w = basis.len() * f;
    let mut out = Tensor::zeros(n, w);
    for r in 0..n {
        let xr = x.row_slice(r);
        for (b, func) in basis.iter().enumerate() {
            for (j, &v) in xr.iter().enumerate() {
                out.set(r, b * f + j, func.eval(v));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SindyConfig {
    pub threshold: f64,
    pub ridge: f64,
    pub max_iters: usize,
    pub library: FixedLibrary,
}

impl Default for SindyConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            ridge: 1e-6,
            max_iters: 20,
            library: FixedLibrary::default(),
        }
    }
}

impl SindyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold < 0.0 || self.ridge < 0.0 || self.max_iters == 0 {
            return Err(Error::Config(format!(
                "sindy: threshold {} and ridge {} must be >= 0, max_iters {} >= 1",
                self.threshold, self.ridge, self.max_iters
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StlsqResult {
    /// `I x M`, row k for output dimension k.
    pub coefficients: Tensor,
    /// Per output, the active column set after every pass, starting with all columns.
    pub active_history: Vec<Vec<Vec<usize>>>,
    pub warnings: Vec<String>,
}

/// Ridge solution `argmin |A c - y|^2 + ridge |c|^2` via SVD. Singular
/// values below the rank tolerance are dropped, which gives the
/// minimum-norm solution; the flag reports whether that happened.
fn ridge_solve(a: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> (DVector<f64>, bool) {
    let svd = a.clone().svd(true, true);
    let (u, vt, s) = (svd.u.unwrap(), svd.v_t.unwrap(), svd.singular_values);
    let smax = s.iter().copied().fold(0.0, f64::max);
    let tol = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * smax;
    let uty = u.transpose() * y;
    let mut deficient = s.len() < a.ncols();
    let mut z = DVector::zeros(s.len());
    for i in 0..s.len() {
        if s[i] > tol {
            z[i] = s[i] / (s[i] * s[i] + ridge) * uty[i];
        } else {
            deficient = true;
        }
    }
    (vt.transpose() * z, deficient)
}

fn columns(theta: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(theta.nrows(), idx.len(), |r, c| theta[(r, idx[c])])
}

/// STLSQ with independent active sets per output dimension.
///
/// Each pass solves the ridge problem on the active columns and drops those
/// below `threshold`. Once a pass drops nothing, the support is refit
/// without the ridge term; if that refit leaves a coefficient below the
/// threshold the pruning continues, otherwise it is the result.
pub fn stlsq(theta: &Tensor, y: &Tensor, threshold: f64, ridge: f64, max_iters: usize) -> Result<StlsqResult> {
    let (n, m) = theta.shape();
    if y.rows() != n {
        return Err(Error::shape("stlsq targets", n, y.rows()));
    }
    if n == 0 {
        return Err(Error::Empty("stlsq needs at least one sample".into()));
    }
    if let Some(i) = theta.first_non_finite().or_else(|| y.first_non_finite()) {
        return Err(Error::NonFinite {
            context: "stlsq input",
            index: i,
        });
    }
    let mut warnings = Vec::new();
    if n < m {
        warnings.push(format!("stlsq: {n} samples for {m} library columns"));
    }
    let th = DMatrix::from_row_slice(n, m, theta.data());
    let outputs = y.cols();
    let mut coefficients = Tensor::zeros(outputs, m);
    let mut active_history = Vec::with_capacity(outputs);

    for k in 0..outputs {
        let yk = DVector::from_vec(y.column(k));
        let mut active: Vec<usize> = (0..m).collect();
        let mut history = vec![active.clone()];
        let mut result: Option<Vec<(usize, f64)>> = None;
        let mut last: Vec<(usize, f64)> = Vec::new();
        let mut deficient_seen = false;

        for _ in 0..max_iters {
            if active.is_empty() {
                result = Some(Vec::new());
                break;
            }
            let a = columns(&th, &active);
            let (c, deficient) = ridge_solve(&a, &yk, ridge);
            deficient_seen |= deficient;
            let keep: Vec<usize> = (0..active.len()).filter(|&i| c[i].abs() >= threshold).collect();
            if keep.len() == active.len() {
                let (c0, deficient) = ridge_solve(&a, &yk, 0.0);
                deficient_seen |= deficient;
                let keep0: Vec<usize> = (0..active.len()).filter(|&i| c0[i].abs() >= threshold).collect();
                if keep0.len() == active.len() {
                    result = Some(active.iter().copied().zip(c0.iter().copied()).collect());
                    break;
                }
                last = keep0.iter().map(|&i| (active[i], c0[i])).collect();
                active = keep0.iter().map(|&i| active[i]).collect();
            } else {
                last = keep.iter().map(|&i| (active[i], c[i])).collect();
                active = keep.iter().map(|&i| active[i]).collect();
            }
            history.push(active.clone());
        }
        if deficient_seen {
            warnings.push(format!(
                "stlsq output {k}: rank-deficient active system, used the minimum-norm solution"
            ));
        }
        let coefs = result.unwrap_or_else(|| {
            warnings.push(format!("stlsq output {k}: active set still changing after {max_iters} passes"));
            last
        });
        for (j, v) in coefs {
            coefficients.set(k, j, v);
        }
        active_history.push(history);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(StlsqResult {
        coefficients,
        active_history,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseModel {
    pub library: FixedLibrary,
    pub threshold: f64,
    pub ridge: f64,
    pub formulation: Option<Formulation>,
    pub norm: Normalization,
    /// `I x B(I+U)`.
    pub coefficients: Tensor,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Fits on the dataset normalized with its own statistics.
pub fn sindy_fit(data: &RegressionDataset, cfg: &SindyConfig) -> Result<SparseModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty(format!("dataset {} has no samples", data.label)));
    }
    let x = data.normalized_x()?;
    let y = data.normalized_y()?;
    let theta = build_library(&x, &cfg.library)?;
    let res = stlsq(&theta, &y, cfg.threshold, cfg.ridge, cfg.max_iters)?;
    Ok(SparseModel {
        library: cfg.library.clone(),
        threshold: cfg.threshold,
        ridge: cfg.ridge,
        formulation: Some(data.formulation),
        norm: data.norm.clone(),
        coefficients: res.coefficients,
        warnings: res.warnings,
    })
}

/// `build_library(X) E^T` on normalized inputs.
pub fn sindy_predict(model: &SparseModel, x: &Tensor) -> Result<Tensor> {
    let width = model.coefficients.cols() / model.library.len().max(1);
    if x.cols() != width {
        return Err(Error::shape("sindy_predict input", format!("width {width}"), format!("width {}", x.cols())));
    }
    build_library(x, &model.library)?.matmul(&model.coefficients, false, true)
}

impl SparseModel {
    /// Physical units in and out.
    pub fn predict_raw(&self, x: &Tensor) -> Result<Tensor> {
        let y = sindy_predict(self, &self.norm.x.normalize(x)?)?;
        self.norm.y.denormalize(&y)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_of_zero_and_half_pi() {
        let lib = FixedLibrary::default();
        let z = build_library(&Tensor::zeros(1, 3), &lib).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let h = build_library(&Tensor::scalar(std::f64::consts::FRAC_PI_2), &lib).unwrap();
        assert!((h.data()[0] - 1.0).abs() < 1e-12 && h.data()[1].abs() < 1e-12);
        let empty = FixedLibrary {
            functions: vec![],
            include_identity: false,
        };
        assert!(build_library(&Tensor::zeros(1, 3), &empty).is_err());
    }

    #[test]
    fn zero_targets_give_zero_coefficients() {
        let theta = Tensor::from_vec(4, 2, vec![1.0, 0.5, 0.2, 0.1, -0.3, 0.9, 0.7, 0.0]).unwrap();
        let r = stlsq(&theta, &Tensor::zeros(4, 1), 0.2, 1e-6, 20).unwrap();
        assert!(r.coefficients.data().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn rank_deficiency_warns() {
        // duplicated column
        let theta = Tensor::from_vec(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let y = Tensor::from_vec(3, 1, vec![2.0, 4.0, 6.0]).unwrap();
        let r = stlsq(&theta, &y, 0.2, 0.0, 20).unwrap();
        assert!(!r.warnings.is_empty());
        assert!((r.coefficients.data()[0] - 1.0).abs() < 1e-12);
        assert!((r.coefficients.data()[1] - 1.0).abs() < 1e-12);
    }
}
