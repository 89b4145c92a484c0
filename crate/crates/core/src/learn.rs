//! The LeARN model: a learned basis library `Theta(X; psi)` and a
//! state-dependent selection matrix `E(X; phi)` predicting
//! `y = Theta(X) E(X)^T`.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init_mlp, mlp_forward_prefixed, Activation, Graph, ParamSet, ParamVars, Tensor, Var};
use crate::dataio::{Formulation, Normalization};
use crate::error::{Error, Result};
use crate::sindy::{build_library, FixedLibrary};

pub const BASIS_PREFIX: &str = "basis.";
pub const SELECTOR_PREFIX: &str = "selector.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisMode {
    /// One scalar network shared by every feature: `Theta` is `1 x P(I+U)`.
    Elementwise,
    /// One network on the whole feature vector: `Theta` is `1 x P`.
    Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnConfig {
    pub mode: BasisMode,
    pub num_basis: usize,
    pub hidden: Vec<usize>,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            mode: BasisMode::Elementwise,
            num_basis: 2,
            hidden: vec![12, 16, 24, 48],
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_basis == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("learn: num_basis and hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedModel {
    pub formulation: Formulation,
    pub mode: BasisMode,
    pub num_basis: usize,
    pub hidden: Vec<usize>,
    /// Replaces the basis network by fixed functions (no `basis.*` params).
    pub fixed_basis: Option<FixedLibrary>,
    /// `basis.layer{l}.*` (psi) followed by `selector.layer{l}.*` (phi).
    pub params: ParamSet,
    pub norm: Normalization,
}

fn add_prefixed(out: &mut ParamSet, prefix: &str, p: ParamSet) -> Result<()> {
    for (name, t) in p.iter() {
        out.insert(format!("{prefix}{name}"), t.clone())?;
    }
    Ok(())
}

impl LearnedModel {
    pub fn new<R: Rng + ?Sized>(
        formulation: Formulation,
        cfg: &LearnConfig,
        norm: Normalization,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut model = Self {
            formulation,
            mode: cfg.mode,
            num_basis: cfg.num_basis,
            hidden: cfg.hidden.clone(),
            fixed_basis: None,
            params: ParamSet::new(),
            norm,
        };
        let mut params = ParamSet::new();
        add_prefixed(&mut params, BASIS_PREFIX, init_mlp(&model.basis_dims(), rng)?)?;
        add_prefixed(&mut params, SELECTOR_PREFIX, init_mlp(&model.selector_dims(), rng)?)?;
        model.params = params;
        Ok(model)
    }

    /// Fixed basis functions and a constant `I x W` selection matrix: zero
    /// selector weights and the flattened matrix as the output bias.
    pub fn with_fixed_basis(
        formulation: Formulation,
        library: FixedLibrary,
        e: &Tensor,
        hidden: &[usize],
        norm: Normalization,
    ) -> Result<Self> {
        let mut model = Self {
            formulation,
            mode: BasisMode::Elementwise,
            num_basis: library.len(),
            hidden: hidden.to_vec(),
            fixed_basis: Some(library),
            params: ParamSet::new(),
            norm,
        };
        let (i, w) = (model.output_dim(), model.basis_width());
        if e.shape() != (i, w) {
            return Err(Error::shape("fixed selection matrix", format!("{i}x{w}"), format!("{:?}", e.shape())));
        }
        let dims = model.selector_dims();
        let mut sel = ParamSet::new();
        for (l, win) in dims.windows(2).enumerate() {
            sel.insert(crate::autodiff::nn::weight_name(l), Tensor::zeros(win[0], win[1]))?;
            let bias = if l + 2 == dims.len() {
                Tensor::from_vec(1, win[1], e.data().to_vec())?
            } else {
                Tensor::zeros(1, win[1])
            };
            sel.insert(crate::autodiff::nn::bias_name(l), bias)?;
        }
        add_prefixed(&mut model.params, SELECTOR_PREFIX, sel)?;
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.formulation.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.formulation.state_dim()
    }

    /// Width W of `Theta`.
    pub fn basis_width(&self) -> usize {
        match self.mode {
            BasisMode::Elementwise => self.num_basis * self.input_dim(),
            BasisMode::Vector => self.num_basis,
        }
    }

    pub fn basis_dims(&self) -> Vec<usize> {
        let first = match self.mode {
            BasisMode::Elementwise => 1,
            BasisMode::Vector => self.input_dim(),
        };
        std::iter::once(first)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.num_basis))
            .collect()
    }

    pub fn selector_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output_dim() * self.basis_width()))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "LeARN input",
                format!("width {}", self.input_dim()),
                format!("width {}", x.cols()),
            ));
        }
        if let Some(i) = x.first_non_finite() {
            return Err(Error::NonFinite {
                context: "LeARN input",
                index: i,
            });
        }
        Ok(())
    }

    /// `Theta` for a batch, `N x W`.
    pub fn theta_var<'g>(&self, vars: &ParamVars<'g>, x: &Tensor) -> Result<Var<'g>> {
        self.check_input(x)?;
        let g = graph_of(vars)?;
        let (n, f) = x.shape();
        if let Some(lib) = &self.fixed_basis {
            return Ok(g.constant(build_library(x, lib)?));
        }
        match self.mode {
            BasisMode::Vector => {
                mlp_forward_prefixed(vars, BASIS_PREFIX, g.constant(x.clone()), &self.basis_dims(), Activation::Gelu)
            }
            BasisMode::Elementwise => {
                let p = self.num_basis;
                let column = Tensor::from_vec(n * f, 1, x.data().to_vec())?;
                let m = mlp_forward_prefixed(vars, BASIS_PREFIX, g.constant(column), &self.basis_dims(), Activation::Gelu)?;
                // Theta[r, q * F + j] = m_q(x[r, j]) = M[r * F + j, q]
                let mut index = Vec::with_capacity(n * p * f);
                for r in 0..n {
                    for q in 0..p {
                        for j in 0..f {
                            index.push((r * f + j) * p + q);
                        }
                    }
                }
                m.gather(Rc::from(index), n, p * f)
            }
        }
    }

    /// Flattened selection matrices, `N x (I W)`; row r reshapes row-major to `E(x_r)`.
    pub fn selector_var<'g>(&self, vars: &ParamVars<'g>, x: &Tensor) -> Result<Var<'g>> {
        self.check_input(x)?;
        let g = graph_of(vars)?;
        mlp_forward_prefixed(vars, SELECTOR_PREFIX, g.constant(x.clone()), &self.selector_dims(), Activation::Gelu)
    }

    /// `N x I` predictions on normalized inputs.
    pub fn forward<'g>(&self, vars: &ParamVars<'g>, x: &Tensor) -> Result<Var<'g>> {
        let theta = self.theta_var(vars, x)?;
        let sel = self.selector_var(vars, x)?;
        theta.row_bilinear(&sel)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_with(&self.params, x)
    }

    pub fn predict_with(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let vars = params.to_constants(&g);
        Ok((*self.forward(&vars, x)?.value()).clone())
    }

    /// Physical units in and out.
    pub fn predict_raw(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.predict(&self.norm.x.normalize(x)?)?;
        self.norm.y.denormalize(&y)
    }

    pub fn theta_forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let vars = self.params.to_constants(&g);
        Ok((*self.theta_var(&vars, x)?.value()).clone())
    }

    /// `E(x)` for a single row, `I x W`.
    pub fn selector_forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != 1 {
            return Err(Error::shape("selector_forward", "1 row", x.rows()));
        }
        let g = Graph::new();
        let vars = self.params.to_constants(&g);
        let s = self.selector_var(&vars, x)?.value();
        Tensor::from_vec(self.output_dim(), self.basis_width(), s.data().to_vec())
    }

    /// Learned scalar basis functions on `grid`, `G x P`. In vector mode
    /// this is a partial-dependence curve per feature (others at 0),
    /// `G x (P F)` with feature-major columns.
    pub fn basis_curves(&self, grid: &[f64]) -> Result<Tensor> {
        let gsz = grid.len();
        let g = Graph::new();
        let vars = self.params.to_constants(&g);
        if let Some(lib) = &self.fixed_basis {
            return build_library(&Tensor::from_vec(gsz, 1, grid.to_vec())?, lib);
        }
        match self.mode {
            BasisMode::Elementwise => {
                let x = Tensor::from_vec(gsz, 1, grid.to_vec())?;
                let out = mlp_forward_prefixed(&vars, BASIS_PREFIX, g.constant(x), &self.basis_dims(), Activation::Gelu)?;
                Ok((*out.value()).clone())
            }
            BasisMode::Vector => {
                let (f, p) = (self.input_dim(), self.num_basis);
                let mut out = Tensor::zeros(gsz, p * f);
                for j in 0..f {
                    let mut x = Tensor::zeros(gsz, f);
                    for (r, &v) in grid.iter().enumerate() {
                        x.set(r, j, v);
                    }
                    let y = mlp_forward_prefixed(&vars, BASIS_PREFIX, g.constant(x), &self.basis_dims(), Activation::Gelu)?
                        .value();
                    for r in 0..gsz {
                        for q in 0..p {
                            out.set(r, j * p + q, y.get(r, q));
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Writes `<stem>.bin`/`<stem>.json` (parameters) and `<stem>.model.json`.
    pub fn save(&self, stem: &Path, lambda: f64, lipschitz: f64) -> Result<()> {
        self.params.save(stem)?;
        let manifest = ModelManifest {
            formulation: self.formulation,
            mode: self.mode,
            num_basis: self.num_basis,
            hidden: self.hidden.clone(),
            fixed_basis: self.fixed_basis.clone(),
            lambda,
            lipschitz,
            norm: self.norm.clone(),
        };
        let path = manifest_path(stem);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let path = manifest_path(stem);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: ModelManifest = serde_json::from_str(&text)?;
        let model = Self {
            formulation: m.formulation,
            mode: m.mode,
            num_basis: m.num_basis,
            hidden: m.hidden,
            fixed_basis: m.fixed_basis,
            params: ParamSet::load(stem)?,
            norm: m.norm,
        };
        model.check_layout()?;
        Ok(model)
    }

    fn check_layout(&self) -> Result<()> {
        let probe = Tensor::zeros(1, self.input_dim());
        self.predict(&probe).map(|_| ())
    }
}

fn manifest_path(stem: &Path) -> std::path::PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".model.json");
    s.into()
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    formulation: Formulation,
    mode: BasisMode,
    num_basis: usize,
    hidden: Vec<usize>,
    fixed_basis: Option<FixedLibrary>,
    lambda: f64,
    lipschitz: f64,
    norm: Normalization,
}

fn graph_of<'g>(vars: &ParamVars<'g>) -> Result<&'g Graph> {
    vars.vars()
        .first()
        .map(|v| v.graph())
        .ok_or_else(|| Error::Empty("model has no parameters".into()))
}

/// Mean over the batch of the squared residual summed over outputs.
pub fn task_loss<'g>(model: &LearnedModel, vars: &ParamVars<'g>, x: &Tensor, y: &Tensor) -> Result<Var<'g>> {
    if x.rows() == 0 {
        return Err(Error::Empty("task_loss batch is empty".into()));
    }
    if y.shape() != (x.rows(), model.output_dim()) {
        return Err(Error::shape(
            "task_loss targets",
            format!("{}x{}", x.rows(), model.output_dim()),
            format!("{:?}", y.shape()),
        ));
    }
    let pred = model.forward(vars, x)?;
    let g = pred.graph();
    let r = pred.sub(&g.constant(y.clone()))?;
    Ok(r.mul(&r)?.sum().scale(1.0 / x.rows() as f64))
}

/// Squared residual at one step plus `lambda * max(0, |f_t - f_prev|_1 - L)`.
/// Returns the loss and the prediction `f_t`.
pub fn adapt_loss<'g>(
    model: &LearnedModel,
    vars: &ParamVars<'g>,
    x_t: &Tensor,
    y_t: &Tensor,
    f_prev: Option<&Tensor>,
    lambda: f64,
    lipschitz: f64,
) -> Result<(Var<'g>, Var<'g>)> {
    if lambda < 0.0 || lipschitz < 0.0 || lambda.is_nan() || lipschitz.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "adapt_loss needs lambda >= 0 and L >= 0, got {lambda} and {lipschitz}"
        )));
    }
    if x_t.rows() != 1 || y_t.shape() != (1, model.output_dim()) {
        return Err(Error::shape(
            "adapt_loss sample",
            format!("1x{} input and 1x{} target", model.input_dim(), model.output_dim()),
            format!("{:?} and {:?}", x_t.shape(), y_t.shape()),
        ));
    }
    let pred = model.forward(vars, x_t)?;
    let g = pred.graph();
    let r = pred.sub(&g.constant(y_t.clone()))?;
    let mut loss = r.mul(&r)?.sum();
    if let Some(prev) = f_prev {
        if lambda > 0.0 && lipschitz.is_finite() {
            let jump = pred.sub(&g.constant(prev.clone()))?.abs().sum();
            loss = loss.add(&jump.add_const(-lipschitz).relu().scale(lambda))?;
        }
    }
    Ok((loss, pred))
}
