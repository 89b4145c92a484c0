//! Named parameter collections and their on-disk format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PARAMS_FORMAT_VERSION: &str = "learnsysid-params-v1";

/// Ordered, uniquely named collection of tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::KeyMismatch(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.iter().map(|(n, t)| (n.to_string(), t.shape())).collect()
    }

    /// All entries concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the layout.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape("ParamSet::unflatten", self.num_scalars(), flat.len()));
        }
        let mut offset = 0;
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            let (r, c) = t.shape();
            let chunk = flat[offset..offset + r * c].to_vec();
            offset += r * c;
            out.insert(name, Tensor::from_vec(r, c, chunk)?)?;
        }
        Ok(out)
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Registers every tensor as a trainable leaf on `graph`.
    pub fn to_vars<'g>(&self, graph: &'g Graph) -> ParamVars<'g> {
        ParamVars {
            names: self.names.clone(),
            vars: self.tensors.iter().map(|t| graph.leaf(t.clone())).collect(),
        }
    }

    /// Registers every tensor as a constant (no gradients flow).
    pub fn to_constants<'g>(&self, graph: &'g Graph) -> ParamVars<'g> {
        ParamVars {
            names: self.names.clone(),
            vars: self.tensors.iter().map(|t| graph.constant(t.clone())).collect(),
        }
    }

    /// `self - lr * grads`, entrywise, outside any graph.
    pub fn sgd_update(&self, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
        self.combine(grads, |p, g| p - lr * g)
    }

    pub fn combine(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        if !self.same_layout(other) {
            return Err(Error::KeyMismatch("parameter layouts differ".into()));
        }
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.zip_map(b, &f))
            .collect();
        Ok(ParamSet {
            names: self.names.clone(),
            tensors,
        })
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    /// Writes `<stem>.bin` (little-endian f64) and `<stem>.json` (layout).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let (bin, json) = param_paths(stem.as_ref());
        let mut bytes = Vec::with_capacity(self.num_scalars() * 8);
        for v in self.flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let manifest = ParamManifest {
            version: PARAMS_FORMAT_VERSION.to_string(),
            entries: self
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.to_string(),
                    shape: [t.rows(), t.cols()],
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<ParamSet> {
        let (bin, json) = param_paths(stem.as_ref());
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: ParamManifest = serde_json::from_str(&text)?;
        if manifest.version != PARAMS_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported parameter format `{}` (expected `{PARAMS_FORMAT_VERSION}`)",
                manifest.version
            )));
        }
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "{}: length {} is not a multiple of 8",
                bin.display(),
                bytes.len()
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let expected: usize = manifest.entries.iter().map(|e| e.shape[0] * e.shape[1]).sum();
        if expected != flat.len() {
            return Err(Error::shape("ParamSet::load", expected, flat.len()));
        }
        let mut out = ParamSet::new();
        let mut offset = 0;
        for e in manifest.entries {
            let n = e.shape[0] * e.shape[1];
            out.insert(
                e.name,
                Tensor::from_vec(e.shape[0], e.shape[1], flat[offset..offset + n].to_vec())?,
            )?;
            offset += n;
        }
        Ok(out)
    }
}

fn param_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

#[derive(Serialize, Deserialize)]
struct ParamManifest {
    version: String,
    entries: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

/// A [`ParamSet`] living on a graph.
#[derive(Clone, Debug)]
pub struct ParamVars<'g> {
    names: Vec<String>,
    vars: Vec<Var<'g>>,
}

impl<'g> ParamVars<'g> {
    pub fn get(&self, name: &str) -> Option<Var<'g>> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    pub fn values(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.vars.iter().map(|v| (*v.value()).clone()).collect(),
        }
    }

    fn with_vars(&self, vars: Vec<Var<'g>>) -> ParamVars<'g> {
        ParamVars {
            names: self.names.clone(),
            vars,
        }
    }
}

/// Gradient of `loss` with respect to every parameter in `params`.
pub fn backward<'g>(
    loss: Var<'g>,
    params: &ParamVars<'g>,
    create_graph: bool,
) -> Result<ParamVars<'g>> {
    let grads = loss.graph().gradients(loss, &params.vars, create_graph)?;
    Ok(params.with_vars(grads))
}

/// Gradients with respect to several parameter groups from one sweep.
pub fn backward_many<'g>(
    loss: Var<'g>,
    groups: &[&ParamVars<'g>],
    create_graph: bool,
) -> Result<Vec<ParamVars<'g>>> {
    let all: Vec<Var<'g>> = groups.iter().flat_map(|g| g.vars.iter().copied()).collect();
    let grads = loss.graph().gradients(loss, &all, create_graph)?;
    let mut out = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for g in groups {
        let n = g.vars.len();
        out.push(g.with_vars(grads[offset..offset + n].to_vec()));
        offset += n;
    }
    Ok(out)
}

/// `p' = p - lr * g` recorded on the graph.
///
/// With `second_order` the step stays differentiable through `g`, so a loss
/// evaluated at `p'` backpropagates into the original `p` including the
/// curvature term. Otherwise `g` is detached first.
pub fn sgd_step_differentiable<'g>(
    params: &ParamVars<'g>,
    grads: &ParamVars<'g>,
    lr: f64,
    second_order: bool,
) -> Result<ParamVars<'g>> {
    if params.names != grads.names {
        return Err(Error::KeyMismatch(format!(
            "params {:?} vs grads {:?}",
            params.names, grads.names
        )));
    }
    let vars = params
        .vars
        .iter()
        .zip(&grads.vars)
        .map(|(p, g)| {
            let g = if second_order { *g } else { g.detach() };
            p.sub(&g.scale(lr))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(params.with_vars(vars))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(2, 2, vec![1.0, -2.5, 1e-300, 3.0]).unwrap())
            .unwrap();
        p.insert("b", Tensor::row(&[0.1, f64::MIN_POSITIVE])).unwrap();
        p
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = sample();
        assert!(p.insert("w", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = sample();
        p.save(dir.path().join("model")).unwrap();
        let q = ParamSet::load(dir.path().join("model")).unwrap();
        assert_eq!(p, q);
        let json = fs::read_to_string(dir.path().join("model.json")).unwrap();
        assert!(json.contains(PARAMS_FORMAT_VERSION));
    }

    #[test]
    fn lr_zero_keeps_values_and_connection() {
        let g = Graph::new();
        let p = sample().to_vars(&g);
        let loss = p.get("w").unwrap().sum();
        let grads = backward(loss, &p, true).unwrap();
        let q = sgd_step_differentiable(&p, &grads, 0.0, true).unwrap();
        assert_eq!(q.values(), p.values());
        let dq = backward(q.get("w").unwrap().sum(), &p, false).unwrap();
        assert_eq!(dq.get("w").unwrap().value().data(), &[1.0; 4]);
    }

    #[test]
    fn scalar_step() {
        let g = Graph::new();
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(1.0)).unwrap();
        let p = ps.to_vars(&g);
        let mut gs = ParamSet::new();
        gs.insert("p", Tensor::scalar(2.0)).unwrap();
        let grads = gs.to_constants(&g);
        let q = sgd_step_differentiable(&p, &grads, 0.1, true).unwrap();
        assert!((q.get("p").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn key_mismatch_is_an_error() {
        let g = Graph::new();
        let p = sample().to_vars(&g);
        let mut other = ParamSet::new();
        other.insert("x", Tensor::zeros(1, 1)).unwrap();
        assert!(matches!(
            sgd_step_differentiable(&p, &other.to_constants(&g), 0.1, true),
            Err(Error::KeyMismatch(_))
        ));
    }
}
