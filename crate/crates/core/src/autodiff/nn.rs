//! Fully connected networks on top of the graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamSet, ParamVars};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Identity,
}

/// GELU with the exact erf form. Rejects non-finite inputs.
pub fn gelu<'g>(x: &Var<'g>) -> Result<Var<'g>> {
    if let Some(index) = x.value().first_non_finite() {
        return Err(Error::NonFinite {
            context: "gelu input",
            index,
        });
    }
    Ok(x.gelu())
}

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Glorot-uniform weights and zero biases for `dims = [in, h1, ..., out]`.
pub fn init_mlp<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<ParamSet> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "an MLP needs at least input and output dims, got {dims:?}"
        )));
    }
    let mut params = ParamSet::new();
    for (l, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        params.insert(weight_name(l), Tensor::from_vec(fan_in, fan_out, data)?)?;
        params.insert(bias_name(l), Tensor::zeros(1, fan_out))?;
    }
    Ok(params)
}

/// Affine layers with `activation` between them and none after the last.
pub fn mlp_forward<'g>(
    params: &ParamVars<'g>,
    x: Var<'g>,
    layer_dims: &[usize],
    activation: Activation,
) -> Result<Var<'g>> {
    mlp_forward_prefixed(params, "", x, layer_dims, activation)
}

/// [`mlp_forward`] reading `{prefix}layer{l}.weight` and `{prefix}layer{l}.bias`.
pub fn mlp_forward_prefixed<'g>(
    params: &ParamVars<'g>,
    prefix: &str,
    x: Var<'g>,
    layer_dims: &[usize],
    activation: Activation,
) -> Result<Var<'g>> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidArgument(format!("layer dims {layer_dims:?}")));
    }
    let (_, width) = x.shape();
    if width != layer_dims[0] {
        return Err(Error::shape(
            "mlp_forward input",
            format!("width {}", layer_dims[0]),
            format!("width {width}"),
        ));
    }
    let layers = layer_dims.len() - 1;
    let mut h = x;
    for l in 0..layers {
        let (wn, bn) = (format!("{prefix}{}", weight_name(l)), format!("{prefix}{}", bias_name(l)));
        let w = params.get(&wn).ok_or_else(|| Error::KeyMismatch(format!("missing {wn}")))?;
        let b = params.get(&bn).ok_or_else(|| Error::KeyMismatch(format!("missing {bn}")))?;
        let expected = (layer_dims[l], layer_dims[l + 1]);
        if w.shape() != expected || b.shape() != (1, expected.1) {
            return Err(Error::shape(
                "mlp_forward layer",
                format!("{}x{} weight", expected.0, expected.1),
                format!("{:?} weight / {:?} bias at layer {l}", w.shape(), b.shape()),
            ));
        }
        h = h.matmul(&w)?.add_row(&b)?;
        if l + 1 < layers {
            h = match activation {
                Activation::Gelu => gelu(&h)?,
                Activation::Identity => h,
            };
        }
    }
    Ok(h)
}

/// Convenience: forward pass on plain tensors with no gradient tracking.
pub fn mlp_eval(
    params: &ParamSet,
    x: &Tensor,
    layer_dims: &[usize],
    activation: Activation,
) -> Result<Tensor> {
    let g = Graph::new();
    let pv = params.to_constants(&g);
    let out = mlp_forward(&pv, g.constant(x.clone()), layer_dims, activation)?;
    Ok((*out.value()).clone())
}
