//! Reverse-mode automatic differentiation over a dynamically built graph,
//! with second-order support for unrolled gradient steps.

mod graph;
pub mod nn;
mod params;
pub mod special;
mod tensor;

pub use graph::{Graph, NodeId, Var};
pub use nn::{gelu, init_mlp, mlp_eval, mlp_forward, mlp_forward_prefixed, Activation};
pub use params::{
    backward, backward_many, sgd_step_differentiable, ParamSet, ParamVars, PARAMS_FORMAT_VERSION,
};
pub use tensor::Tensor;
