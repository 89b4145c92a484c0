//! System identification with a fixed sparse basis library (SINDy) and a
//! meta-learned neural basis library with state-dependent feature selection
//! (LeARN), evaluated on simulated quadrotor flights under wind.

pub mod autodiff;
pub mod dataio;
mod error;
pub mod eval;
pub mod exec;
pub mod learn;
pub mod meta;
pub mod sim;
pub mod sindy;

pub use error::{Error, Result};
