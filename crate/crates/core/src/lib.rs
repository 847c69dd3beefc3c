//! All-in-one image restoration with gated channel attention and
//! prior-guided per-pixel expert routing, on a small CPU autodiff engine.

pub mod adec;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fft;
pub mod gradcheck;
mod kernels;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod mst;
pub mod net;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod priors;
pub mod restormer;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Unary, Var};
pub use error::{Error, Result};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
