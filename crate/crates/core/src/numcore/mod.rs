//! Minimal reverse-mode automatic differentiation with the operator set the
//! denoiser needs, plus AdamW and finite-difference gradient checking.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, FD_STEP};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, AdamW};
pub use params::{Param, ParamStore, PARAMS_MAGIC};
pub use rng::Rng;
pub use tensor::Tensor;
