//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! with the operator basis the reconstruction and identifier networks use
//! and an Adam optimizer.

mod adam;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use params::{BoundParams, ParamSet};
pub use tape::{Gradients, Tape, Var, PROB_EPS};
pub use tensor::Tensor;
