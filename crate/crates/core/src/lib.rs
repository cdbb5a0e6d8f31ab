//! Federated learning simulator for under-sampled MR image reconstruction.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine,
//! the Cartesian k-space acquisition model, synthetic multi-site phantom
//! datasets with controlled domain shift, a residual U-Net and a latent
//! domain identifier, federated averaging over an audited in-process channel,
//! adversarial cross-site latent alignment, and SSIM/PSNR evaluation.

pub mod autodiff;
pub mod codec;
pub mod crosssite;
pub mod error;
pub mod fl;
pub mod kspace;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod seed;
pub mod sites;

pub use autodiff::{adam_step, AdamState, ParamSet, Tape, Tensor, Var};
pub use error::{Error, Result};
