//! Low-rank estimation of conformational covariance from noisy tomographic
//! projection images.
//!
//! The crate estimates the leading principal components of the covariance of
//! a family of 3-D volumes directly from 2-D Fourier-domain projections, by
//! stochastic optimization of a low-rank least-squares or maximum-likelihood
//! objective. Per-image rotation, offset and contrast can be refined jointly.
//!
//! Module map:
//! - [`grid`]: centered unitary FFTs, oversampling, frequency shells, FSC.
//! - [`projection`]: the per-image slice operator, its adjoint and derivatives.
//! - [`simulator`]: synthetic phantoms and particle stacks.
//! - [`objectives`]: low-rank objectives, gradients, latents and contrast.
//! - [`regularization`]: frequency-shell covariance and mean priors.
//! - [`optimizer`]: Adam, the fitting driver, pose refinement, orthogonalization.
//! - [`io`], [`metrics`], [`config`]: file formats, evaluation metrics, run configuration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod ctf;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod optimizer;
pub mod projection;
pub mod regularization;
pub mod rotation;
pub mod simulator;

pub use ctf::CtfParams;
pub use error::{Error, Result};
pub use grid::{FourierImage, FourierVolume, RealVolume, ShellIndex};
pub use objectives::{Batch, LowRankModel, ObjectiveKind};
pub use projection::{InterpolationKind, InterpolationScheme, Pose, Projector};
pub use regularization::ShellRegularizer;
pub use simulator::{GroundTruth, ParticleStack};

/// Worker threads requested through `LRH_THREADS`, if set.
pub fn configured_threads() -> Option<usize> {
    std::env::var("LRH_THREADS").ok()?.trim().parse().ok().filter(|&t: &usize| t > 0)
}

/// Initialize the global worker pool honoring `LRH_THREADS`. Safe to call
/// more than once; only the first call has an effect.
pub fn init_thread_pool() {
    if let Some(t) = configured_threads() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
}
