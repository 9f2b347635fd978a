//! Bayesian inference engine for mixed ordinal and continuous multivariate
//! spatial response data.
//!
//! The model ties `J` per-site responses to a single latent Gaussian field:
//! each response has a latent continuous representation `Z_j` (observed
//! directly for continuous metrics, thresholded into ordered categories for
//! ordinal ones), and every `Z_j` loads linearly on a latent spatial process
//! `H` with an exponential covariance and covariates in its mean. Fitting is
//! by MCMC; post-processing covers kriging prediction at new sites, posterior
//! site ranks, per-metric correlation weights, model-evaluation losses, and
//! convergence diagnostics. A simulation module generates synthetic datasets
//! with known truth for end-to-end checks.
//!
//! Chains run in parallel through `rayon` when the default `parallel`
//! feature is enabled; disabling it yields a dependency-free sequential
//! build with identical output.

pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod posterior;
pub mod sampler;
pub mod simulation;
pub mod stochastics;
pub mod summary;

pub use error::{Error, Result};
