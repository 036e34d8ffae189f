//! Probabilistic multi-height space-time wind forecasting.
//!
//! The model is a multivariate integro-difference equation written in
//! state-space form: the latent wind field over `n` sites and `P` heights
//! evolves through an advection-driven redistribution kernel, observations
//! are noisy selections of the latent state, and inference runs through a
//! Kalman filter with an exact innovation-form log-likelihood. The
//! per-height advection vectors that parameterize the kernel are predicted
//! from exogenous weather-map rasters by a compact convolution + attention
//! network trained jointly with the statistical parameters by maximum
//! likelihood.
//!
//! Crate layout mirrors the pipeline:
//! - [`domain`]: index spaces, panels, beliefs, observation maps
//! - [`preprocess`]: Box-Cox transform, diurnal detrending, asymmetry diagnostics
//! - [`kernel`]: redistribution kernel, state propagator, noise covariances
//! - [`extractor`]: weather-map encoder and advection head, with exact gradients
//! - [`ssm`]: Kalman recursions, log-likelihood, h-step forecast distributions
//! - [`train`]: joint offline fit and online statistical-parameter updates
//! - [`simulate`]: synthetic-truth generator used as the testing oracle
//! - [`evaluate`]: rolling-origin protocol, benchmarks, metrics, power curve

pub mod domain;
pub mod error;
pub mod evaluate;
pub mod extractor;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod plot;
pub mod preprocess;
pub mod simulate;
pub mod ssm;
pub mod stats;
pub mod train;

pub use error::{MideError, Result};
