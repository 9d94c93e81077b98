//! Generalized linear mixed model for fingerprint individuality under
//! varying image quality.
//!
//! Impostor match counts are modelled as sums of four Poisson components
//! (genuine/spurious minutia on either print) whose rates depend on the
//! image qualities, with a Gaussian random effect per finger. The crate
//! fits the model through a Laplace-approximated likelihood and EM, draws
//! posterior samples by importance resampling and reports the probability
//! of a random correspondence (PRC) with credible intervals.
//!
//! Module map:
//!
//! - [`model`]: parameter types and per-pair linear predictors.
//! - [`likelihood`]: exact, Laplace and quadrature likelihoods.
//! - [`em`]: EM fitting with a Newton M-step.
//! - [`bayes`]: Gaussian proposal and importance resampling.
//! - [`prc`]: PRC estimation, credible intervals and design-w search.
//! - [`matcher`]: minutia geometry and alignment-based match counting.
//! - [`data`]: datasets, CSV ingestion and summary tables.
//! - [`simgen`]: synthetic data and coverage validation.

pub mod bayes;
pub mod data;
pub mod em;
mod error;
pub mod likelihood;
pub mod matcher;
pub mod model;
pub mod numfmt;
mod par;
pub mod prc;
pub mod rng;
pub mod simgen;

pub use error::{Error, Result};
pub use model::{FixedEffects, PairCovariates, QualityScheme, Tau};
