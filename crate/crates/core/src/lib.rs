//! Multiplexed ghost imaging with four-mode entangled light.
//!
//! The crate is organised bottom-up:
//!
//! * [`wick`] enumerates Wick pairings and evaluates Gaussian vacuum moments of
//!   bosonic operator strings from a table of pair moments.
//! * [`optics`] builds the four-mode Bogoliubov converter matrix and the exit-field
//!   second moments of the discrete pixel model.
//! * [`correlation`] turns those moments into ghost-image means, the measurement
//!   operator and the signal-dependent noise covariance of the correlator outputs.
//! * [`reduction`] implements the minimum-MSE reduction estimator and its
//!   iterative, box-constrained refinement.
//! * [`metrics`] scores reconstructions (SNR, MSE) and evaluates the summation
//!   SNR ratio of correlated images.

pub mod correlation;
pub mod error;
pub mod metrics;
pub mod optics;
pub mod reduction;
pub mod wick;

pub use error::{Error, Result};
