//! Device-centric monostatic sensing over an opportunistic virtual aperture.
//!
//! A handheld radio transmits its uplink OFDM waveform, listens to the echoes
//! from nearby body scatterers, and uses the natural motion of the hand as a
//! synthetic aperture. The crate covers the whole chain:
//!
//! - [`waveform`]: received-subcarrier synthesis, equalization and range compression.
//! - [`trajectory`]: phase-centre paths, IMU double-integration drift and its
//!   correlated Gaussian prior.
//! - [`bounds`]: known-aperture CRB and Bayesian CRB under the trajectory prior.
//! - [`imaging`]: near-field backprojection, calibration-point extraction and
//!   point-target localization.
//! - [`autofocus`]: EKF tracking of trajectory error from differential carrier phases.
//! - [`exposure`]: distance-aware EIRP control under a power-density limit.
//! - [`experiments`]: seeded Monte Carlo drivers with CSV/PGM outputs.

// `!(x > y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autofocus;
pub mod bounds;
pub mod config;
pub mod experiments;
pub mod exposure;
pub mod imaging;
pub mod linalg;
pub mod output;
pub mod trajectory;
pub mod waveform;

pub use num_complex::Complex64;

/// Position or displacement in metres.
pub type Vec3 = nalgebra::Vector3<f64>;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "scatterer {scatterer} coincides with antenna {antenna} at slow-time index {slow_time}"
    )]
    CoincidentPositions {
        scatterer: usize,
        antenna: usize,
        slow_time: usize,
    },

    #[error("transmitted symbol on subcarrier {subcarrier} has zero magnitude")]
    ZeroSymbol { subcarrier: usize },

    #[error("aperture yields {samples} slow-time samples; at least 2 are required")]
    DegenerateAperture { samples: usize },

    #[error("matrix is not positive semidefinite ({0})")]
    NotPositiveSemidefinite(&'static str),

    #[error("singular information block `{block}`: geometry is unobservable")]
    SingularBlock { block: &'static str },

    #[error("image is identically zero")]
    EmptyImage,

    #[error("found {found} calibration points, {requested} requested")]
    CalibrationFailed { found: usize, requested: usize },
    #[error("no scatterer estimate within the search radius (nearest {distance} m)")]
    TargetNotFound { distance: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{failed} of {total} trials failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
