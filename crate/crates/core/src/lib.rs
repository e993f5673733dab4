//! End-to-end simulator and library for vehicle tracking over an FR1
//! sidelink: synthetic multipath OFDM observations from scene geometry,
//! per-path channel parameter estimation by tensor decomposition,
//! Fisher-information-derived measurement covariances, and a gated
//! Kalman tracking filter, plus a seeded Monte Carlo campaign harness.
//!
//! Module map:
//! - [`scene`]: intersection geometry, constant-velocity motion, image-method
//!   multipath generation.
//! - [`waveform`]: steering vectors, observation-tensor synthesis, RTT timing.
//! - [`chest`]: spatial-augmentation CPD channel estimator.
//! - [`crlb`]: Fisher information, error covariance lower bounds, and the
//!   estimated bounds used as measurement covariance.
//! - [`tracker`]: Kalman filter, range-angle gating, LoS identification,
//!   benchmark estimators.
//! - [`harness`]: configuration, campaign runner, metrics, file emission.

pub mod chest;
pub mod crlb;
pub mod harness;
pub mod scene;
pub mod tracker;
pub mod waveform;

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
