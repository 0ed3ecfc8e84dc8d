//! Attitude and position estimation from one IMU and two RTK GPS antennas.
//!
//! The crate is organised bottom-up:
//!
//! - [`quat`]: quaternion and 3x3 algebra with the attitude conventions used throughout
//!   (vector part first, `A(q1 ⊗ q2) = A(q2) A(q1)`).
//! - [`models`]: continuous-time measurement and process models and their Jacobians.
//! - [`discretize`]: closed-form transition matrix and process-noise covariance, plus a
//!   quadrature reference for the latter.
//! - [`observability`]: rank analysis of the piecewise-constant linearised system.
//! - [`ekf`]: the adaptive error-state filter and its initialisation.
//! - [`sim`]: ground-truth trajectories and sensor synthesis.
//! - [`io`] and [`pipeline`]: CSV logs, configuration and the end-to-end fusion runs used by
//!   the command-line tool.
//!
//! All quantities are SI (m, s, rad). The inertial frame is z-up and gravity is subtracted from
//! the rotated specific force, so an accelerometer at rest reads `Aᵀ g`.

pub mod discretize;
pub mod ekf;
pub mod error;
pub mod io;
pub mod models;
pub mod observability;
pub mod pipeline;
pub mod quat;
pub mod sim;

pub use error::{Error, Result};
pub use models::{GpsFix, ImuSample, NoiseSpec, SensorGeometry, StateEstimate};
pub use quat::{Mat3, Quaternion, Vec3};
