//! Energy-efficiency maximization for a wireless-powered device-to-device (D2D)
//! pair that underlays a multi-antenna NOMA downlink.
//!
//! The D2D transmitter harvests energy from the base-station broadcast for a
//! fraction `tau` of every slot and spends it talking to its receiver for the
//! rest of the slot. The base station picks one beamforming vector per
//! downlink user. The crate maximizes the D2D pair's bits-per-joule subject to
//! per-user SIC rate constraints and the base-station power budget.
//!
//! Module map:
//!
//! - [`channel`]: topology, Rayleigh/path-loss channels, SIC ordering, CSI errors
//! - [`physics`]: rates, harvested power, energy, feasibility
//! - [`tau`]: time-switching subproblem (Dinkelbach)
//! - [`beam`]: beamforming subproblem (quadratic transform)
//! - [`solver`]: log-barrier interior-point solver for the beam subproblem
//! - [`algorithms`]: alternating optimizer, exhaustive tau search, OMA baseline
//! - [`experiments`]: Monte Carlo sweeps, CSV and gnuplot output
//! - [`rl`]: line-delimited JSON environment for external RL agents

pub mod algorithms;
pub mod beam;
pub mod channel;
pub mod error;
pub mod experiments;
pub mod physics;
pub mod rl;
pub mod solver;
pub mod tau;

pub use error::{Error, Result};
pub use physics::{BeamformingSet, RatesReport, Scheme, SystemParams, TimeSwitch};

/// Complex baseband sample type used throughout.
pub type Complex = num_complex::Complex64;
/// Complex column vector (one entry per base-station antenna).
pub type CVector = nalgebra::DVector<Complex>;
