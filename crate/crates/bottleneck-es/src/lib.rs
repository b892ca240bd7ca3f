//! Macroscopic traffic simulation with extremum-seeking control of a
//! downstream bottleneck.
//!
//! The library couples a first-order finite-volume solver for the
//! Lighthill-Whitham-Richards conservation law on a clear road segment to a
//! delay-compensated gradient extremum-seeking controller that steers the
//! inlet density toward the flow-maximizing operating point of a static
//! quadratic bottleneck map at the outlet.
//!
//! Module map:
//! - [`fundamental`]: flow-density laws, the bottleneck map, reference points
//! - [`lwr`]: Godunov solver, boundary handling, linearized delay-line plant
//! - [`escontrol`]: dither signals, demodulation, predictor-based controller
//! - [`sim`]: configuration, closed-loop/open-loop runners, averaged oracle
//! - [`metrics`]: convergence statistics, rate fits, parameter scaling study
//! - [`cli`]: config file parsing, CSV/report serialization, subcommands

pub mod cli;
pub mod error;
pub mod escontrol;
pub mod fundamental;
pub mod history;
pub mod lwr;
pub mod metrics;
pub mod sim;

pub use error::{Error, Result};
