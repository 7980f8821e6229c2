//! Location-based rate selection for ultra-reliable wireless links.
//!
//! The crate covers the whole chain from channel statistics to calibrated
//! rate selection:
//!
//! * [`channel`] and [`samples`]: frequency response, instantaneous capacity
//!   and empirical outage statistics.
//! * [`rayleigh1d`]: the closed-form one-dimensional Rayleigh scenario.
//! * [`env2d`]: a synthetic spatially consistent multipath environment and
//!   epsilon-outage capacity maps.
//! * [`locfim`]: Fisher-information localization bounds (PEB maps).
//! * [`rateselect`]: Backoff, Interval and Distance rate selection,
//!   meta-probability, throughput ratio and calibration.
//! * [`analysis`]: coherence radius, extrema detection and summary statistics.
//! * [`io`]: environment container and CSV/JSON artifacts.

pub mod analysis;
pub mod channel;
pub mod env2d;
pub mod error;
pub mod io;
pub mod locfim;
pub mod normal;
pub mod profile;
pub mod quadrature;
pub mod rateselect;
pub mod rayleigh1d;
pub mod rng;
pub mod samples;

pub use error::{Error, Result};
