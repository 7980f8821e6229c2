//! Built-in parameter profiles.
//!
//! Both profiles share the physical scenario: a 100 m x 100 m cell with one
//! BS at each corner, 20 MHz bandwidth at 3.6 GHz and a 60 dB transmit SNR.
//! `Desk` shrinks the subcarrier count, grid and sample counts so the full
//! pipeline runs in minutes on one core; `Paper` uses the full-size values.

use crate::channel::SystemConfig;
use crate::env2d::{BaseStation, CellRect, EnvConfig};
use crate::error::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

/// Reference constant localization variance (m^2), giving a PEB of 5 m.
pub const REFERENCE_LOC_VARIANCE: f64 = 12.5;
/// Interval-parameter envelope used to size the padding.
pub const PADDING_Q_ENVELOPE: f64 = 3.0;

/// Default padding: `max(3 PEB, 3 q sigma)` for the reference covariance
/// `sigma^2 I`, with `sigma` the per-axis standard deviation.
pub fn default_margin() -> f64 {
    let sigma = REFERENCE_LOC_VARIANCE.sqrt();
    let peb = REFERENCE_LOC_VARIANCE.sqrt();
    (3.0 * peb).max(3.0 * PADDING_Q_ENVELOPE * sigma)
}

impl Profile {
    pub fn subcarrier_count(self) -> usize {
        match self {
            Profile::Desk => 61,
            Profile::Paper => 601,
        }
    }

    pub fn grid_spacing(self) -> f64 {
        match self {
            Profile::Desk => 100.0 / 24.0,
            Profile::Paper => 1.42,
        }
    }

    pub fn capacity_samples(self) -> usize {
        match self {
            Profile::Desk => 10_000,
            Profile::Paper => 100_000,
        }
    }

    /// Location draws per point for Monte-Carlo meta-probability.
    pub fn location_draws(self) -> usize {
        match self {
            Profile::Desk => 200_000,
            Profile::Paper => 200_000,
        }
    }

    pub fn fim_draws(self) -> usize {
        200
    }

    pub fn system(self) -> Result<SystemConfig> {
        SystemConfig::new(20e6, self.subcarrier_count(), 1e6, 3.6e9, 1e-3, 0.05)
    }

    pub fn environment(self, seed: u64) -> EnvConfig {
        let bs = |x: f64, y: f64| BaseStation {
            x,
            y,
            height: 10.0,
            path_loss_exponent: 2.1,
            path_gain_db: -43.5,
        };
        EnvConfig {
            cell: CellRect {
                x_lo: -50.0,
                x_hi: 50.0,
                y_lo: -50.0,
                y_hi: 50.0,
            },
            spacing: self.grid_spacing(),
            margin: default_margin(),
            base_stations: vec![
                bs(-50.0, 50.0),
                bs(50.0, 50.0),
                bs(-50.0, -50.0),
                bs(50.0, -50.0),
            ],
            ue_height: 1.5,
            path_count: 10,
            shadowing_std_db: 4.0,
            shadowing_decorrelation_m: 10.0,
            mean_excess_delay_s: 50e-9,
            delay_decorrelation_m2: 100.0,
            pdp_decay_s: 30e-9,
            scatter_gain: 1.0,
            carrier_frequency_hz: 3.6e9,
            seed,
        }
    }
}
