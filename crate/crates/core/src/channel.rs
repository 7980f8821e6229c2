//! OFDM link description and per-realization capacity.

use crate::error::{invalid, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Link-level parameters shared by the communication and localization paths.
///
/// Only the bandwidth and subcarrier count are stored; the spacing is always
/// derived as `W / N`, so `spacing * N == W` holds for the stored pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub bandwidth_hz: f64,
    pub subcarrier_count: usize,
    /// P_tx / (W N0), linear.
    pub tx_snr: f64,
    pub carrier_frequency_hz: f64,
    pub reliability_target: f64,
    pub confidence: f64,
}

impl SystemConfig {
    pub fn new(
        bandwidth_hz: f64,
        subcarrier_count: usize,
        tx_snr: f64,
        carrier_frequency_hz: f64,
        reliability_target: f64,
        confidence: f64,
    ) -> Result<Self> {
        let cfg = Self {
            bandwidth_hz,
            subcarrier_count,
            tx_snr,
            carrier_frequency_hz,
            reliability_target,
            confidence,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(invalid("bandwidth must be positive"));
        }
        if self.subcarrier_count == 0 {
            return Err(invalid("subcarrier count must be at least 1"));
        }
        if !(self.tx_snr > 0.0 && self.tx_snr.is_finite()) {
            return Err(invalid("transmit SNR must be positive"));
        }
        if !(self.carrier_frequency_hz > 0.0) {
            return Err(invalid("carrier frequency must be positive"));
        }
        if !(self.reliability_target > 0.0 && self.reliability_target < 1.0) {
            return Err(invalid("reliability target must lie in (0,1)"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(invalid("confidence must lie in (0,1)"));
        }
        Ok(())
    }

    pub fn subcarrier_spacing_hz(&self) -> f64 {
        self.bandwidth_hz / self.subcarrier_count as f64
    }
}

/// Subcarrier numbering. The communication model counts `0..N`; the
/// localization bound uses the symmetric `-p..=p` layout with `N = 2p + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubcarrierIndexing {
    ZeroBased,
    Symmetric,
}

impl SubcarrierIndexing {
    pub fn indices(self, n: usize) -> Result<Vec<f64>> {
        match self {
            SubcarrierIndexing::ZeroBased => Ok((0..n).map(|j| j as f64).collect()),
            SubcarrierIndexing::Symmetric => {
                if n % 2 == 0 {
                    return Err(invalid(format!(
                        "symmetric indexing needs an odd subcarrier count, got {n}"
                    )));
                }
                let p = (n / 2) as i64;
                Ok((-p..=p).map(|j| j as f64).collect())
            }
        }
    }
}

/// Multipath components of one link; index 0 is the line-of-sight path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    amplitudes: Vec<Complex64>,
    delays: Vec<f64>,
}

impl PathSet {
    pub fn new(amplitudes: Vec<Complex64>, delays: Vec<f64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(invalid("path set needs at least one path"));
        }
        if amplitudes.len() != delays.len() {
            return Err(invalid(format!(
                "{} amplitudes but {} delays",
                amplitudes.len(),
                delays.len()
            )));
        }
        if delays.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(invalid("delays must be finite and nonnegative"));
        }
        if delays.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("delays must be sorted ascending"));
        }
        Ok(Self { amplitudes, delays })
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn delays(&self) -> &[f64] {
        &self.delays
    }

    pub fn len(&self) -> usize {
        self.delays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays.is_empty()
    }

    /// Sum of |a_k|^2.
    pub fn total_power(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn truncated(&self, k: usize) -> PathSet {
        let k = k.clamp(1, self.len());
        PathSet {
            amplitudes: self.amplitudes[..k].to_vec(),
            delays: self.delays[..k].to_vec(),
        }
    }
}

/// h_j = sum_k a_k exp(-2 pi i df j tau_k) exp(i theta_k).
pub fn freq_response(
    paths: &PathSet,
    phases: &[f64],
    cfg: &SystemConfig,
    indexing: SubcarrierIndexing,
) -> Result<Vec<Complex64>> {
    if phases.len() != paths.len() {
        return Err(invalid(format!(
            "{} phases for {} paths",
            phases.len(),
            paths.len()
        )));
    }
    let df = cfg.subcarrier_spacing_hz();
    let idx = indexing.indices(cfg.subcarrier_count)?;
    let rotated: Vec<Complex64> = paths
        .amplitudes()
        .iter()
        .zip(phases)
        .map(|(a, &th)| a * Complex64::from_polar(1.0, th))
        .collect();
    Ok(idx
        .iter()
        .map(|&j| {
            rotated
                .iter()
                .zip(paths.delays())
                .map(|(a, &tau)| a * Complex64::from_polar(1.0, -2.0 * PI * df * j * tau))
                .sum()
        })
        .collect())
}

/// sum_j log2(1 + gamma0 |h_j|^2), in bits per OFDM symbol.
pub fn instantaneous_capacity(h: &[Complex64], tx_snr: f64) -> f64 {
    h.iter()
        .map(|hj| (tx_snr * hj.norm_sqr()).ln_1p())
        .sum::<f64>()
        / std::f64::consts::LN_2
}
