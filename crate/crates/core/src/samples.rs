//! Empirical outage statistics over sorted capacity samples.

use crate::error::{invalid, Error, Result};

/// Ascending-sorted capacity samples in bits per OFDM symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacitySamples {
    values: Vec<f64>,
}

impl CapacitySamples {
    /// Sorts the input. Rejects negative or non-finite values.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("capacity samples must be finite and nonnegative"));
        }
        values.sort_unstable_by(f64::total_cmp);
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Fraction of samples with C <= rate.
pub fn empirical_outage_probability(samples: &CapacitySamples, rate: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("empty capacity samples"));
    }
    let below = samples.values.partition_point(|&c| c <= rate);
    Ok(below as f64 / samples.len() as f64)
}

/// The conservative order statistic C_(floor(eps M)), 1-based.
pub fn empirical_outage_capacity(samples: &CapacitySamples, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid(format!("eps must lie in (0,1), got {eps}")));
    }
    let eps_m = eps * samples.len() as f64;
    if eps_m < 1.0 {
        return Err(Error::InsufficientSamples { eps_m });
    }
    let rank = eps_m.floor() as usize;
    Ok(samples.values[rank - 1])
}

/// Lower order statistic at level `p` of an ascending slice: element
/// `max(1, floor(p n))` (1-based). Shared by the box-plot summaries.
pub fn lower_order_statistic(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&p) {
        return None;
    }
    let rank = ((p * sorted.len() as f64).floor() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}
