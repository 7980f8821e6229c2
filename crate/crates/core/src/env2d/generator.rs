use super::field::{GaussianField, Kernel};
use super::grid::GridGeometry;
use crate::channel::{PathSet, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::rng::Purpose;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRect {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseStation {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub path_loss_exponent: f64,
    pub path_gain_db: f64,
}

impl BaseStation {
    pub fn path_gain(&self) -> f64 {
        10f64.powf(self.path_gain_db / 10.0)
    }

    /// 3-D distance to a UE at `(x, y)` with height `ue_height`.
    pub fn distance(&self, x: f64, y: f64, ue_height: f64) -> f64 {
        ((x - self.x).powi(2) + (y - self.y).powi(2) + (self.height - ue_height).powi(2)).sqrt()
    }
}

/// Parameters of the synthetic environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub cell: CellRect,
    pub spacing: f64,
    pub margin: f64,
    pub base_stations: Vec<BaseStation>,
    pub ue_height: f64,
    pub path_count: usize,
    pub shadowing_std_db: f64,
    pub shadowing_decorrelation_m: f64,
    pub mean_excess_delay_s: f64,
    /// Scale of the squared-exponential delay kernel exp(-r^2 / d), in m^2.
    pub delay_decorrelation_m2: f64,
    pub pdp_decay_s: f64,
    /// Overall scattered-to-LoS power factor applied to every NLoS path.
    pub scatter_gain: f64,
    pub carrier_frequency_hz: f64,
    pub seed: u64,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let c = &self.cell;
        if !(c.x_hi > c.x_lo && c.y_hi > c.y_lo) {
            return bad("cell must have positive extent");
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad("grid spacing must be positive");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be nonnegative");
        }
        if self.base_stations.is_empty() {
            return bad("at least one base station is required");
        }
        if self.path_count == 0 {
            return bad("path count must be at least 1");
        }
        for b in &self.base_stations {
            if !(b.path_loss_exponent > 0.0 && b.height >= 0.0 && b.path_gain_db.is_finite()) {
                return bad(
                    "base station needs positive exponent, nonnegative height and finite gain",
                );
            }
        }
        if !(self.ue_height >= 0.0) {
            return bad("UE height must be nonnegative");
        }
        if !(self.shadowing_std_db >= 0.0 && self.shadowing_decorrelation_m > 0.0) {
            return bad("shadowing needs nonnegative std and positive decorrelation distance");
        }
        if !(self.mean_excess_delay_s > 0.0
            && self.delay_decorrelation_m2 > 0.0
            && self.pdp_decay_s > 0.0)
        {
            return bad("delay parameters must be positive");
        }
        if !(self.scatter_gain >= 0.0 && self.carrier_frequency_hz > 0.0) {
            return bad("scatter gain must be nonnegative and carrier frequency positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridGeometry> {
        let c = &self.cell;
        GridGeometry::for_cell(c.x_lo, c.x_hi, c.y_lo, c.y_hi, self.spacing, self.margin)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash_hex(&self) -> String {
        let bytes = serde_json::to_vec(self).unwrap_or_default();
        hex_digest(&bytes)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-point, per-BS multipath description over the padded grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentMap {
    pub config: EnvConfig,
    pub grid: GridGeometry,
    /// `paths[bs][point]`
    pub paths: Vec<Vec<PathSet>>,
    pub config_hash: String,
    /// Largest diagonal regularization used by the field samplers.
    pub field_nugget: f64,
    pub field_exact: bool,
}

impl EnvironmentMap {
    pub fn bs_count(&self) -> usize {
        self.paths.len()
    }

    pub fn path_set(&self, bs: usize, point: usize) -> &PathSet {
        &self.paths[bs][point]
    }
}

/// Builds the environment deterministically from `cfg.seed`.
///
/// Per BS, the log-domain shadowing is a Gaussian field with covariance
/// `sigma^2 exp(-r / d_c)`. Excess delays are `R1^2 + R2^2` with `R1`, `R2`
/// independent Gaussian fields of covariance `(tau_bar / 2) exp(-r^2 / d_tau)`,
/// so each excess delay is exponential with mean `tau_bar`. Path powers decay
/// as `exp(-(tau_k - tau_1) / rho)` relative to the LoS power.
pub fn generate_environment(cfg: &EnvConfig) -> Result<EnvironmentMap> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let n = grid.len();
    let k = cfg.path_count;
    let seed = cfg.seed;
    let shadow = GaussianField::new(
        &grid,
        Kernel::Exponential {
            variance: cfg.shadowing_std_db.powi(2),
            length: cfg.shadowing_decorrelation_m,
        },
    )?;
    let delay_field = if k > 1 {
        Some(GaussianField::new(
            &grid,
            Kernel::SquaredExponential {
                variance: 1.0,
                scale: cfg.delay_decorrelation_m2,
            },
        )?)
    } else {
        None
    };
    let delay_sd = (0.5 * cfg.mean_excess_delay_s).sqrt();
    let pts = grid.points();
    let mut paths = Vec::with_capacity(cfg.base_stations.len());
    for (b, bs) in cfg.base_stations.iter().enumerate() {
        let psi_db = shadow.sample(seed, Purpose::Shadowing, b as u64);
        let mut excess: Vec<Vec<f64>> = Vec::with_capacity(k.saturating_sub(1));
        if let Some(f) = &delay_field {
            for kk in 1..k {
                let base = (b * 2 * k + 2 * kk) as u64;
                let r1 = f.sample(seed, Purpose::DelayField, base);
                let r2 = f.sample(seed, Purpose::DelayField, base + 1);
                excess.push(
                    r1.iter()
                        .zip(&r2)
                        .map(|(a, c)| delay_sd * delay_sd * (a * a + c * c))
                        .collect(),
                );
            }
        }
        let g0 = bs.path_gain();
        let eta = bs.path_loss_exponent;
        let bs_paths: Result<Vec<PathSet>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (x, y) = pts[i];
                let d = bs.distance(x, y, cfg.ue_height);
                if d <= 0.0 {
                    return Err(Error::Config(format!(
                        "grid point ({x}, {y}) coincides with a base station"
                    )));
                }
                let psi = 10f64.powf(psi_db[i] / 10.0);
                let p_los = g0 * d.powf(-eta) * psi;
                let tau1 = d / SPEED_OF_LIGHT;
                let mut delays = Vec::with_capacity(k);
                let mut amps = Vec::with_capacity(k);
                delays.push(tau1);
                amps.push(p_los.sqrt());
                let mut tau = tau1;
                for ex in &excess {
                    tau += ex[i];
                    delays.push(tau);
                    let p = p_los * cfg.scatter_gain * (-(tau - tau1) / cfg.pdp_decay_s).exp();
                    amps.push(p.sqrt());
                }
                let amplitudes = amps
                    .iter()
                    .zip(&delays)
                    .map(|(m, t)| {
                        Complex64::from_polar(*m, -2.0 * PI * cfg.carrier_frequency_hz * t)
                    })
                    .collect();
                PathSet::new(amplitudes, delays)
            })
            .collect();
        paths.push(bs_paths?);
    }
    let nugget = shadow
        .nugget()
        .max(delay_field.as_ref().map_or(0.0, |f| f.nugget()));
    let exact = shadow.is_exact() && delay_field.as_ref().is_none_or(|f| f.is_exact());
    Ok(EnvironmentMap {
        config_hash: cfg.hash_hex(),
        config: cfg.clone(),
        grid,
        paths,
        field_nugget: nugget,
        field_exact: exact,
    })
}
