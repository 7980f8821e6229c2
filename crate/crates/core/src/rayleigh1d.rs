//! One-dimensional narrowband Rayleigh scenario.
//!
//! A UE sits at distance `x` from a single BS on a line. The only large-scale
//! effect is path loss, `avg_snr = gamma0 * G0 * x^-eta`, and small-scale
//! fading is Rayleigh, so the outage probability and the epsilon-outage
//! capacity have closed forms. Location estimates are Gaussian,
//! `x_hat ~ N(x, sigma_x^2)`, which gives closed-form meta-probabilities for
//! the Backoff and Interval schemes. Expectations over `x_hat` are truncated
//! to `x_hat > 0` without renormalization.

use crate::error::{invalid, Error, Result};
use crate::normal::{std_normal_cdf, std_normal_pdf, std_normal_quantile, std_normal_sf};
use crate::quadrature::{integrate, QuadOptions};
use crate::rng::{stream, Purpose};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;

/// Path-loss model and cell extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLossParams {
    /// G0, linear.
    pub gain: f64,
    pub exponent: f64,
    /// gamma0, linear.
    pub tx_snr: f64,
    pub cell_min: f64,
    pub cell_max: f64,
}

impl PathLossParams {
    pub fn new(
        gain: f64,
        exponent: f64,
        tx_snr: f64,
        cell_min: f64,
        cell_max: f64,
    ) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(invalid("path gain must be positive"));
        }
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(invalid("path-loss exponent must be positive"));
        }
        if !(tx_snr > 0.0 && tx_snr.is_finite()) {
            return Err(invalid("transmit SNR must be positive"));
        }
        if !(cell_min > 0.0 && cell_min < cell_max && cell_max.is_finite()) {
            return Err(invalid("cell must satisfy 0 < x_min < x_max"));
        }
        Ok(Self {
            gain,
            exponent,
            tx_snr,
            cell_min,
            cell_max,
        })
    }

    fn contains(&self, x: f64) -> bool {
        x >= self.cell_min && x <= self.cell_max
    }
}

/// Localization standard deviation as a function of distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocStd1D {
    Constant(f64),
    /// sigma_x = slope * x + offset
    Affine {
        slope: f64,
        offset: f64,
    },
}

impl LocStd1D {
    pub fn sigma(&self, x: f64) -> f64 {
        match *self {
            LocStd1D::Constant(s) => s,
            LocStd1D::Affine { slope, offset } => slope * x + offset,
        }
    }

    /// Checks `sigma > 0` on the whole cell (both ends suffice for affine maps).
    pub fn validate(&self, p: &PathLossParams) -> Result<()> {
        for x in [p.cell_min, p.cell_max] {
            let s = self.sigma(x);
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid(format!(
                    "localization std {s} at x={x} is not positive"
                )));
            }
        }
        Ok(())
    }

    /// argmin of x / sigma_x over the cell. For an affine map the ratio is
    /// monotone, so the minimizer is an endpoint.
    pub fn worst_location(&self, p: &PathLossParams) -> f64 {
        let r = |x: f64| x / self.sigma(x);
        if r(p.cell_max) < r(p.cell_min) {
            p.cell_max
        } else {
            p.cell_min
        }
    }
}

fn check_distance(x: f64) -> Result<()> {
    if !(x > 0.0) || x.is_nan() {
        return Err(Error::Domain(format!("distance must be positive, got {x}")));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid(format!("eps must lie in (0,1), got {eps}")));
    }
    Ok(())
}

/// gamma0 * G0 * x^-eta.
pub fn avg_snr(x: f64, p: &PathLossParams) -> Result<f64> {
    check_distance(x)?;
    Ok(p.tx_snr * p.gain * x.powf(-p.exponent))
}

/// P(C(x) <= R) = 1 - exp(-(2^R - 1) / avg_snr(x)).
pub fn outage_cdf_1d(rate: f64, x: f64, p: &PathLossParams) -> Result<f64> {
    if !(rate >= 0.0) {
        return Err(Error::Domain(format!(
            "rate must be nonnegative, got {rate}"
        )));
    }
    let g = avg_snr(x, p)?;
    Ok(-(-(rate * LN_2).exp_m1() / g).exp_m1())
}

fn capacity_from_snr(g: f64, eps: f64) -> f64 {
    // log2(1 - g ln(1 - eps)) with both logs in their accurate forms
    (-g * (-eps).ln_1p()).ln_1p() / LN_2
}

/// log2(1 - avg_snr(x) ln(1 - eps)).
pub fn outage_capacity_1d(x: f64, eps: f64, p: &PathLossParams) -> Result<f64> {
    check_eps(eps)?;
    Ok(capacity_from_snr(avg_snr(x, p)?, eps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoherenceMode {
    /// Scan `rho = k * step`, `k = 1, 2, ...`, up to `max_radius`
    /// (defaults to `x`, where the capacity diverges).
    Numeric {
        step: f64,
        max_radius: Option<f64>,
    },
    Exact,
    Approx,
}

impl CoherenceMode {
    pub fn numeric_default() -> Self {
        CoherenceMode::Numeric {
            step: 1e-3,
            max_radius: None,
        }
    }
}

/// Smallest radius around `x` where the relative change of the
/// epsilon-outage capacity exceeds `t`.
pub fn coherence_radius_1d(
    x: f64,
    t: f64,
    eps: f64,
    p: &PathLossParams,
    mode: CoherenceMode,
) -> Result<f64> {
    check_eps(eps)?;
    if !(t > 0.0) {
        return Err(invalid("threshold t must be positive"));
    }
    if !p.contains(x) {
        return Err(Error::Domain(format!("x={x} outside the cell")));
    }
    let eta = p.exponent;
    match mode {
        CoherenceMode::Approx => Ok(x * (1.0 - (1.0 + t).powf(-1.0 / eta))),
        CoherenceMode::Exact => {
            // u = -gamma0 G0 x^-eta ln(1-eps); the left neighbour reaching
            // (1+t) C(x) sits at x (u / ((1+u)^(1+t) - 1))^(1/eta).
            let u = -avg_snr(x, p)? * (-eps).ln_1p();
            let ratio = u / ((1.0 + t) * u.ln_1p()).exp_m1();
            Ok(x * -(ratio.ln() / eta).exp_m1())
        }
        CoherenceMode::Numeric { step, max_radius } => {
            if !(step > 0.0) {
                return Err(invalid("scan step must be positive"));
            }
            let limit = max_radius.unwrap_or(x).min(x);
            let c0 = outage_capacity_1d(x, eps, p)?;
            // The relative change over [x - rho, x + rho] is attained at an
            // endpoint because the capacity is monotone in distance.
            let exceeds = |k: u64| -> Result<bool> {
                let rho = k as f64 * step;
                let right = outage_capacity_1d(x + rho, eps, p)?;
                let mut change = (c0 - right).abs() / c0;
                if rho < x {
                    let left = outage_capacity_1d(x - rho, eps, p)?;
                    change = change.max((left - c0).abs() / c0);
                }
                Ok(change > t)
            };
            let mut hi = (limit / step).floor() as u64;
            if hi as f64 * step >= x {
                hi = hi.saturating_sub(1);
            }
            if hi == 0 || !exceeds(hi)? {
                return Err(Error::CoherenceRadiusExceedsCell {
                    searched_m: hi as f64 * step,
                });
            }
            let mut lo = 0u64;
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if exceeds(mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(hi as f64 * step)
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(invalid(format!("beta must lie in (0,1], got {beta}")));
    }
    Ok(())
}

/// log2(1 - beta avg_snr(x_hat) ln(1 - eps)).
pub fn backoff_rate_1d(x_hat: f64, beta: f64, eps: f64, p: &PathLossParams) -> Result<f64> {
    check_beta(beta)?;
    check_eps(eps)?;
    Ok(capacity_from_snr(beta * avg_snr(x_hat, p)?, eps))
}

/// 1 - Phi((x / sigma) (1 - beta^(1/eta))).
pub fn backoff_meta_1d(x: f64, beta: f64, sigma: f64, eta: f64) -> Result<f64> {
    check_distance(x)?;
    check_beta(beta)?;
    if !(sigma > 0.0) {
        return Err(invalid("sigma must be positive"));
    }
    Ok(std_normal_sf(backoff_outage_distance(x, beta, eta) / sigma))
}

/// Distance from `x` to the Backoff outage region, x (1 - beta^(1/eta)).
pub fn backoff_outage_distance(x: f64, beta: f64, eta: f64) -> f64 {
    -x * (beta.ln() / eta).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackoffCalibration {
    pub beta: f64,
    pub x_star: f64,
    pub sigma_star: f64,
    /// Set when delta > 0.5 would give beta > 1; beta is then clamped to 1.
    pub clamped: bool,
}

/// Largest beta meeting the meta-probability target `delta` on the cell.
pub fn calibrate_backoff_1d(
    delta: f64,
    locstd: &LocStd1D,
    p: &PathLossParams,
) -> Result<BackoffCalibration> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    locstd.validate(p)?;
    let x_star = locstd.worst_location(p);
    let sigma_star = locstd.sigma(x_star);
    let margin = std_normal_quantile(1.0 - delta)? * sigma_star / x_star;
    if margin >= 1.0 {
        return Err(Error::NoFeasibleBackoff { margin });
    }
    let beta = (1.0 - margin).powf(p.exponent);
    Ok(BackoffCalibration {
        beta: beta.min(1.0),
        x_star,
        sigma_star,
        clamped: beta > 1.0,
    })
}

/// C_eps(x_hat + q sigma).
pub fn interval_rate_1d(
    x_hat: f64,
    sigma: f64,
    q: f64,
    eps: f64,
    p: &PathLossParams,
) -> Result<f64> {
    if !(q >= 0.0) {
        return Err(invalid("q must be nonnegative"));
    }
    outage_capacity_1d(x_hat + q * sigma, eps, p)
}

/// Phi(-q), the same at every location.
pub fn interval_meta_1d(q: f64) -> Result<f64> {
    if !(q >= 0.0) {
        return Err(invalid("q must be nonnegative"));
    }
    Ok(std_normal_cdf(-q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme1D {
    Backoff(f64),
    Interval(f64),
}

impl Scheme1D {
    fn validate(&self) -> Result<()> {
        match *self {
            Scheme1D::Backoff(b) => check_beta(b),
            Scheme1D::Interval(q) if q >= 0.0 => Ok(()),
            Scheme1D::Interval(_) => Err(invalid("q must be nonnegative")),
        }
    }

    pub fn rate(&self, x_hat: f64, sigma: f64, eps: f64, p: &PathLossParams) -> Result<f64> {
        match *self {
            Scheme1D::Backoff(b) => backoff_rate_1d(x_hat, b, eps, p),
            Scheme1D::Interval(q) => interval_rate_1d(x_hat, sigma, q, eps, p),
        }
    }

    /// 1 - p_out at `x` for the rate chosen at `x_hat`, in closed form.
    fn success(&self, x: f64, x_hat: f64, sigma: f64, eps: f64, eta: f64) -> f64 {
        let ln1me = (-eps).ln_1p();
        let expo = match *self {
            Scheme1D::Backoff(b) => b * (x / x_hat).powf(eta),
            Scheme1D::Interval(q) => (x / (x_hat + q * sigma)).powf(eta),
        };
        (expo * ln1me).exp()
    }
}

/// E[R(x_hat) (1 - p_out(R(x_hat)))] / (C_eps(x) (1 - eps)) by adaptive
/// quadrature over `x_hat` in `(max(0, x - 8 sigma), x + 8 sigma)`.
pub fn throughput_ratio_1d(
    x: f64,
    scheme: Scheme1D,
    sigma: f64,
    eps: f64,
    p: &PathLossParams,
) -> Result<f64> {
    scheme.validate()?;
    check_distance(x)?;
    if !(sigma >= 0.0) {
        return Err(invalid("sigma must be nonnegative"));
    }
    let norm = outage_capacity_1d(x, eps, p)? * (1.0 - eps);
    let eta = p.exponent;
    let payoff = |xh: f64| -> f64 {
        let r = scheme.rate(xh, sigma, eps, p).unwrap_or(0.0);
        r * scheme.success(x, xh, sigma, eps, eta)
    };
    if sigma == 0.0 {
        return Ok(payoff(x) / norm);
    }
    let lo = (x - 8.0 * sigma).max(0.0);
    let hi = x + 8.0 * sigma;
    let integrand = |xh: f64| payoff(xh) * std_normal_pdf((xh - x) / sigma) / sigma;
    let opts = QuadOptions::default();
    // Split at x so the density peak sits on a panel boundary.
    let left = integrate(integrand, lo, x, opts)?;
    let right = integrate(integrand, x, hi, opts)?;
    Ok((left.value + right.value) / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub draws: u64,
}

impl McEstimate {
    pub fn from_count(hits: u64, draws: u64) -> Self {
        let p = hits as f64 / draws as f64;
        Self {
            estimate: p,
            standard_error: (p * (1.0 - p) / draws as f64).sqrt(),
            draws,
        }
    }

    /// Standard error evaluated at a reference probability.
    pub fn se_at(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.draws as f64).sqrt()
    }
}

const MC_CHUNK: u64 = 1 << 16;

/// Monte-Carlo meta-probability: the fraction of `x_hat ~ N(x, sigma^2)`
/// draws whose selected rate exceeds C_eps(x). Draws with `x_hat <= 0`
/// never count as outage.
pub fn meta_probability_mc_1d(
    x: f64,
    scheme: Scheme1D,
    sigma: f64,
    eps: f64,
    p: &PathLossParams,
    draws: u64,
    seed: u64,
) -> Result<McEstimate> {
    scheme.validate()?;
    if draws == 0 {
        return Err(invalid("need at least one draw"));
    }
    let c = outage_capacity_1d(x, eps, p)?;
    let chunks = draws.div_ceil(MC_CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = stream(seed, Purpose::LocationDraws, ci, 0);
            let n = MC_CHUNK.min(draws - ci * MC_CHUNK);
            let mut h = 0u64;
            for _ in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                let xh = x + sigma * z;
                if xh > 0.0 && scheme.rate(xh, sigma, eps, p).unwrap_or(0.0) > c {
                    h += 1;
                }
            }
            h
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    Ok(McEstimate::from_count(hits, draws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn fig1() -> PathLossParams {
        PathLossParams::new(1.0, 2.0, 1e3, 20.0, 100.0).unwrap()
    }

    const EPS: f64 = 1e-5;

    #[test]
    fn avg_snr_examples() {
        let unit = PathLossParams::new(1.0, 3.3, 1.0, 0.5, 2.0).unwrap();
        assert_eq!(avg_snr(1.0, &unit).unwrap(), 1.0);
        assert!((avg_snr(50.0, &fig1()).unwrap() - 0.4).abs() < 1e-15);
        assert!((avg_snr(100.0, &fig1()).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(avg_snr(0.0, &fig1()), Err(Error::Domain(_))));
        assert!(avg_snr(-1.0, &fig1()).is_err());
    }

    #[test]
    fn outage_cdf_examples() {
        let unit = PathLossParams::new(1.0, 2.0, 1.0, 0.5, 2.0).unwrap();
        assert_eq!(outage_cdf_1d(0.0, 1.0, &unit).unwrap(), 0.0);
        assert!((outage_cdf_1d(1.0, 1.0, &unit).unwrap() - 0.6321205588285577).abs() < 1e-15);
        for x in [20.0, 50.0, 97.0] {
            let c = outage_capacity_1d(x, EPS, &fig1()).unwrap();
            let pout = outage_cdf_1d(c, x, &fig1()).unwrap();
            assert!(((pout - EPS) / EPS).abs() < 1e-9, "{pout}");
        }
    }

    #[test]
    fn outage_capacity_value() {
        let c = outage_capacity_1d(50.0, EPS, &fig1()).unwrap();
        assert!((c - 5.770797476004066e-6).abs() / c < 1e-12);
        assert!((c - 5.771e-6).abs() / 5.771e-6 < 1e-3);
        let far = outage_capacity_1d(1e12, EPS, &fig1()).unwrap();
        assert!(far < 1e-25);
    }

    #[test]
    fn outage_capacity_matches_rayleigh_monte_carlo() {
        use crate::samples::{empirical_outage_capacity, CapacitySamples};
        let p = fig1();
        let g = avg_snr(50.0, &p).unwrap();
        let m = 1_000_000usize;
        let mut rng = stream(3, Purpose::Test, 0, 0);
        let vals: Vec<f64> = (0..m)
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                (g * 0.5 * (re * re + im * im)).ln_1p() / LN_2
            })
            .collect();
        let s = CapacitySamples::new(vals).unwrap();
        let eps = 1e-2;
        let got = empirical_outage_capacity(&s, eps).unwrap();
        let want = outage_capacity_1d(50.0, eps, &p).unwrap();
        // quantile standard error sqrt(eps(1-eps)/M) / f(C_eps)
        let dens = (1.0 - eps) * (want * LN_2).exp() * LN_2 / g;
        let se = (eps * (1.0 - eps) / m as f64).sqrt() / dens;
        assert!((got - want).abs() < 3.0 * se, "{got} vs {want}, se {se}");
    }

    #[test]
    fn coherence_radius_approx_and_exact() {
        let p = fig1();
        let approx = coherence_radius_1d(50.0, 1.0, EPS, &p, CoherenceMode::Approx).unwrap();
        assert!((approx - 14.644660940672624).abs() < 1e-12);
        let exact = coherence_radius_1d(50.0, 1.0, EPS, &p, CoherenceMode::Exact).unwrap();
        assert!((exact - 14.644696296135428).abs() < 1e-9);
    }

    #[test]
    fn coherence_radius_exact_within_1e4_of_approx() {
        let p = fig1();
        for t in [0.1, 0.5, 0.9, 1.0] {
            for i in 0..=800 {
                let x = 20.0 + 0.1 * i as f64;
                let e = coherence_radius_1d(x, t, EPS, &p, CoherenceMode::Exact).unwrap();
                let a = coherence_radius_1d(x, t, EPS, &p, CoherenceMode::Approx).unwrap();
                assert!((e - a).abs() < 1e-4, "x={x} t={t}: {e} vs {a}");
            }
        }
    }

    #[test]
    fn coherence_radius_numeric_matches_exact_within_step() {
        let p = fig1();
        let step = 1e-4;
        for t in [0.1, 0.5, 1.0] {
            for x in [20.0, 33.3, 50.0, 77.7, 100.0] {
                let e = coherence_radius_1d(x, t, EPS, &p, CoherenceMode::Exact).unwrap();
                let mode = CoherenceMode::Numeric {
                    step,
                    max_radius: None,
                };
                let n = coherence_radius_1d(x, t, EPS, &p, mode).unwrap();
                assert!(
                    n >= e - 1e-9 && n - e <= step + 1e-9,
                    "x={x} t={t}: {n} vs {e}"
                );
            }
        }
    }

    #[test]
    fn coherence_radius_search_limit() {
        let mode = CoherenceMode::Numeric {
            step: 1e-2,
            max_radius: Some(1.0),
        };
        assert!(matches!(
            coherence_radius_1d(50.0, 1.0, EPS, &fig1(), mode),
            Err(Error::CoherenceRadiusExceedsCell { .. })
        ));
        assert!(coherence_radius_1d(150.0, 1.0, EPS, &fig1(), CoherenceMode::Exact).is_err());
    }

    #[test]
    fn backoff_rate_examples() {
        let p = fig1();
        let full = backoff_rate_1d(50.0, 1.0, EPS, &p).unwrap();
        assert_eq!(full, outage_capacity_1d(50.0, EPS, &p).unwrap());
        let half = backoff_rate_1d(50.0, 0.5, EPS, &p).unwrap();
        assert!((half - 2.885401623409427e-6).abs() / half < 1e-12);
        assert!(backoff_rate_1d(50.0, 0.4, EPS, &p).unwrap() < half);
        assert!(backoff_rate_1d(50.0, 0.0, EPS, &p).is_err());
        assert!(backoff_rate_1d(50.0, 1.1, EPS, &p).is_err());
    }

    #[test]
    fn fig1_meta_probability() {
        let d = backoff_outage_distance(50.0, 0.5, 2.0);
        assert!((d - 14.644660940672624).abs() < 1e-12);
        let m = backoff_meta_1d(50.0, 0.5, 4.0, 2.0).unwrap();
        assert!((m - 1.2553538149466722e-4).abs() < 1e-15);
        assert!((m - 1.26e-4).abs() / 1.26e-4 < 0.02);
        assert_eq!(backoff_meta_1d(50.0, 1.0, 4.0, 2.0).unwrap(), 0.5);
    }

    #[test]
    fn fig1_meta_probability_monte_carlo() {
        let want = backoff_meta_1d(50.0, 0.5, 4.0, 2.0).unwrap();
        let est = meta_probability_mc_1d(
            50.0,
            Scheme1D::Backoff(0.5),
            4.0,
            EPS,
            &fig1(),
            2_000_000,
            5,
        )
        .unwrap();
        assert!(
            (est.estimate - want).abs() < 3.0 * est.se_at(want),
            "{est:?} vs {want}"
        );
    }

    #[test]
    fn backoff_meta_monotone_on_grids() {
        let betas: Vec<f64> = (1..=50).map(|i| i as f64 / 50.0).collect();
        for w in betas.windows(2) {
            assert!(
                backoff_meta_1d(50.0, w[1], 4.0, 2.0).unwrap()
                    > backoff_meta_1d(50.0, w[0], 4.0, 2.0).unwrap()
            );
        }
        for i in 0..40 {
            let (x0, x1) = (10.0 + i as f64, 11.0 + i as f64);
            assert!(
                backoff_meta_1d(x1, 0.5, 4.0, 2.0).unwrap()
                    < backoff_meta_1d(x0, 0.5, 4.0, 2.0).unwrap()
            );
        }
    }

    #[test]
    fn calibration_examples() {
        let p = fig1();
        let c = calibrate_backoff_1d(0.1, &LocStd1D::Constant(4.0), &p).unwrap();
        assert_eq!(c.x_star, 20.0);
        assert!((c.beta - 0.5530743503881523).abs() < 1e-12);
        assert!((c.beta - 0.5531).abs() < 1e-4);
        let med = calibrate_backoff_1d(0.5, &LocStd1D::Constant(4.0), &p).unwrap();
        assert_eq!(med.beta, 1.0);
        let wide = calibrate_backoff_1d(0.7, &LocStd1D::Constant(4.0), &p).unwrap();
        assert!(wide.clamped && wide.beta == 1.0);
        assert!(matches!(
            calibrate_backoff_1d(0.05, &LocStd1D::Constant(20.0), &p),
            Err(Error::NoFeasibleBackoff { .. })
        ));
    }

    #[test]
    fn affine_worst_location() {
        let p = fig1();
        let grow = LocStd1D::Affine {
            slope: 0.05,
            offset: 1.0,
        };
        assert_eq!(grow.worst_location(&p), 20.0);
        let shrink = LocStd1D::Affine {
            slope: 0.05,
            offset: -0.5,
        };
        assert_eq!(shrink.worst_location(&p), 100.0);
        assert!(LocStd1D::Affine {
            slope: -1.0,
            offset: 10.0
        }
        .validate(&p)
        .is_err());
    }

    #[test]
    fn calibrated_backoff_certificate() {
        let p = fig1();
        for delta in [1e-1, 1e-3, 1e-5] {
            let c = calibrate_backoff_1d(delta, &LocStd1D::Constant(4.0), &p).unwrap();
            let mut worst: f64 = 0.0;
            for i in 0..1000 {
                let x = 20.0 + 80.0 * i as f64 / 999.0;
                worst = worst.max(backoff_meta_1d(x, c.beta, 4.0, 2.0).unwrap());
            }
            assert!(worst <= delta * (1.0 + 1e-9));
            let at = backoff_meta_1d(20.0, c.beta, 4.0, 2.0).unwrap();
            assert!((at - delta).abs() < 1e-9, "delta={delta}: {at}");
            assert!(((at - delta) / delta).abs() < 1e-9);
        }
    }

    #[test]
    fn interval_examples() {
        let p = fig1();
        assert_eq!(
            interval_rate_1d(50.0, 4.0, 0.0, EPS, &p).unwrap(),
            outage_capacity_1d(50.0, EPS, &p).unwrap()
        );
        let q = 1.6449;
        let r = interval_rate_1d(50.0, 4.0, q, EPS, &p).unwrap();
        assert_eq!(r, outage_capacity_1d(50.0 + 4.0 * q, EPS, &p).unwrap());
        assert!((r - 4.506675483120597e-6).abs() / r < 1e-12);
        assert_eq!(interval_meta_1d(0.0).unwrap(), 0.5);
        let q05 = -std_normal_quantile(0.05).unwrap();
        assert!((interval_meta_1d(q05).unwrap() - 0.05).abs() < 1e-15);
        assert!(interval_meta_1d(-1.0).is_err());
    }

    #[test]
    fn interval_meta_location_independent_mc() {
        let p = fig1();
        let q = 1.6448536269514722;
        let want = interval_meta_1d(q).unwrap();
        for (i, x) in [25.0, 50.0, 90.0].into_iter().enumerate() {
            let est = meta_probability_mc_1d(
                x,
                Scheme1D::Interval(q),
                4.0,
                EPS,
                &p,
                400_000,
                100 + i as u64,
            )
            .unwrap();
            assert!(
                (est.estimate - want).abs() < 3.0 * est.se_at(want),
                "x={x}: {est:?}"
            );
        }
    }

    #[test]
    fn throughput_limits() {
        let p = fig1();
        let t = throughput_ratio_1d(50.0, Scheme1D::Interval(0.0), 0.0, EPS, &p).unwrap();
        assert!((t - 1.0).abs() < 1e-15);
        let t = throughput_ratio_1d(50.0, Scheme1D::Interval(0.0), 1e-9, EPS, &p).unwrap();
        assert!((t - 1.0).abs() < 1e-6);
        let b = throughput_ratio_1d(50.0, Scheme1D::Backoff(0.5), 1e-9, EPS, &p).unwrap();
        assert!((b - 0.5).abs() < 1e-5, "{b}");
    }

    #[test]
    fn throughput_reference_values() {
        // Independent high-precision quadrature of the same expectation.
        let p = PathLossParams::new(1.0, 2.0, 1e3, 20.0, 200.0).unwrap();
        let q = 1.6448536269514722;
        let table = [
            (20.0, 0.579213178740809, 0.609908760654303),
            (50.0, 0.509924729328887, 0.792964699803766),
            (100.0, 0.502422025896449, 0.884093420151077),
            (200.0, 0.500603730560623, 0.938372559908608),
        ];
        for (x, tb, ti) in table {
            let b = throughput_ratio_1d(x, Scheme1D::Backoff(0.5), 4.0, EPS, &p).unwrap();
            let i = throughput_ratio_1d(x, Scheme1D::Interval(q), 4.0, EPS, &p).unwrap();
            assert!((b - tb).abs() < 1e-7, "x={x}: {b} vs {tb}");
            assert!((i - ti).abs() < 1e-7, "x={x}: {i} vs {ti}");
        }
    }

    #[test]
    fn interval_beats_backoff_at_matched_delta() {
        let p = fig1();
        for delta in [1e-1, 1e-3] {
            let beta = calibrate_backoff_1d(delta, &LocStd1D::Constant(4.0), &p)
                .unwrap()
                .beta;
            let q = -std_normal_quantile(delta).unwrap();
            for i in 0..=16 {
                let x = 20.0 + 5.0 * i as f64;
                let b = throughput_ratio_1d(x, Scheme1D::Backoff(beta), 4.0, EPS, &p).unwrap();
                let t = throughput_ratio_1d(x, Scheme1D::Interval(q), 4.0, EPS, &p).unwrap();
                assert!(t >= b, "delta={delta} x={x}: {t} < {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn capacity_monotone(x in 1.0f64..500.0, dx in 1e-3f64..50.0, eps in 1e-6f64..0.5) {
            let p = fig1();
            prop_assert!(outage_capacity_1d(x + dx, eps, &p).unwrap() < outage_capacity_1d(x, eps, &p).unwrap());
            prop_assert!(outage_capacity_1d(x, eps * 1.5, &p).unwrap() > outage_capacity_1d(x, eps, &p).unwrap());
        }

        #[test]
        fn interval_rate_nonincreasing_in_q(xh in 5.0f64..200.0, q in 0.0f64..4.0, dq in 0.0f64..2.0) {
            let p = fig1();
            prop_assert!(interval_rate_1d(xh, 4.0, q + dq, EPS, &p).unwrap() <= interval_rate_1d(xh, 4.0, q, EPS, &p).unwrap());
        }
    }
}
