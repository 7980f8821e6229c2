//! Fisher-information localization bounds.
//!
//! Per BS link the unknowns are the delays and complex amplitudes of the
//! non-resolvable paths (those within `1/W` of the LoS delay). With
//! symmetric subcarriers `j = -p..=p` and mean `mu_j = sum_k a_k e_kj`,
//! `e_kj = exp(-2 pi i df j tau_k)`, the channel-parameter FIM is
//!
//! `J = 2 gamma0 sum_j Re(g_j g_j^H)`, with `g = d mu_j / d[tau, Re a, Im a]`.
//!
//! The closed-form blocks use `S2 = sum_{j=1..p} j^2 cos(2 pi df j d)`,
//! `S1 = sum j sin(.)` and `S0 = sum cos(.)` with `d = tau_n - tau_m`:
//!
//! * delay/delay: `2 gamma0 (2 pi df)^2 2 S2 Re(a_n conj(a_m))`
//! * delay/Re a: `-8 pi df gamma0 S1 Re(a_n)`, delay/Im a: the same with `Im(a_n)`
//! * Re/Re and Im/Im: `2 gamma0 (1 + 2 S0)`; Re/Im: 0
//!
//! These constants follow from the partial derivatives. Closed forms written
//! with an `8 pi` overall prefactor, a `4 pi df` delay factor or sums up to
//! `N/2` do not reproduce the derivative-based matrix; the blocks here are
//! validated against the direct sum.
//!
//! The LoS-delay information after eliminating the nuisance parameters
//! (Schur complement) feeds a position/clock-bias FIM through the Jacobian of
//! `tau_1 = |x - x_bs| / c + B`, using the 3-D BS-UE distance.

use crate::channel::{PathSet, SystemConfig, SPEED_OF_LIGHT};
use crate::env2d::{EnvironmentMap, GridGeometry};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Purpose};
use nalgebra::{DMatrix, Matrix2, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Condition-number limit for the nuisance block and the position FIM.
pub const CONDITION_LIMIT: f64 = 1e12;
/// Largest fraction of singular draws tolerated when averaging.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

/// Number of paths within `1/W` of the LoS delay and the truncated set.
pub fn nonresolvable_cluster(paths: &PathSet, bandwidth_hz: f64) -> (usize, PathSet) {
    let tau1 = paths.delays()[0];
    let limit = 1.0 / bandwidth_hz;
    let k = paths
        .delays()
        .iter()
        .take_while(|&&t| t - tau1 <= limit)
        .count()
        .max(1);
    (k, paths.truncated(k))
}

/// Delays and complex amplitudes of one link; parameter order in the FIM is
/// `[tau_1..tau_K, Re a_1..Re a_K, Im a_1..Im a_K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub delays: Vec<f64>,
    pub amplitudes: Vec<Complex64>,
}

impl ChannelParams {
    pub fn new(delays: Vec<f64>, amplitudes: Vec<Complex64>) -> Result<Self> {
        if delays.is_empty() || delays.len() != amplitudes.len() {
            return Err(invalid(
                "channel parameters need equal, nonzero numbers of delays and amplitudes",
            ));
        }
        Ok(Self { delays, amplitudes })
    }

    pub fn from_paths(paths: &PathSet) -> Self {
        Self {
            delays: paths.delays().to_vec(),
            amplitudes: paths.amplitudes().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.delays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FimMode {
    /// Direct sum over subcarriers of the analytic partial derivatives.
    Numeric,
    /// Closed-form blocks from precomputed delay kernels.
    Blockform,
}

fn half_count(n: usize) -> Result<usize> {
    if n % 2 == 0 {
        return Err(invalid(format!(
            "symmetric subcarrier layout needs odd N, got {n}"
        )));
    }
    Ok(n / 2)
}

/// Channel-parameter FIM, `3K x 3K`.
pub fn fim_channel_params(
    params: &ChannelParams,
    tx_snr: f64,
    n: usize,
    df: f64,
    mode: FimMode,
) -> Result<DMatrix<f64>> {
    let p = half_count(n)?;
    match mode {
        FimMode::Numeric => Ok(fim_numeric(params, tx_snr, p, df)),
        FimMode::Blockform => {
            Ok(DelayKernels::new(&params.delays, p, df).fim(&params.amplitudes, tx_snr))
        }
    }
}

fn fim_numeric(params: &ChannelParams, tx_snr: f64, p: usize, df: f64) -> DMatrix<f64> {
    let k = params.len();
    let dim = 3 * k;
    let mut j_mat = DMatrix::<f64>::zeros(dim, dim);
    let mut g = vec![Complex64::new(0.0, 0.0); dim];
    let p = p as i64;
    for j in -p..=p {
        let jf = j as f64;
        for kk in 0..k {
            let e = Complex64::from_polar(1.0, -2.0 * PI * df * jf * params.delays[kk]);
            g[kk] = Complex64::new(0.0, -2.0 * PI * df * jf) * params.amplitudes[kk] * e;
            g[k + kk] = e;
            g[2 * k + kk] = Complex64::new(0.0, 1.0) * e;
        }
        for a in 0..dim {
            for b in a..dim {
                let v = (g[a] * g[b].conj()).re;
                j_mat[(a, b)] += v;
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = 2.0 * tx_snr * j_mat[(a, b)];
            j_mat[(a, b)] = v;
            j_mat[(b, a)] = v;
        }
    }
    j_mat
}

/// Delay-only kernels `S0, S1, S2` of the closed-form FIM blocks. They
/// depend only on delay differences, so a link can be evaluated for many
/// amplitude draws at the cost of recombining small matrices.
#[derive(Debug, Clone)]
pub struct DelayKernels {
    k: usize,
    df: f64,
    s0: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl DelayKernels {
    pub fn new(delays: &[f64], p: usize, df: f64) -> Self {
        let k = delays.len();
        let mut s0 = vec![0.0; k * k];
        let mut s1 = vec![0.0; k * k];
        let mut s2 = vec![0.0; k * k];
        for n in 0..k {
            for m in 0..k {
                let d = delays[n] - delays[m];
                let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                for j in 1..=p {
                    let jf = j as f64;
                    let (s, c) = (2.0 * PI * df * jf * d).sin_cos();
                    a0 += c;
                    a1 += jf * s;
                    a2 += jf * jf * c;
                }
                s0[n * k + m] = a0;
                s1[n * k + m] = a1;
                s2[n * k + m] = a2;
            }
        }
        Self { k, df, s0, s1, s2 }
    }

    pub fn fim(&self, amps: &[Complex64], tx_snr: f64) -> DMatrix<f64> {
        let k = self.k;
        let mut j = DMatrix::<f64>::zeros(3 * k, 3 * k);
        let w = 2.0 * PI * self.df;
        let cross = -8.0 * PI * self.df * tx_snr;
        for n in 0..k {
            for m in 0..k {
                let i = n * k + m;
                j[(n, m)] = 2.0 * tx_snr * w * w * 2.0 * self.s2[i] * (amps[n] * amps[m].conj()).re;
                let tr = cross * self.s1[i] * amps[n].re;
                let ti = cross * self.s1[i] * amps[n].im;
                j[(n, k + m)] = tr;
                j[(k + m, n)] = tr;
                j[(n, 2 * k + m)] = ti;
                j[(2 * k + m, n)] = ti;
                let aa = 2.0 * tx_snr * (1.0 + 2.0 * self.s0[i]);
                j[(k + n, k + m)] = aa;
                j[(2 * k + n, 2 * k + m)] = aa;
            }
        }
        j
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalentFi {
    pub value: f64,
    /// Set when the nuisance block was ill-conditioned and a
    /// pseudo-inverse was used.
    pub pseudo_inverse: bool,
    pub condition: f64,
}

fn jacobi_scales(j: &DMatrix<f64>) -> Vec<f64> {
    (0..j.nrows())
        .map(|i| {
            let d = j[(i, i)];
            if d > 0.0 && d.is_finite() {
                // Power of two, so scaling is exact.
                (-(d.log2() / 2.0).round()).exp2()
            } else {
                1.0
            }
        })
        .collect()
}

/// Spectral condition number of a symmetric matrix (infinite when singular).
/// `sum a_i b_i` with error-free products and sums (Dot2).
pub(crate) fn dot2(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut err) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        let pe = x.mul_add(y, -p);
        let t = sum + p;
        let z = t - sum;
        err += pe + ((sum - (t - z)) + (p - z));
        sum = t;
    }
    sum + err
}

/// Solves `m x = b` by Cholesky with residuals evaluated by `dot2`.
fn refine(
    ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    m: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = m.nrows();
    let mut x = ch.solve(b);
    for _ in 0..3 {
        let r = DMatrix::from_fn(n, 1, |a, _| {
            let row: Vec<f64> = std::iter::once(b[(a, 0)])
                .chain((0..n).map(|k| -m[(a, k)]))
                .collect();
            let xs: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
            dot2(&row, &xs)
        });
        x += ch.solve(&r);
    }
    x
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = ev.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Symmetric pseudo-inverse with eigenvalues below `max / CONDITION_LIMIT`
/// dropped.
fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let max = e.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let cut = max / CONDITION_LIMIT;
    let inv = e.eigenvalues.map(|v| if v > cut { 1.0 / v } else { 0.0 });
    &e.eigenvectors * DMatrix::from_diagonal(&inv) * e.eigenvectors.transpose()
}

/// Equivalent Fisher information of the first parameter:
/// `J11 - J12 J22^-1 J21`, clamped to `[0, J11]`.
pub fn equivalent_fim_toa(j: &DMatrix<f64>, allow_pseudo_inverse: bool) -> Result<EquivalentFi> {
    let dim = j.nrows();
    if dim == 0 || j.ncols() != dim {
        return Err(invalid("FIM must be square and nonempty"));
    }
    let j11 = j[(0, 0)];
    if dim == 1 {
        return Ok(EquivalentFi {
            value: j11.max(0.0),
            pseudo_inverse: false,
            condition: 1.0,
        });
    }
    let s = jacobi_scales(j);
    let scaled = DMatrix::from_fn(dim, dim, |a, b| j[(a, b)] * s[a] * s[b]);
    let nuis = scaled.view((1, 1), (dim - 1, dim - 1)).into_owned();
    let c = scaled.view((1, 0), (dim - 1, 1)).into_owned();
    let cond = condition(&nuis);
    let (x, pinv) = if cond <= CONDITION_LIMIT {
        match nuis.clone().cholesky() {
            Some(ch) => (refine(&ch, &nuis, &c), false),
            None if allow_pseudo_inverse => (pseudo_inverse(&nuis) * &c, true),
            None => return Err(Error::SingularNuisance { condition: cond }),
        }
    } else if allow_pseudo_inverse {
        (pseudo_inverse(&nuis) * &c, true)
    } else {
        return Err(Error::SingularNuisance { condition: cond });
    };
    let head: Vec<f64> = std::iter::once(scaled[(0, 0)])
        .chain(c.iter().map(|v| -v))
        .collect();
    let tail: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
    let value = (dot2(&head, &tail) / (s[0] * s[0])).clamp(0.0, j11.max(0.0));
    Ok(EquivalentFi {
        value,
        pseudo_inverse: pinv,
        condition: cond,
    })
}

/// Equivalent FI of the LoS delay as the squared residual of projecting
/// the delay-derivative vector onto the span of the nuisance derivatives,
/// `J^E = 2 gamma0 |(I - P) g_1|^2` in the real `2N`-dimensional
/// representation. The residual is formed explicitly, so its relative
/// accuracy does not degrade with the nuisance condition number the way
/// the Schur difference does. Nuisance directions with singular value below
/// `max / sqrt(CONDITION_LIMIT)` are dropped and flagged.
pub fn equivalent_fi_projection(
    params: &ChannelParams,
    tx_snr: f64,
    n: usize,
    df: f64,
    allow_pseudo_inverse: bool,
) -> Result<EquivalentFi> {
    let p = half_count(n)? as i64;
    let k = params.len();
    let dim = 3 * k;
    let rows = 2 * n;
    let mut a = DMatrix::<f64>::zeros(rows, dim);
    for (r, j) in (-p..=p).enumerate() {
        let jf = j as f64;
        for kk in 0..k {
            let e = Complex64::from_polar(1.0, -2.0 * PI * df * jf * params.delays[kk]);
            let g = [
                Complex64::new(0.0, -2.0 * PI * df * jf) * params.amplitudes[kk] * e,
                e,
                Complex64::new(0.0, 1.0) * e,
            ];
            for (blk, v) in g.iter().enumerate() {
                a[(2 * r, blk * k + kk)] = v.re;
                a[(2 * r + 1, blk * k + kk)] = v.im;
            }
        }
    }
    let g1 = a.column(0).into_owned();
    let j11 = 2.0 * tx_snr * g1.norm_squared();
    if dim == 1 {
        return Ok(EquivalentFi {
            value: j11,
            pseudo_inverse: false,
            condition: 1.0,
        });
    }
    let mut nuis = a.columns(1, dim - 1).into_owned();
    for mut c in nuis.column_iter_mut() {
        let norm = c.norm();
        if norm > 0.0 {
            c /= norm;
        }
    }
    let svd = nuis.svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 {
        (smax / smin).powi(2)
    } else {
        f64::INFINITY
    };
    let cut = smax / CONDITION_LIMIT.sqrt();
    let dropped = svd.singular_values.iter().any(|&s| s <= cut);
    if dropped && !allow_pseudo_inverse {
        return Err(Error::SingularNuisance { condition: cond });
    }
    let mut resid = g1.clone();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            let ui = u.column(i);
            let coef = ui.dot(&resid);
            resid.axpy(-coef, &ui, 1.0);
        }
    }
    let value = (2.0 * tx_snr * resid.norm_squared()).clamp(0.0, j11);
    Ok(EquivalentFi {
        value,
        pseudo_inverse: dropped,
        condition: cond,
    })
}

/// Schur-route result is trusted unless a pseudo-inverse was needed or the
/// difference lost most of its digits to cancellation.
fn schur_is_reliable(e: &EquivalentFi, j11: f64) -> bool {
    !e.pseudo_inverse && e.value > 1e4 * f64::EPSILON * e.condition * j11
}

/// `T^T diag(jE) T` over `(x1, x2[, B])`, with rows
/// `[(x1 - b1) / (c r), (x2 - b2) / (c r)(, 1)]` and `r` the 3-D distance.
pub fn fim_position(
    j_e: &[f64],
    bs: &[[f64; 3]],
    ue: [f64; 3],
    with_bias: bool,
) -> Result<DMatrix<f64>> {
    if j_e.len() != bs.len() || bs.is_empty() {
        return Err(invalid("need one equivalent FI per base station"));
    }
    let dim = if with_bias { 3 } else { 2 };
    let mut j = DMatrix::<f64>::zeros(dim, dim);
    for (b, &je) in bs.iter().zip(j_e) {
        let dx = ue[0] - b[0];
        let dy = ue[1] - b[1];
        let dz = ue[2] - b[2];
        let r = (dx * dx + dy * dy + dz * dz).sqrt();
        if r <= 0.0 {
            return Err(Error::SingularGeometry(format!(
                "UE at ({}, {}) coincides with a base station",
                ue[0], ue[1]
            )));
        }
        let mut t = vec![dx / (SPEED_OF_LIGHT * r), dy / (SPEED_OF_LIGHT * r)];
        if with_bias {
            t.push(1.0);
        }
        for a in 0..dim {
            for c in 0..dim {
                j[(a, c)] += je * t[a] * t[c];
            }
        }
    }
    Ok(j)
}

/// 2x2 position covariance `[s11, s12; s12, s22]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cov2 {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

impl Cov2 {
    pub fn isotropic(variance: f64) -> Self {
        Self {
            s11: variance,
            s12: 0.0,
            s22: variance,
        }
    }

    pub fn from_matrix(m: &Matrix2<f64>) -> Self {
        Self {
            s11: m[(0, 0)],
            s12: 0.5 * (m[(0, 1)] + m[(1, 0)]),
            s22: m[(1, 1)],
        }
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.s11, self.s12, self.s12, self.s22)
    }

    pub fn trace(&self) -> f64 {
        self.s11 + self.s22
    }

    pub fn peb(&self) -> f64 {
        self.trace().sqrt()
    }

    pub fn det(&self) -> f64 {
        self.s11 * self.s22 - self.s12 * self.s12
    }

    /// Eigenvalues, ascending.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let m = 0.5 * (self.s11 + self.s22);
        let r = (0.25 * (self.s11 - self.s22).powi(2) + self.s12 * self.s12).sqrt();
        (m - r, m + r)
    }

    pub fn is_spd(&self) -> bool {
        self.s11 > 0.0 && self.det() > 0.0
    }

    pub fn is_isotropic(&self) -> bool {
        self.s12 == 0.0 && self.s11 == self.s22
    }

    pub fn inverse(&self) -> Option<Cov2> {
        let d = self.det();
        if !(d > 0.0) {
            return None;
        }
        Some(Cov2 {
            s11: self.s22 / d,
            s12: -self.s12 / d,
            s22: self.s11 / d,
        })
    }

    /// Lower Cholesky factor `(l11, l21, l22)`.
    pub fn cholesky(&self) -> Option<(f64, f64, f64)> {
        if !self.is_spd() {
            return None;
        }
        let l11 = self.s11.sqrt();
        let l21 = self.s12 / l11;
        let l22 = (self.s22 - l21 * l21).sqrt();
        Some((l11, l21, l22))
    }

    /// Raises both eigenvalues to at least `floor`. Returns the adjusted
    /// covariance and whether anything changed.
    pub fn with_eigen_floor(&self, floor: f64) -> (Cov2, bool) {
        let (lo, hi) = self.eigenvalues();
        if lo >= floor {
            return (*self, false);
        }
        let e = SymmetricEigen::new(self.matrix());
        let vals = e.eigenvalues.map(|v| v.max(floor));
        let m = e.eigenvectors * Matrix2::from_diagonal(&vals) * e.eigenvectors.transpose();
        let _ = hi;
        (Cov2::from_matrix(&m), true)
    }
}

/// Inverts the position(/bias) FIM and returns the position block.
pub fn position_crlb(j: &DMatrix<f64>) -> Result<Cov2> {
    let dim = j.nrows();
    if !(dim == 2 || dim == 3) || j.ncols() != dim {
        return Err(invalid("position FIM must be 2x2 or 3x3"));
    }
    let s = jacobi_scales(j);
    let scaled = DMatrix::from_fn(dim, dim, |a, b| j[(a, b)] * s[a] * s[b]);
    let cond = condition(&scaled);
    if !(cond <= CONDITION_LIMIT) {
        return Err(Error::Unobservable { condition: cond });
    }
    let inv = scaled
        .cholesky()
        .ok_or(Error::Unobservable { condition: cond })?
        .inverse();
    let m = Matrix2::new(
        inv[(0, 0)] * s[0] * s[0],
        inv[(0, 1)] * s[0] * s[1],
        inv[(1, 0)] * s[1] * s[0],
        inv[(1, 1)] * s[1] * s[1],
    );
    Ok(Cov2::from_matrix(&m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrlbOptions {
    pub draws: usize,
    pub with_bias: bool,
    pub allow_pseudo_inverse: bool,
    pub mode: FimMode,
}

impl Default for CrlbOptions {
    fn default() -> Self {
        Self {
            draws: 200,
            with_bias: true,
            allow_pseudo_inverse: true,
            mode: FimMode::Blockform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrlbPoint {
    pub cov: Cov2,
    pub peb: f64,
    pub skipped: usize,
    pub pseudo_inverse_draws: usize,
}

/// Channel-averaged CRLB at grid point `point`: magnitudes come from the
/// environment, phases are redrawn uniformly for each of `opts.draws`
/// draws, and the conditional CRLBs are averaged.
pub fn averaged_crlb_peb(
    env: &EnvironmentMap,
    point: usize,
    sys: &SystemConfig,
    opts: &CrlbOptions,
    seed: u64,
) -> Result<CrlbPoint> {
    if opts.draws == 0 {
        return Err(invalid("need at least one FIM draw"));
    }
    if point >= env.grid.len() {
        return Err(invalid(format!("point index {point} out of range")));
    }
    let p = half_count(sys.subcarrier_count)?;
    let df = sys.subcarrier_spacing_hz();
    let cfg = &env.config;
    let (x, y) = env.grid.point_at(point);
    let ue = [x, y, cfg.ue_height];
    let bs: Vec<[f64; 3]> = cfg
        .base_stations
        .iter()
        .map(|b| [b.x, b.y, b.height])
        .collect();
    let links: Vec<(PathSet, DelayKernels)> = (0..env.bs_count())
        .map(|b| {
            let (_, ps) = nonresolvable_cluster(env.path_set(b, point), sys.bandwidth_hz);
            let ker = DelayKernels::new(ps.delays(), p, df);
            (ps, ker)
        })
        .collect();
    let mut rng = stream(seed, Purpose::FimDraws, point as u64, 0);
    let mut mean = [0.0f64; 3];
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut pinv = 0usize;
    for _ in 0..opts.draws {
        let mut je = Vec::with_capacity(links.len());
        let mut any_pinv = false;
        let mut failed = false;
        for (ps, ker) in &links {
            if ps.len() == 1 {
                // single path: no nuisance coupling and no phase dependence
                je.push(ker.fim(ps.amplitudes(), sys.tx_snr)[(0, 0)]);
                continue;
            }
            let amps: Vec<Complex64> = ps
                .amplitudes()
                .iter()
                .map(|a| Complex64::from_polar(a.norm(), rng.random_range(-PI..PI)))
                .collect();
            let j = match opts.mode {
                FimMode::Blockform => ker.fim(&amps, sys.tx_snr),
                FimMode::Numeric => {
                    let params = ChannelParams {
                        delays: ps.delays().to_vec(),
                        amplitudes: amps.clone(),
                    };
                    fim_numeric(&params, sys.tx_snr, p, df)
                }
            };
            let schur = equivalent_fim_toa(&j, true)
                .ok()
                .filter(|e| schur_is_reliable(e, j[(0, 0)]));
            let result = match schur {
                Some(e) => Ok(e),
                None => {
                    let params = ChannelParams {
                        delays: ps.delays().to_vec(),
                        amplitudes: amps,
                    };
                    equivalent_fi_projection(
                        &params,
                        sys.tx_snr,
                        sys.subcarrier_count,
                        df,
                        opts.allow_pseudo_inverse,
                    )
                }
            };
            match result {
                Ok(e) => {
                    any_pinv |= e.pseudo_inverse;
                    je.push(e.value);
                }
                Err(_) => {
                    failed = true;
                }
            }
        }
        let cov = if failed {
            None
        } else {
            fim_position(&je, &bs, ue, opts.with_bias)
                .and_then(|j| position_crlb(&j))
                .ok()
        };
        match cov {
            Some(c) => {
                used += 1;
                pinv += any_pinv as usize;
                // running mean, exact when every draw is identical
                let k = used as f64;
                mean[0] += (c.s11 - mean[0]) / k;
                mean[1] += (c.s12 - mean[1]) / k;
                mean[2] += (c.s22 - mean[2]) / k;
            }
            None => skipped += 1,
        }
    }
    if skipped as f64 > MAX_SKIPPED_FRACTION * opts.draws as f64 || used == 0 {
        return Err(Error::TooManySkipped {
            skipped,
            total: opts.draws,
        });
    }
    let cov = Cov2 {
        s11: mean[0],
        s12: mean[1],
        s22: mean[2],
    };
    Ok(CrlbPoint {
        cov,
        peb: cov.peb(),
        skipped,
        pseudo_inverse_draws: pinv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationKind {
    Constant,
    Crlb,
}

/// Per-grid-point position covariance. Points outside the evaluated set
/// hold `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationModel {
    pub grid: GridGeometry,
    pub kind: LocalizationKind,
    pub cov: Vec<Option<Cov2>>,
    pub skipped_draws: usize,
    pub pseudo_inverse_draws: usize,
}

impl LocalizationModel {
    /// `variance * I` at every grid point.
    pub fn constant(grid: &GridGeometry, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(invalid("localization variance must be positive"));
        }
        Ok(Self {
            grid: grid.clone(),
            kind: LocalizationKind::Constant,
            cov: vec![Some(Cov2::isotropic(variance)); grid.len()],
            skipped_draws: 0,
            pseudo_inverse_draws: 0,
        })
    }

    /// Channel-averaged CRLB at the given grid points.
    pub fn crlb(
        env: &EnvironmentMap,
        sys: &SystemConfig,
        points: &[usize],
        opts: &CrlbOptions,
        seed: u64,
    ) -> Result<Self> {
        let res: Result<Vec<(usize, CrlbPoint)>> = points
            .par_iter()
            .map(|&i| averaged_crlb_peb(env, i, sys, opts, seed).map(|c| (i, c)))
            .collect();
        let mut cov = vec![None; env.grid.len()];
        let mut skipped = 0;
        let mut pinv = 0;
        for (i, c) in res? {
            cov[i] = Some(c.cov);
            skipped += c.skipped;
            pinv += c.pseudo_inverse_draws;
        }
        Ok(Self {
            grid: env.grid.clone(),
            kind: LocalizationKind::Crlb,
            cov,
            skipped_draws: skipped,
            pseudo_inverse_draws: pinv,
        })
    }

    pub fn at(&self, point: usize) -> Result<Cov2> {
        self.cov
            .get(point)
            .copied()
            .flatten()
            .ok_or_else(|| invalid(format!("no localization covariance at point {point}")))
    }

    pub fn peb(&self, point: usize) -> Result<f64> {
        self.at(point).map(|c| c.peb())
    }

    /// Largest PEB among evaluated points.
    pub fn max_peb(&self) -> f64 {
        self.cov
            .iter()
            .flatten()
            .map(|c| c.peb())
            .fold(0.0, f64::max)
    }
}
