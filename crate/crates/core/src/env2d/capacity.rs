use super::generator::EnvironmentMap;
use super::grid::GridGeometry;
use crate::channel::{freq_response, PathSet, SubcarrierIndexing, SystemConfig};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Purpose};
use crate::samples::{empirical_outage_capacity, CapacitySamples};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use std::f64::consts::{LN_2, PI};

fn uniform_phase<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(-PI..PI)
}

/// Draws `K` iid phases uniform on `[-pi, pi)` and returns the frequency
/// response on subcarriers `0..N`.
pub fn fading_realization<R: Rng>(
    paths: &PathSet,
    rng: &mut R,
    cfg: &SystemConfig,
) -> Result<Vec<Complex64>> {
    let phases: Vec<f64> = (0..paths.len()).map(|_| uniform_phase(rng)).collect();
    freq_response(paths, &phases, cfg, SubcarrierIndexing::ZeroBased)
}

/// Precomputed per-path phasors `a_k exp(-2 pi i df j tau_k)` for fast
/// repeated fading draws. Consumes the random stream exactly like
/// [`fading_realization`].
#[derive(Debug, Clone)]
pub struct FadingSampler {
    k: usize,
    n: usize,
    table: Vec<Complex64>,
    tx_snr: f64,
}

impl FadingSampler {
    pub fn new(paths: &PathSet, cfg: &SystemConfig) -> Result<Self> {
        let k = paths.len();
        let n = cfg.subcarrier_count;
        let mut table = Vec::with_capacity(k * n);
        for i in 0..k {
            let single = PathSet::new(vec![paths.amplitudes()[i]], vec![paths.delays()[i]])?;
            table.extend(freq_response(
                &single,
                &[0.0],
                cfg,
                SubcarrierIndexing::ZeroBased,
            )?);
        }
        Ok(Self {
            k,
            n,
            table,
            tx_snr: cfg.tx_snr,
        })
    }

    pub fn response<R: Rng>(&self, rng: &mut R, out: &mut [Complex64]) {
        out.iter_mut().for_each(|h| *h = Complex64::new(0.0, 0.0));
        for row in self.table.chunks_exact(self.n) {
            let r = Complex64::from_polar(1.0, uniform_phase(rng));
            for (h, e) in out.iter_mut().zip(row) {
                *h += r * e;
            }
        }
    }

    /// Capacity of one fading draw. A single path has a phase-independent
    /// magnitude, so the draw still consumes one phase but the capacity is
    /// evaluated from `|a|^2` directly.
    pub fn capacity<R: Rng>(&self, rng: &mut R, scratch: &mut [Complex64]) -> f64 {
        if self.k == 1 {
            let _ = uniform_phase(rng);
            let g = self.tx_snr * self.table[0].norm_sqr();
            return self.n as f64 * g.ln_1p() / LN_2;
        }
        self.response(rng, scratch);
        scratch
            .iter()
            .map(|h| (self.tx_snr * h.norm_sqr()).ln_1p())
            .sum::<f64>()
            / LN_2
    }
}

/// `m` independent capacity draws, sorted.
pub fn capacity_samples<R: Rng>(
    paths: &PathSet,
    cfg: &SystemConfig,
    m: usize,
    rng: &mut R,
) -> Result<CapacitySamples> {
    if m == 0 {
        return Err(invalid("need at least one capacity sample"));
    }
    let sampler = FadingSampler::new(paths, cfg)?;
    let mut scratch = vec![Complex64::new(0.0, 0.0); cfg.subcarrier_count];
    let vals: Vec<f64> = (0..m)
        .map(|_| sampler.capacity(rng, &mut scratch))
        .collect();
    CapacitySamples::new(vals)
}

/// Capacity samples at one grid point, from the stream
/// `(seed, Fading, point, bs)`. Calling it twice yields identical samples.
pub fn point_capacity_samples(
    env: &EnvironmentMap,
    bs: usize,
    point: usize,
    cfg: &SystemConfig,
    m: usize,
    seed: u64,
) -> Result<CapacitySamples> {
    if bs >= env.bs_count() {
        return Err(invalid(format!("base station index {bs} out of range")));
    }
    if point >= env.grid.len() {
        return Err(invalid(format!("point index {point} out of range")));
    }
    let mut rng = stream(seed, Purpose::Fading, point as u64, bs as u64);
    capacity_samples(env.path_set(bs, point), cfg, m, &mut rng)
}

/// Epsilon-outage capacity per grid point of the padded map.
#[derive(Debug, Clone, PartialEq)]
pub struct OutageCapacityMap {
    pub grid: GridGeometry,
    pub values: Vec<f64>,
    pub eps: f64,
    pub sample_count: usize,
}

impl OutageCapacityMap {
    pub fn new(
        grid: GridGeometry,
        values: Vec<f64>,
        eps: f64,
        sample_count: usize,
    ) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "{} values for {} grid points",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("map values must be finite and nonnegative"));
        }
        Ok(Self {
            grid,
            values,
            eps,
            sample_count,
        })
    }

    /// Map from a closed-form function of position.
    pub fn from_fn(grid: GridGeometry, eps: f64, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..grid.len())
            .map(|i| {
                let (x, y) = grid.point_at(i);
                f(x, y)
            })
            .collect();
        Self::new(grid, values, eps, 0)
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.grid.index(ix, iy)]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Bilinear interpolation; errors outside the padded map.
    pub fn bilinear(&self, x: f64, y: f64) -> Result<f64> {
        self.grid.check_contains(x, y)?;
        let g = &self.grid;
        let (fx, fy) = g.fractional(x, y);
        let cell = |f: f64, n: usize| -> (usize, f64) {
            if n == 1 {
                return (0, 0.0);
            }
            let i = (f.floor().max(0.0) as usize).min(n - 2);
            (i, (f - i as f64).clamp(0.0, 1.0))
        };
        let (ix, tx) = cell(fx, g.nx);
        let (iy, ty) = cell(fy, g.ny);
        let ix1 = (ix + 1).min(g.nx - 1);
        let iy1 = (iy + 1).min(g.ny - 1);
        let v00 = self.value(ix, iy);
        let v10 = self.value(ix1, iy);
        let v01 = self.value(ix, iy1);
        let v11 = self.value(ix1, iy1);
        Ok((1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11))
    }
}

/// Empirical epsilon-outage capacity at every grid point for one BS.
pub fn outage_capacity_map(
    env: &EnvironmentMap,
    bs: usize,
    cfg: &SystemConfig,
    m: usize,
    seed: u64,
) -> Result<OutageCapacityMap> {
    let eps = cfg.reliability_target;
    if eps * (m as f64) < 1.0 {
        return Err(Error::InsufficientSamples {
            eps_m: eps * m as f64,
        });
    }
    let values: Result<Vec<f64>> = (0..env.grid.len())
        .into_par_iter()
        .map(|i| {
            let s = point_capacity_samples(env, bs, i, cfg, m, seed)?;
            empirical_outage_capacity(&s, eps)
        })
        .collect();
    OutageCapacityMap::new(env.grid.clone(), values?, eps, m)
}
