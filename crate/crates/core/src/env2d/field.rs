//! Stationary Gaussian random fields on a grid.
//!
//! Small grids use the exact Cholesky factor of the covariance, with a
//! diagonal nugget that escalates until the factorization succeeds. Large
//! grids use a Vecchia approximation: in raster order, each point is drawn
//! from its conditional distribution given its nearest previously drawn
//! neighbours.

use super::grid::GridGeometry;
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Purpose};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Largest grid factorized exactly.
pub const CHOLESKY_MAX_POINTS: usize = 10_000;
pub const VECCHIA_NEIGHBORS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// variance * exp(-r / length)
    Exponential { variance: f64, length: f64 },
    /// variance * exp(-r^2 / scale), with `scale` in m^2
    SquaredExponential { variance: f64, scale: f64 },
}

impl Kernel {
    pub fn variance(&self) -> f64 {
        match *self {
            Kernel::Exponential { variance, .. } | Kernel::SquaredExponential { variance, .. } => {
                variance
            }
        }
    }

    pub fn cov(&self, r: f64) -> f64 {
        match *self {
            Kernel::Exponential { variance, length } => variance * (-r / length).exp(),
            Kernel::SquaredExponential { variance, scale } => variance * (-r * r / scale).exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        let (v, l) = match *self {
            Kernel::Exponential { variance, length } => (variance, length),
            Kernel::SquaredExponential { variance, scale } => (variance, scale),
        };
        if !(v >= 0.0 && l > 0.0 && v.is_finite() && l.is_finite()) {
            return Err(invalid(
                "kernel needs nonnegative variance and positive length",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldMethod {
    Auto,
    Cholesky,
    Vecchia { neighbors: usize },
}

#[derive(Debug, Clone)]
enum Factor {
    Zero,
    Cholesky(DMatrix<f64>),
    Vecchia {
        neighbors: Vec<Vec<usize>>,
        weights: Vec<Vec<f64>>,
        sd: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct GaussianField {
    n: usize,
    factor: Factor,
    nugget: f64,
}

/// Cholesky with a nugget escalating from 0 through 1e-12 .. 1e-3 times the
/// diagonal scale. Returns the factor and the nugget used.
fn robust_cholesky(mut a: DMatrix<f64>, scale: f64) -> Result<(DMatrix<f64>, f64)> {
    let mut nugget = 0.0;
    let mut rel = 1e-12;
    loop {
        if let Some(c) = a.clone().cholesky() {
            return Ok((c.l(), nugget));
        }
        if rel > 1e-3 {
            return Err(Error::Domain(
                "covariance not factorizable within nugget budget".into(),
            ));
        }
        let add = rel * scale - nugget;
        for i in 0..a.nrows() {
            a[(i, i)] += add;
        }
        nugget = rel * scale;
        rel *= 10.0;
    }
}

impl GaussianField {
    pub fn new(grid: &GridGeometry, kernel: Kernel) -> Result<Self> {
        Self::with_method(grid, kernel, FieldMethod::Auto)
    }

    pub fn with_method(grid: &GridGeometry, kernel: Kernel, method: FieldMethod) -> Result<Self> {
        kernel.validate()?;
        let n = grid.len();
        if kernel.variance() == 0.0 {
            return Ok(Self {
                n,
                factor: Factor::Zero,
                nugget: 0.0,
            });
        }
        let method = match method {
            FieldMethod::Auto if n <= CHOLESKY_MAX_POINTS => FieldMethod::Cholesky,
            FieldMethod::Auto => FieldMethod::Vecchia {
                neighbors: VECCHIA_NEIGHBORS,
            },
            m => m,
        };
        let pts = grid.points();
        let dist = |i: usize, j: usize| {
            let (a, b) = (pts[i], pts[j]);
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
        };
        match method {
            FieldMethod::Cholesky | FieldMethod::Auto => {
                let cov = DMatrix::from_fn(n, n, |i, j| kernel.cov(dist(i, j)));
                let (l, nugget) = robust_cholesky(cov, kernel.variance())?;
                Ok(Self {
                    n,
                    factor: Factor::Cholesky(l),
                    nugget,
                })
            }
            FieldMethod::Vecchia { neighbors: m } => {
                if m == 0 {
                    return Err(invalid("Vecchia needs at least one neighbour"));
                }
                let w = ((m as f64).sqrt().ceil() as usize) + 2;
                let mut all_nb = Vec::with_capacity(n);
                let mut all_w = Vec::with_capacity(n);
                let mut sd = Vec::with_capacity(n);
                let mut max_nugget: f64 = 0.0;
                for i in 0..n {
                    let (ix, iy) = grid.coords(i);
                    let mut cand: Vec<(f64, usize)> = Vec::new();
                    for jy in iy.saturating_sub(w)..=iy {
                        for jx in ix.saturating_sub(w)..(ix + w + 1).min(grid.nx) {
                            let j = grid.index(jx, jy);
                            if j < i {
                                cand.push((dist(i, j), j));
                            }
                        }
                    }
                    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    cand.truncate(m);
                    let nb: Vec<usize> = cand.iter().map(|c| c.1).collect();
                    if nb.is_empty() {
                        all_nb.push(nb);
                        all_w.push(Vec::new());
                        sd.push(kernel.variance().sqrt());
                        continue;
                    }
                    let k = nb.len();
                    let cnn = DMatrix::from_fn(k, k, |a, b| kernel.cov(dist(nb[a], nb[b])));
                    let cni = DVector::from_fn(k, |a, _| kernel.cov(dist(nb[a], i)));
                    let (l, nug) = robust_cholesky(cnn, kernel.variance())?;
                    max_nugget = max_nugget.max(nug);
                    let chol = nalgebra::Cholesky::pack_dirty(l);
                    let b = chol.solve(&cni);
                    let var = (kernel.variance() - b.dot(&cni)).max(0.0);
                    all_nb.push(nb);
                    all_w.push(b.iter().copied().collect());
                    sd.push(var.sqrt());
                }
                Ok(Self {
                    n,
                    factor: Factor::Vecchia {
                        neighbors: all_nb,
                        weights: all_w,
                        sd,
                    },
                    nugget: max_nugget,
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Diagonal regularization that was needed to factorize the covariance.
    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self.factor, Factor::Vecchia { .. })
    }

    /// One realization. White noise for point `i` comes from the stream
    /// `(seed, purpose, i, realization)`.
    pub fn sample(&self, seed: u64, purpose: Purpose, realization: u64) -> Vec<f64> {
        let white: Vec<f64> = (0..self.n)
            .map(|i| stream(seed, purpose, i as u64, realization).sample(StandardNormal))
            .collect();
        self.color(&white)
    }

    /// Maps white noise to a correlated field.
    pub fn color(&self, white: &[f64]) -> Vec<f64> {
        match &self.factor {
            Factor::Zero => vec![0.0; self.n],
            Factor::Cholesky(l) => {
                let mut out = vec![0.0; self.n];
                // lower-triangular product, row by row
                for (i, o) in out.iter_mut().enumerate() {
                    let row = l.row(i);
                    let mut s = 0.0;
                    for j in 0..=i {
                        s += row[j] * white[j];
                    }
                    *o = s;
                }
                out
            }
            Factor::Vecchia {
                neighbors,
                weights,
                sd,
            } => {
                let mut out = vec![0.0; self.n];
                for i in 0..self.n {
                    let mean: f64 = neighbors[i]
                        .iter()
                        .zip(&weights[i])
                        .map(|(&j, &w)| w * out[j])
                        .sum();
                    out[i] = mean + sd[i] * white[i];
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lag_covariance(
        field: &GaussianField,
        grid: &GridGeometry,
        lag_steps: usize,
        reps: u64,
    ) -> (f64, f64) {
        let mut prod = 0.0;
        let mut sq = 0.0;
        let mut np = 0usize;
        let mut ns = 0usize;
        for r in 0..reps {
            let f = field.sample(11, Purpose::Test, r);
            for iy in 0..grid.ny {
                for ix in 0..grid.nx {
                    let v = f[grid.index(ix, iy)];
                    sq += v * v;
                    ns += 1;
                    if ix + lag_steps < grid.nx {
                        prod += v * f[grid.index(ix + lag_steps, iy)];
                        np += 1;
                    }
                }
            }
        }
        (sq / ns as f64, prod / np as f64)
    }

    #[test]
    fn exponential_field_covariance_at_decorrelation_distance() {
        // sigma = 4 dB, d_c = 10 m, spacing 2.5 m: lag d_c is four steps.
        let grid = GridGeometry::plain(0.0, 0.0, 2.5, 12, 12).unwrap();
        let k = Kernel::Exponential {
            variance: 16.0,
            length: 10.0,
        };
        let f = GaussianField::new(&grid, k).unwrap();
        assert!(f.is_exact());
        let (var, cov) = lag_covariance(&f, &grid, 4, 400);
        assert!((var - 16.0).abs() / 16.0 < 0.05, "var {var}");
        let want = 16.0 * (-1.0f64).exp();
        assert!((cov - want).abs() / want < 0.1, "cov {cov} vs {want}");
    }

    #[test]
    fn vecchia_matches_kernel() {
        let grid = GridGeometry::plain(0.0, 0.0, 2.5, 14, 14).unwrap();
        let k = Kernel::Exponential {
            variance: 16.0,
            length: 10.0,
        };
        let f =
            GaussianField::with_method(&grid, k, FieldMethod::Vecchia { neighbors: 20 }).unwrap();
        assert!(!f.is_exact());
        let (var, cov) = lag_covariance(&f, &grid, 4, 400);
        assert!((var - 16.0).abs() / 16.0 < 0.05, "var {var}");
        let want = 16.0 * (-1.0f64).exp();
        assert!((cov - want).abs() / want < 0.1, "cov {cov} vs {want}");
    }

    #[test]
    fn squared_exponential_field_needs_and_reports_nugget() {
        let grid = GridGeometry::plain(0.0, 0.0, 1.0, 15, 15).unwrap();
        let k = Kernel::SquaredExponential {
            variance: 1.0,
            scale: 100.0,
        };
        let f = GaussianField::new(&grid, k).unwrap();
        assert!(f.nugget() > 0.0 && f.nugget() <= 1e-3);
        let (var, cov) = lag_covariance(&f, &grid, 5, 200);
        assert!((var - 1.0).abs() < 0.1, "var {var}");
        let want = (-25.0f64 / 100.0).exp();
        assert!((cov - want).abs() < 0.1, "cov {cov} vs {want}");
    }

    #[test]
    fn zero_variance_field_is_zero() {
        let grid = GridGeometry::plain(0.0, 0.0, 1.0, 3, 3).unwrap();
        let f = GaussianField::new(
            &grid,
            Kernel::Exponential {
                variance: 0.0,
                length: 1.0,
            },
        )
        .unwrap();
        assert!(f.sample(1, Purpose::Test, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn samples_are_reproducible() {
        let grid = GridGeometry::plain(0.0, 0.0, 1.0, 6, 6).unwrap();
        let f = GaussianField::new(
            &grid,
            Kernel::Exponential {
                variance: 2.0,
                length: 3.0,
            },
        )
        .unwrap();
        assert_eq!(
            f.sample(5, Purpose::Shadowing, 2),
            f.sample(5, Purpose::Shadowing, 2)
        );
        assert_ne!(
            f.sample(5, Purpose::Shadowing, 2),
            f.sample(5, Purpose::Shadowing, 3)
        );
    }
}
