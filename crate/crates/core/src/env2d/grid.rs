use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};

/// Regular square grid over the padded map.
///
/// Points are stored in raster order (`index = iy * nx + ix`). The in-cell
/// block is `[inner_x0, inner_x0 + inner_nx) x [inner_y0, inner_y0 + inner_ny)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin_x: f64,
    pub origin_y: f64,
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
    pub inner_x0: usize,
    pub inner_y0: usize,
    pub inner_nx: usize,
    pub inner_ny: usize,
}

impl GridGeometry {
    /// Grid covering `[x_lo, x_hi] x [y_lo, y_hi]` with `margin` of padding
    /// on every side, rounded up to whole grid steps.
    pub fn for_cell(
        x_lo: f64,
        x_hi: f64,
        y_lo: f64,
        y_hi: f64,
        spacing: f64,
        margin: f64,
    ) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(invalid("grid spacing must be positive"));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(invalid("margin must be nonnegative"));
        }
        if !(x_hi > x_lo && y_hi > y_lo) {
            return Err(invalid("cell must have positive extent"));
        }
        let count = |lo: f64, hi: f64| ((hi - lo) / spacing + 1e-9).floor() as usize + 1;
        let inner_nx = count(x_lo, x_hi);
        let inner_ny = count(y_lo, y_hi);
        let pad = (margin / spacing - 1e-9).ceil().max(0.0) as usize;
        Ok(Self {
            origin_x: x_lo - pad as f64 * spacing,
            origin_y: y_lo - pad as f64 * spacing,
            spacing,
            nx: inner_nx + 2 * pad,
            ny: inner_ny + 2 * pad,
            inner_x0: pad,
            inner_y0: pad,
            inner_nx,
            inner_ny,
        })
    }

    /// Grid without padding where every point is in-cell.
    pub fn plain(origin_x: f64, origin_y: f64, spacing: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(spacing > 0.0) || nx == 0 || ny == 0 {
            return Err(invalid("grid needs positive spacing and extent"));
        }
        Ok(Self {
            origin_x,
            origin_y,
            spacing,
            nx,
            ny,
            inner_x0: 0,
            inner_y0: 0,
            inner_nx: nx,
            inner_ny: ny,
        })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.nx, index / self.nx)
    }

    pub fn point(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin_x + ix as f64 * self.spacing,
            self.origin_y + iy as f64 * self.spacing,
        )
    }

    pub fn point_at(&self, index: usize) -> (f64, f64) {
        let (ix, iy) = self.coords(index);
        self.point(ix, iy)
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| self.point_at(i)).collect()
    }

    pub fn padding_steps(&self) -> usize {
        self.inner_x0.min(self.inner_y0)
    }

    pub fn is_in_cell(&self, ix: usize, iy: usize) -> bool {
        ix >= self.inner_x0
            && ix < self.inner_x0 + self.inner_nx
            && iy >= self.inner_y0
            && iy < self.inner_y0 + self.inner_ny
    }

    /// Raster-ordered indices of in-cell points.
    pub fn in_cell_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.inner_nx * self.inner_ny);
        for iy in self.inner_y0..self.inner_y0 + self.inner_ny {
            for ix in self.inner_x0..self.inner_x0 + self.inner_nx {
                out.push(self.index(ix, iy));
            }
        }
        out
    }

    pub fn x_max(&self) -> f64 {
        self.origin_x + (self.nx - 1) as f64 * self.spacing
    }

    pub fn y_max(&self) -> f64 {
        self.origin_y + (self.ny - 1) as f64 * self.spacing
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.origin_x && x <= self.x_max() && y >= self.origin_y && y <= self.y_max()
    }

    pub fn check_contains(&self, x: f64, y: f64) -> Result<()> {
        if self.contains(x, y) {
            Ok(())
        } else {
            Err(Error::OutOfMap { x, y })
        }
    }

    /// Continuous grid coordinates of `(x, y)`.
    pub fn fractional(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.spacing,
            (y - self.origin_y) / self.spacing,
        )
    }

    /// Nearest grid point, clamped to the map.
    pub fn nearest(&self, x: f64, y: f64) -> (usize, usize) {
        let (fx, fy) = self.fractional(x, y);
        let clamp = |f: f64, n: usize| f.round().clamp(0.0, (n - 1) as f64) as usize;
        (clamp(fx, self.nx), clamp(fy, self.ny))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_geometry() {
        let g = GridGeometry::for_cell(-50.0, 50.0, -50.0, 50.0, 100.0 / 24.0, 31.8).unwrap();
        assert_eq!((g.inner_nx, g.inner_ny), (25, 25));
        assert_eq!(g.inner_x0, 8);
        assert_eq!(g.nx, 41);
        let (x, y) = g.point(g.inner_x0, g.inner_y0);
        assert!((x + 50.0).abs() < 1e-12 && (y + 50.0).abs() < 1e-12);
        let (x, _) = g.point(g.inner_x0 + 24, 0);
        assert!((x - 50.0).abs() < 1e-12);
        assert_eq!(g.in_cell_indices().len(), 625);
    }

    #[test]
    fn fine_geometry_and_zero_margin() {
        let g = GridGeometry::for_cell(-50.0, 50.0, -50.0, 50.0, 1.42, 0.0).unwrap();
        assert_eq!(g.inner_nx, 71);
        assert_eq!(g.nx, 71);
        assert_eq!(g.padding_steps(), 0);
    }

    #[test]
    fn nearest_and_contains() {
        let g = GridGeometry::plain(0.0, 0.0, 1.0, 5, 5).unwrap();
        assert_eq!(g.nearest(1.4, 2.6), (1, 3));
        assert_eq!(g.nearest(-3.0, 9.0), (0, 4));
        assert!(g.contains(4.0, 0.0));
        assert!(!g.contains(4.01, 0.0));
        assert!(matches!(
            g.check_contains(-1.0, 0.0),
            Err(Error::OutOfMap { .. })
        ));
        assert_eq!(g.coords(g.index(3, 2)), (3, 2));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(GridGeometry::for_cell(0.0, 1.0, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(GridGeometry::for_cell(0.0, 1.0, 0.0, 1.0, 0.1, -1.0).is_err());
        assert!(GridGeometry::for_cell(1.0, 0.0, 0.0, 1.0, 0.1, 0.0).is_err());
    }
}
