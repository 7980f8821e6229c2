//! Diagnostics on outage-capacity maps: coherence radius, peak/valley
//! detection, correlation fits and box-plot summaries.

use crate::env2d::OutageCapacityMap;
use crate::error::{invalid, Error, Result};
use crate::samples::lower_order_statistic;
use serde::{Deserialize, Serialize};

/// Grid offsets `(dx, dy, distance)` sorted by distance, up to `radius`.
fn offsets_by_distance(spacing: f64, radius: f64) -> Vec<(i64, i64, f64)> {
    let k = (radius / spacing).floor() as i64 + 1;
    let mut out = Vec::new();
    for dy in -k..=k {
        for dx in -k..=k {
            let d = spacing * ((dx * dx + dy * dy) as f64).sqrt();
            if d <= radius {
                out.push((dx, dy, d));
            }
        }
    }
    out.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    out
}

/// Smallest disk radius around grid point `point` whose grid points include
/// one with `|C(x) - C(z)| / C(x) > t`. The radius is the distance of that
/// point; disks are searched only while they fit inside the map.
pub fn coherence_radius_2d(map: &OutageCapacityMap, point: usize, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(invalid("threshold t must be positive"));
    }
    let g = &map.grid;
    if point >= g.len() {
        return Err(invalid(format!("point index {point} out of range")));
    }
    let (ix, iy) = g.coords(point);
    if !g.is_in_cell(ix, iy) {
        return Err(invalid(format!("point {point} is not in the cell")));
    }
    let c0 = map.values[point];
    if !(c0 > 0.0) {
        return Err(Error::Domain(format!(
            "zero outage capacity at point {point}"
        )));
    }
    let steps = ix.min(iy).min(g.nx - 1 - ix).min(g.ny - 1 - iy);
    let limit = steps as f64 * g.spacing;
    for (dx, dy, d) in offsets_by_distance(g.spacing, limit) {
        let z = g.index((ix as i64 + dx) as usize, (iy as i64 + dy) as usize);
        if (c0 - map.values[z]).abs() / c0 > t {
            return Ok(d);
        }
    }
    Err(Error::CoherenceRadiusExceedsMap { searched_m: limit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremaSet {
    /// Grid indices of local maxima.
    pub peaks: Vec<usize>,
    /// Grid indices of local minima.
    pub valleys: Vec<usize>,
    pub neighborhood_radius: f64,
    pub prominence: f64,
}

/// In-cell local extrema. A peak is strictly above every grid point within
/// `radius` and exceeds the largest value on the outer ring
/// `(radius - spacing, radius]` by at least `prominence * C(x)`; valleys
/// mirror this.
pub fn detect_extrema(map: &OutageCapacityMap, radius: f64, prominence: f64) -> Result<ExtremaSet> {
    let g = &map.grid;
    if !(radius >= g.spacing * (1.0 - 1e-12)) {
        return Err(invalid(format!(
            "neighborhood radius {radius} is below the grid spacing {}",
            g.spacing
        )));
    }
    if !(prominence >= 0.0) {
        return Err(invalid("prominence must be nonnegative"));
    }
    let offsets: Vec<(i64, i64, f64)> = offsets_by_distance(g.spacing, radius)
        .into_iter()
        .filter(|o| o.2 > 0.0)
        .collect();
    let ring_start = radius - g.spacing;
    let mut peaks = Vec::new();
    let mut valleys = Vec::new();
    for i in g.in_cell_indices() {
        let (ix, iy) = g.coords(i);
        let c = map.values[i];
        let (mut above, mut below) = (true, true);
        let (mut ring_max, mut ring_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &(dx, dy, d) in &offsets {
            let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
            if jx < 0 || jy < 0 || jx >= g.nx as i64 || jy >= g.ny as i64 {
                continue;
            }
            let v = map.values[g.index(jx as usize, jy as usize)];
            above &= c > v;
            below &= c < v;
            if d > ring_start {
                ring_max = ring_max.max(v);
                ring_min = ring_min.min(v);
            }
            if !above && !below {
                break;
            }
        }
        let margin = prominence * c.abs();
        if above && c - ring_max >= margin {
            peaks.push(i);
        } else if below && ring_min - c >= margin {
            valleys.push(i);
        }
    }
    Ok(ExtremaSet {
        peaks,
        valleys,
        neighborhood_radius: radius,
        prominence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub rho: f64,
    pub slope: f64,
    pub intercept: f64,
    pub count: usize,
}

/// Pearson correlation and least-squares line `y = slope x + intercept`.
pub fn pearson_and_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(invalid(format!(
            "{} x values for {} y values",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 3 {
        return Err(invalid("need at least three points"));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    // The rounded mean of equal values can differ from them, so compare directly.
    if !(sxx > 0.0) || xs.iter().all(|&x| x == xs[0]) {
        return Err(Error::UndefinedCorrelation(
            "x values have zero variance".into(),
        ));
    }
    if !(syy > 0.0) || ys.iter().all(|&y| y == ys[0]) {
        return Err(Error::UndefinedCorrelation(
            "y values have zero variance".into(),
        ));
    }
    let slope = sxy / sxx;
    let rho = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(LinearFit {
        rho,
        slope,
        intercept: my - slope * mx,
        count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub alpha: f64,
    pub q_alpha: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub q_one_minus_alpha: f64,
    pub count: usize,
}

/// Box-plot quantiles by the lower order statistic `x_(max(1, floor(p n)))`.
pub fn boxplot_stats(values: &[f64], alpha: f64) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(invalid("no values"));
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(invalid(format!("alpha must lie in (0, 0.5), got {alpha}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(invalid("values must not be NaN"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| lower_order_statistic(&sorted, p).expect("nonempty and p in [0,1]");
    Ok(BoxStats {
        alpha,
        q_alpha: q(alpha),
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        q_one_minus_alpha: q(1.0 - alpha),
        count: sorted.len(),
    })
}
