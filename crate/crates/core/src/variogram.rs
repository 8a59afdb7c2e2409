//! Tile-size selection from the spatial correlation of regression residuals.

use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureKind, GridDataset};
use crate::error::{Error, Result};

pub const RIDGE_FALLBACK: f64 = 1e-8;
pub const DEFAULT_REL_TOL: f64 = 0.05;

/// Per-location regression residuals, `K x L`, `None` where the target is
/// not visible or the location was skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Residuals {
    pub num_locations: usize,
    pub num_times: usize,
    pub values: Vec<Option<f64>>,
    /// Locations with too few visible observations to fit.
    pub skipped: Vec<usize>,
}

/// Least squares through the normal equations, adding a small ridge when the
/// Gram matrix is numerically singular. Returns the coefficients and whether
/// the ridge was needed.
pub fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, bool) {
    let gram = design.transpose() * design;
    let rhs = design.transpose() * y;
    if let Some(ch) = gram.clone().cholesky() {
        let diag: Vec<f64> = ch.l_dirty().diagonal().iter().map(|d| d * d).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > 1e-12 * max {
            return (ch.solve(&rhs), false);
        }
    }
    let n = gram.nrows();
    let ridged = gram + DMatrix::identity(n, n) * RIDGE_FALLBACK;
    let beta = match ridged.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => ridged
            .svd(true, true)
            .solve(&rhs, 1e-14)
            .unwrap_or_else(|_| DVector::zeros(n)),
    };
    (beta, true)
}

/// Fits `Y ~ 1 + X` by ordinary least squares at every location over its
/// visible cells and returns `Y - fit` there. Indicator columns are not used,
/// and columns constant over a location's visible cells are dropped since the
/// intercept already spans them.
pub fn location_residuals(ds: &GridDataset, visible: Option<&[bool]>) -> Result<Residuals> {
    let (k, l, d) = (ds.num_locations(), ds.num_times(), ds.num_features());
    if let Some(v) = visible {
        if v.len() != k * l {
            return Err(Error::shape("location_residuals", &[k, l], &[v.len()]));
        }
    }
    let usable: Vec<usize> = (0..d)
        .filter(|&f| ds.feature_kinds[f] != FeatureKind::Indicator)
        .collect();
    let fits: Vec<(Vec<Option<f64>>, bool, bool)> = (0..k)
        .into_par_iter()
        .map(|s| {
            let times: Vec<usize> = (0..l)
                .filter(|&t| ds.m[s * l + t] && visible.is_none_or(|v| v[s * l + t]))
                .collect();
            let xval = |t: usize, f: usize| ds.x[(s * l + t) * d + f];
            let cols: Vec<usize> = usable
                .iter()
                .copied()
                .filter(|&f| times.iter().any(|&t| xval(t, f) != xval(times[0], f)))
                .collect();
            let mut out = vec![None; l];
            if times.is_empty() || times.len() <= cols.len() {
                return (out, true, false);
            }
            let design = DMatrix::from_fn(times.len(), cols.len() + 1, |r, c| {
                if c == 0 {
                    1.0
                } else {
                    xval(times[r], cols[c - 1])
                }
            });
            let y = DVector::from_iterator(times.len(), times.iter().map(|&t| ds.y[s * l + t]));
            let (beta, ridged) = least_squares(&design, &y);
            let fit = &design * beta;
            for (r, &t) in times.iter().enumerate() {
                out[t] = Some(y[r] - fit[r]);
            }
            (out, false, ridged)
        })
        .collect();
    let mut values = Vec::with_capacity(k * l);
    let mut skipped = Vec::new();
    let mut ridged = 0;
    for (s, (v, skip, r)) in fits.into_iter().enumerate() {
        values.extend(v);
        if skip {
            skipped.push(s);
        }
        ridged += r as usize;
    }
    if ridged > 0 {
        warn!("{ridged} locations had a rank-deficient design; ridge {RIDGE_FALLBACK} applied");
    }
    if !skipped.is_empty() {
        warn!("{} locations skipped: not enough visible observations", skipped.len());
    }
    Ok(Residuals {
        num_locations: k,
        num_times: l,
        values,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Semivariogram {
    pub bin_width_km: f64,
    /// `num_bins + 1` edges; bin `i` covers `[edges[i], edges[i + 1])`.
    pub edges: Vec<f64>,
    /// Semivariance per bin, `None` for bins without pairs.
    pub gamma: Vec<Option<f64>>,
    pub pairs: Vec<u64>,
}

impl Semivariogram {
    pub fn num_bins(&self) -> usize {
        self.gamma.len()
    }

    /// Lag of bin `i`, taken as its lower edge.
    pub fn lag(&self, i: usize) -> f64 {
        self.edges[i]
    }

    /// `(lag, gamma)` of populated bins.
    pub fn populated(&self) -> Vec<(f64, f64)> {
        (0..self.num_bins())
            .filter_map(|i| self.gamma[i].map(|g| (self.lag(i), g)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lag_km,gamma,pairs\n");
        for i in 0..self.num_bins() {
            let g = self.gamma[i].map(|g| g.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", self.lag(i), g, self.pairs[i]);
        }
        out
    }
}

/// Grid `(row, col)` of each location, in cells.
pub fn grid_coords(height: usize, width: usize) -> Vec<[f64; 2]> {
    (0..height * width)
        .map(|s| [(s / width) as f64, (s % width) as f64])
        .collect()
}

const OUT_OF_RANGE: u32 = u32::MAX;

fn bin_of(dist: f64, width: f64, num_bins: usize, max_lag: f64) -> u32 {
    if dist > max_lag * (1.0 + 1e-12) {
        return OUT_OF_RANGE;
    }
    let b = (dist / width + 1e-9).floor() as usize;
    if b >= num_bins {
        OUT_OF_RANGE
    } else {
        b as u32
    }
}

/// Matheron semivariogram of `residuals` (`K x L`), with pairs binned by
/// distance in km and pooled across time slices by pair count. `coords` are
/// in cells. The lag range defaults to half the largest pairwise distance.
pub fn empirical_semivariogram(
    residuals: &Residuals,
    coords: &[[f64; 2]],
    cell_size_km: f64,
    bin_width_km: f64,
    max_lag_km: Option<f64>,
) -> Result<Semivariogram> {
    let (k, l) = (residuals.num_locations, residuals.num_times);
    if coords.len() != k || residuals.values.len() != k * l {
        return Err(Error::shape("empirical_semivariogram", &[k, l], &[coords.len(), residuals.values.len()]));
    }
    if !(bin_width_km > 0.0) || !(cell_size_km > 0.0) {
        return Err(Error::Config("bin width and cell size must be positive".into()));
    }
    let dist = |i: usize, j: usize| {
        let dr = coords[i][0] - coords[j][0];
        let dc = coords[i][1] - coords[j][1];
        cell_size_km * (dr * dr + dc * dc).sqrt()
    };
    let max_lag = match max_lag_km {
        Some(m) => m,
        None => {
            let mut far: f64 = 0.0;
            for i in 0..k {
                for j in i + 1..k {
                    far = far.max(dist(i, j));
                }
            }
            far / 2.0
        }
    };
    if !(max_lag > 0.0) {
        return Err(Error::Contract("semivariogram needs at least two distinct locations".into()));
    }
    let num_bins = (max_lag / bin_width_km + 1e-9).floor() as usize + 1;
    let mut bins = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            bins.push(bin_of(dist(i, j), bin_width_km, num_bins, max_lag));
        }
    }
    let slices: Vec<(Vec<f64>, Vec<u64>)> = (0..l)
        .into_par_iter()
        .map(|t| {
            let mut sum = vec![0.0; num_bins];
            let mut cnt = vec![0u64; num_bins];
            let mut p = 0;
            for i in 0..k {
                let ri = residuals.values[i * l + t];
                for j in i + 1..k {
                    let b = bins[p];
                    p += 1;
                    if b == OUT_OF_RANGE {
                        continue;
                    }
                    if let (Some(a), Some(c)) = (ri, residuals.values[j * l + t]) {
                        sum[b as usize] += (a - c) * (a - c);
                        cnt[b as usize] += 1;
                    }
                }
            }
            (sum, cnt)
        })
        .collect();
    let mut sum = vec![0.0; num_bins];
    let mut pairs = vec![0u64; num_bins];
    for (s, c) in &slices {
        for b in 0..num_bins {
            sum[b] += s[b];
            pairs[b] += c[b];
        }
    }
    if pairs.iter().all(|&c| c == 0) {
        return Err(Error::Contract("no location pairs share a time slice".into()));
    }
    let gamma = (0..num_bins)
        .map(|b| (pairs[b] > 0).then(|| sum[b] / (2.0 * pairs[b] as f64)))
        .collect();
    Ok(Semivariogram {
        bin_width_km,
        edges: (0..=num_bins).map(|i| i as f64 * bin_width_km).collect(),
        gamma,
        pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeEstimate {
    pub range_km: f64,
    pub sill: f64,
    /// False when the semivariance never settles before the largest lags.
    pub plateau: bool,
}

/// Sill is the mean semivariance over the top quartile of populated lags;
/// range is the smallest lag from which every populated bin stays within
/// `rel_tol` of it. A range inside the top quartile counts as no plateau and
/// the largest lag is returned.
pub fn detect_range(vg: &Semivariogram, rel_tol: f64) -> Result<RangeEstimate> {
    let pts = vg.populated();
    if pts.is_empty() {
        return Err(Error::Contract("semivariogram has no populated bins".into()));
    }
    let n = pts.len();
    let tail = n.div_ceil(4);
    let sill = pts[n - tail..].iter().map(|p| p.1).sum::<f64>() / tail as f64;
    let level = (1.0 - rel_tol) * sill;
    let mut start = n;
    while start > 0 && pts[start - 1].1 >= level {
        start -= 1;
    }
    let max_lag = pts[n - 1].0;
    if start >= n - tail && tail < n {
        warn!("no plateau: semivariance keeps rising up to {max_lag} km");
        return Ok(RangeEstimate {
            range_km: max_lag,
            sill,
            plateau: false,
        });
    }
    if start == n {
        warn!("no plateau: final lag is below the sill level");
        return Ok(RangeEstimate {
            range_km: max_lag,
            sill,
            plateau: false,
        });
    }
    Ok(RangeEstimate {
        range_km: pts[start].0,
        sill,
        plateau: true,
    })
}

/// Tile side in cells for a correlation range: the nearest multiple of 4,
/// at least 4, so 4-cell windows tile it exactly.
pub fn recommend_tile(range_km: f64, cell_size_km: f64) -> usize {
    let cells = range_km / cell_size_km;
    (((cells / 4.0).round() as usize) * 4).max(4)
}
