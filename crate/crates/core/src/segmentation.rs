//! Tile x window segmentation and overlap-averaged reassembly.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataio::GridDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub window_len: usize,
    pub stride: usize,
    pub tile: usize,
}

impl Default for SegmentSpec {
    fn default() -> Self {
        Self {
            window_len: 72,
            stride: 12,
            tile: 12,
        }
    }
}

/// One spatial tile over one temporal window.
///
/// Per-cell arrays are `tile_k x window_len`, location-major, with locations
/// in row-major order inside the tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tile_origin: (usize, usize),
    pub tile_h: usize,
    pub tile_w: usize,
    pub window_start: usize,
    pub window_len: usize,
    pub y: Vec<f64>,
    /// Entries the sample may read (`M` restricted to the tile and window).
    pub m: Vec<bool>,
    /// Conditioning mask `M°` shown to the model; always `<= m`.
    pub m_cond: Vec<bool>,
    /// `tile_k x window_len x num_features`.
    pub x: Vec<f64>,
    pub num_features: usize,
    /// Global normalized coordinates per tile location.
    pub coords: Vec<[f64; 2]>,
    grid_width: usize,
}

impl Sample {
    pub fn tile_k(&self) -> usize {
        self.tile_h * self.tile_w
    }

    /// Global location index of tile location `i`.
    pub fn global_location(&self, i: usize) -> usize {
        let (r0, c0) = self.tile_origin;
        (r0 + i / self.tile_w) * self.grid_width + c0 + i % self.tile_w
    }

    /// Number of loss targets, entries with `m = 1` and `m_cond = 0`.
    pub fn num_targets(&self) -> usize {
        self.m.iter().zip(&self.m_cond).filter(|(&a, &b)| a && !b).count()
    }

    pub fn num_visible(&self) -> usize {
        self.m_cond.iter().filter(|&&v| v).count()
    }
}

/// Window ranges of `length` with the given stride, plus a flush tail window
/// when the strided windows stop short of `l`.
pub fn temporal_windows(l: usize, length: usize, stride: usize) -> Result<Vec<Range<usize>>> {
    if length == 0 || stride == 0 {
        return Err(Error::Contract("window length and stride must be positive".into()));
    }
    if length > l {
        return Err(Error::Contract(format!(
            "window length {length} exceeds series length {l}"
        )));
    }
    let mut out: Vec<Range<usize>> = (0..=(l - length) / stride)
        .map(|i| i * stride..i * stride + length)
        .collect();
    if out.last().is_some_and(|r| r.end < l) {
        out.push(l - length..l);
    }
    Ok(out)
}

fn axis_origins(extent: usize, tile: usize) -> Vec<usize> {
    let mut o: Vec<usize> = (0..extent / tile).map(|i| i * tile).collect();
    if extent % tile != 0 {
        o.push(extent - tile);
    }
    o
}

/// Row-major tile origins on a regular lattice; a non-divisible axis gets a
/// final tile anchored flush to the boundary.
pub fn spatial_tiles(height: usize, width: usize, tile: usize) -> Result<Vec<(usize, usize)>> {
    if tile == 0 || tile > height || tile > width {
        return Err(Error::Contract(format!(
            "tile {tile} does not fit a {height}x{width} grid"
        )));
    }
    let rows = axis_origins(height, tile);
    let cols = axis_origins(width, tile);
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

/// Cuts `ds` into one sample per (window, tile) pair, window-major.
/// The conditioning mask starts equal to `ds.m`.
pub fn make_samples(ds: &GridDataset, spec: &SegmentSpec) -> Result<Vec<Sample>> {
    let windows = temporal_windows(ds.num_times(), spec.window_len, spec.stride)?;
    let tiles = spatial_tiles(ds.height, ds.width, spec.tile)?;
    let coords = ds.coords();
    let (l, d) = (ds.num_times(), ds.num_features());
    let mut out = Vec::with_capacity(windows.len() * tiles.len());
    for w in &windows {
        for &(r0, c0) in &tiles {
            let wl = w.len();
            let tk = spec.tile * spec.tile;
            let mut s = Sample {
                tile_origin: (r0, c0),
                tile_h: spec.tile,
                tile_w: spec.tile,
                window_start: w.start,
                window_len: wl,
                y: Vec::with_capacity(tk * wl),
                m: Vec::with_capacity(tk * wl),
                m_cond: Vec::new(),
                x: Vec::with_capacity(tk * wl * d),
                num_features: d,
                coords: Vec::with_capacity(tk),
                grid_width: ds.width,
            };
            for i in 0..tk {
                let loc = s.global_location(i);
                s.coords.push(coords[loc]);
                let base = loc * l;
                s.y.extend_from_slice(&ds.y[base + w.start..base + w.end]);
                s.m.extend_from_slice(&ds.m[base + w.start..base + w.end]);
                s.x.extend_from_slice(&ds.x[(base + w.start) * d..(base + w.end) * d]);
            }
            s.m_cond = s.m.clone();
            out.push(s);
        }
    }
    Ok(out)
}

/// Full-grid estimate with the number of predictions averaged into each cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationResult {
    pub height: usize,
    pub width: usize,
    pub num_times: usize,
    /// `K x L`.
    pub estimate: Vec<f64>,
    pub counts: Vec<u32>,
}

/// Averages per-sample predictions (each `tile_k x window_len`) onto the grid.
pub fn reconstruct(
    samples: &[Sample],
    predictions: &[Vec<f64>],
    height: usize,
    width: usize,
    num_times: usize,
) -> Result<ImputationResult> {
    if samples.len() != predictions.len() {
        return Err(Error::Contract(format!(
            "{} samples but {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    let n = height * width * num_times;
    let mut sum = vec![0.0; n];
    let mut counts = vec![0u32; n];
    for (s, p) in samples.iter().zip(predictions) {
        if p.len() != s.tile_k() * s.window_len {
            return Err(Error::shape(
                "reconstruct",
                &[s.tile_k(), s.window_len],
                &[p.len()],
            ));
        }
        for i in 0..s.tile_k() {
            let loc = s.global_location(i);
            for t in 0..s.window_len {
                let cell = loc * num_times + s.window_start + t;
                sum[cell] += p[i * s.window_len + t];
                counts[cell] += 1;
            }
        }
    }
    let uncovered: Vec<usize> = (0..n).filter(|&c| counts[c] == 0).collect();
    if let Some(&first) = uncovered.first() {
        return Err(Error::Uncovered {
            count: uncovered.len(),
            location: first / num_times,
            time: first % num_times,
        });
    }
    let estimate = sum
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / f64::from(c))
        .collect();
    Ok(ImputationResult {
        height,
        width,
        num_times,
        estimate,
        counts,
    })
}
