//! Grid datasets on disk and in memory.
//!
//! A dataset is a JSON manifest plus raw little-endian `f32` array files.
//! Arrays are row-major with location-major ordering: location index
//! `row * width + col`, then time, then feature. Masks are stored as 0.0/1.0.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_EPOCH: &str = "2016-01-01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Real-valued covariate, standardized by [`normalize`].
    Continuous,
    /// One column of an expanded categorical covariate.
    OneHot,
    /// Missing-value indicator appended by [`augment_missing_indicators`].
    Indicator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub cell_size_km: f64,
    pub times_file: String,
    pub y_file: String,
    pub m_file: String,
    pub x_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_file: Option<String>,
    pub feature_names: Vec<String>,
    #[serde(default)]
    pub categorical_features: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landcover_file: Option<String>,
    /// Calendar date of day index 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<String>,
    /// Per-feature kinds; absent means every non-categorical feature is continuous.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_kinds: Option<Vec<FeatureKind>>,
}

/// Observed target `y` over a `K x L` grid with covariates `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDataset {
    pub height: usize,
    pub width: usize,
    /// Day indices, strictly increasing.
    pub times: Vec<i64>,
    /// `K x L`; entries where `m` is false are zero and never read.
    pub y: Vec<f64>,
    /// `K x L`, true = observed.
    pub m: Vec<bool>,
    /// `K x L x D`, zero wherever `z` is set.
    pub x: Vec<f64>,
    /// `K x L x D`, true = covariate value missing.
    pub z: Vec<bool>,
    pub feature_names: Vec<String>,
    pub feature_kinds: Vec<FeatureKind>,
    pub cell_size_km: f64,
    pub landcover: Option<Vec<i64>>,
    pub epoch: NaiveDate,
}

impl GridDataset {
    pub fn num_locations(&self) -> usize {
        self.height * self.width
    }

    pub fn num_times(&self) -> usize {
        self.times.len()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    #[inline]
    pub fn cell(&self, loc: usize, t: usize) -> usize {
        loc * self.times.len() + t
    }

    /// Normalized `(row, col)` in `[0, 1]^2` per location.
    pub fn coords(&self) -> Vec<[f64; 2]> {
        let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        (0..self.num_locations())
            .map(|s| [norm(s / self.width, self.height), norm(s % self.width, self.width)])
            .collect()
    }

    /// Calendar month (1..=12) of each time index.
    pub fn months(&self) -> Vec<u32> {
        self.times
            .iter()
            .map(|&d| (self.epoch + chrono::Duration::days(d)).month())
            .collect()
    }

    /// Features whose value never changes over time at any location.
    pub fn static_features(&self) -> Vec<bool> {
        let (k, l, d) = (self.num_locations(), self.num_times(), self.num_features());
        (0..d)
            .map(|f| {
                (0..k).all(|s| {
                    let first = self.x[(s * l) * d + f];
                    (0..l).all(|t| self.x[(s * l + t) * d + f] == first)
                })
            })
            .collect()
    }

    /// Indices of features an indicator or one-hot column belongs to, mapping
    /// each column to the continuous/categorical base it was derived from.
    pub fn base_feature(&self, f: usize) -> usize {
        if self.feature_kinds[f] == FeatureKind::Indicator {
            let base = self.feature_names[f].trim_end_matches("_missing");
            if let Some(i) = self.feature_names.iter().position(|n| n == base) {
                return i;
            }
        }
        f
    }

    pub fn validate(&self) -> Result<()> {
        let (k, l, d) = (self.num_locations(), self.num_times(), self.num_features());
        let check_len = |name: &str, got: usize, want: usize| {
            if got != want {
                Err(Error::Load {
                    array: name.into(),
                    reason: format!("expected {want} values, found {got}"),
                })
            } else {
                Ok(())
            }
        };
        check_len("Y", self.y.len(), k * l)?;
        check_len("M", self.m.len(), k * l)?;
        check_len("X", self.x.len(), k * l * d)?;
        check_len("Z", self.z.len(), k * l * d)?;
        check_len("feature_kinds", self.feature_kinds.len(), d)?;
        if let Some(lc) = &self.landcover {
            check_len("landcover", lc.len(), k)?;
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Load {
                array: "times".into(),
                reason: "day indices must be strictly increasing".into(),
            });
        }
        if let Some(i) = (0..k * l).find(|&i| self.m[i] && !self.y[i].is_finite()) {
            return Err(Error::Load {
                array: "Y".into(),
                reason: format!("non-finite observed value at flat index {i}"),
            });
        }
        if let Some(i) = (0..k * l * d).find(|&i| !self.z[i] && !self.x[i].is_finite()) {
            return Err(Error::Load {
                array: "X".into(),
                reason: format!("non-finite covariate at flat index {i}"),
            });
        }
        Ok(())
    }
}

pub fn read_f32(dir: &Path, name: &str, array: &str) -> Result<Vec<f32>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Load {
            array: array.into(),
            reason: format!("{} bytes is not a whole number of f32 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn expect_len(array: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Load {
            array: array.into(),
            reason: format!("expected {want} values, found {got}"),
        })
    }
}

fn parse_mask(array: &str, raw: &[f32]) -> Result<Vec<bool>> {
    raw.iter()
        .enumerate()
        .map(|(i, &v)| match v {
            v if v == 1.0 => Ok(true),
            v if v == 0.0 => Ok(false),
            _ => Err(Error::Load {
                array: array.into(),
                reason: format!("mask value {v} at flat index {i} is not 0 or 1"),
            }),
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Loads and validates the dataset described by the manifest at `manifest_path`.
pub fn load_dataset(manifest_path: &Path) -> Result<GridDataset> {
    let man = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    if man.format_version != FORMAT_VERSION {
        return Err(Error::Load {
            array: "manifest".into(),
            reason: format!("unsupported format_version {}", man.format_version),
        });
    }
    let k = man.height * man.width;
    let raw_times = read_f32(dir, &man.times_file, "times")?;
    let l = raw_times.len();
    let times: Vec<i64> = raw_times.iter().map(|&t| t as i64).collect();
    if raw_times.iter().zip(&times).any(|(&r, &t)| r as f64 != t as f64) {
        return Err(Error::Load {
            array: "times".into(),
            reason: "day indices must be integers".into(),
        });
    }

    let raw_y = read_f32(dir, &man.y_file, "Y")?;
    expect_len("Y", raw_y.len(), k * l)?;
    let m = parse_mask("M", &read_f32(dir, &man.m_file, "M")?)?;
    expect_len("M", m.len(), k * l)?;
    let mut y = Vec::with_capacity(k * l);
    for (i, (&v, &obs)) in raw_y.iter().zip(&m).enumerate() {
        if obs && !v.is_finite() {
            return Err(Error::Load {
                array: "Y".into(),
                reason: format!("non-finite observed value at flat index {i}"),
            });
        }
        y.push(if obs { v as f64 } else { 0.0 });
    }

    let d_raw = man.feature_names.len();
    let raw_x = read_f32(dir, &man.x_file, "X")?;
    expect_len("X", raw_x.len(), k * l * d_raw)?;
    let raw_z = match &man.z_file {
        Some(f) => {
            let z = parse_mask("Z", &read_f32(dir, f, "Z")?)?;
            expect_len("Z", z.len(), k * l * d_raw)?;
            Some(z)
        }
        None => None,
    };

    for c in &man.categorical_features {
        if !man.feature_names.contains(c) {
            return Err(Error::Load {
                array: "categorical_features".into(),
                reason: format!("unknown feature {c}"),
            });
        }
    }
    let declared_kinds = match &man.feature_kinds {
        Some(kinds) => {
            expect_len("feature_kinds", kinds.len(), d_raw)?;
            kinds.clone()
        }
        None => vec![FeatureKind::Continuous; d_raw],
    };

    // Expand categorical columns to one-hot blocks; everything else passes through.
    enum Col {
        Plain(usize),
        Level(usize, f32),
    }
    let mut cols = Vec::new();
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    for (f, name) in man.feature_names.iter().enumerate() {
        if man.categorical_features.contains(name) {
            let levels: BTreeSet<i64> = (0..k * l)
                .map(|i| raw_x[i * d_raw + f])
                .filter(|v| v.is_finite())
                .map(|v| v as i64)
                .collect();
            for lv in levels {
                cols.push(Col::Level(f, lv as f32));
                names.push(format!("{name}={lv}"));
                kinds.push(FeatureKind::OneHot);
            }
        } else {
            cols.push(Col::Plain(f));
            names.push(name.clone());
            kinds.push(declared_kinds[f]);
        }
    }
    let d = cols.len();
    let mut x = vec![0.0; k * l * d];
    let mut z = vec![false; k * l * d];
    for i in 0..k * l {
        for (c, col) in cols.iter().enumerate() {
            let f = match col {
                Col::Plain(f) | Col::Level(f, _) => *f,
            };
            let v = raw_x[i * d_raw + f];
            let missing = !v.is_finite() || raw_z.as_ref().is_some_and(|rz| rz[i * d_raw + f]);
            if missing {
                z[i * d + c] = true;
                continue;
            }
            x[i * d + c] = match col {
                Col::Plain(_) => v as f64,
                Col::Level(_, lv) => f64::from(u8::from(v.round() == *lv)),
            };
        }
    }

    let landcover = match &man.landcover_file {
        Some(f) => {
            let lc = read_f32(dir, f, "landcover")?;
            expect_len("landcover", lc.len(), k)?;
            Some(lc.iter().map(|&v| v as i64).collect())
        }
        None => None,
    };
    let epoch_str = man.epoch.as_deref().unwrap_or(DEFAULT_EPOCH);
    let epoch = NaiveDate::parse_from_str(epoch_str, "%Y-%m-%d").map_err(|e| Error::Load {
        array: "epoch".into(),
        reason: format!("{epoch_str}: {e}"),
    })?;

    let ds = GridDataset {
        height: man.height,
        width: man.width,
        times,
        y,
        m,
        x,
        z,
        feature_names: names,
        feature_kinds: kinds,
        cell_size_km: man.cell_size_km,
        landcover,
        epoch,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `ds` as `<dir>/manifest.json` plus array files; returns the manifest path.
///
/// Values are stored as `f32`, so `load_dataset(save_dataset(d))` reproduces `d`
/// exactly whenever its values are `f32`-representable.
pub fn save_dataset(ds: &GridDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let b = |v: bool| if v { 1.0f32 } else { 0.0 };
    write_f32(&dir.join("times.f32"), ds.times.iter().map(|&t| t as f32))?;
    write_f32(&dir.join("y.f32"), ds.y.iter().map(|&v| v as f32))?;
    write_f32(&dir.join("m.f32"), ds.m.iter().map(|&v| b(v)))?;
    write_f32(&dir.join("x.f32"), ds.x.iter().map(|&v| v as f32))?;
    write_f32(&dir.join("z.f32"), ds.z.iter().map(|&v| b(v)))?;
    if let Some(lc) = &ds.landcover {
        write_f32(&dir.join("landcover.f32"), lc.iter().map(|&v| v as f32))?;
    }
    let man = Manifest {
        format_version: FORMAT_VERSION,
        height: ds.height,
        width: ds.width,
        cell_size_km: ds.cell_size_km,
        times_file: "times.f32".into(),
        y_file: "y.f32".into(),
        m_file: "m.f32".into(),
        x_file: "x.f32".into(),
        z_file: Some("z.f32".into()),
        feature_names: ds.feature_names.clone(),
        categorical_features: Vec::new(),
        landcover_file: ds.landcover.as_ref().map(|_| "landcover.f32".into()),
        epoch: Some(ds.epoch.format("%Y-%m-%d").to_string()),
        feature_kinds: Some(ds.feature_kinds.clone()),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&man).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Appends one indicator column per existing feature, `[X; Z]` along the feature axis.
pub fn augment_missing_indicators(ds: &GridDataset) -> GridDataset {
    let (n, d) = (ds.num_locations() * ds.num_times(), ds.num_features());
    let mut x = Vec::with_capacity(n * 2 * d);
    let mut z = Vec::with_capacity(n * 2 * d);
    for i in 0..n {
        x.extend_from_slice(&ds.x[i * d..(i + 1) * d]);
        x.extend(ds.z[i * d..(i + 1) * d].iter().map(|&m| f64::from(u8::from(m))));
        z.extend_from_slice(&ds.z[i * d..(i + 1) * d]);
        z.extend(std::iter::repeat_n(false, d));
    }
    let mut out = ds.clone();
    out.x = x;
    out.z = z;
    out.feature_names
        .extend(ds.feature_names.iter().map(|n| format!("{n}_missing")));
    out.feature_kinds
        .extend(std::iter::repeat_n(FeatureKind::Indicator, d));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub target_mean: f64,
    pub target_std: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    // constant input must give exactly zero spread, not rounding residue
    if v.iter().all(|&x| x == v[0]) {
        return Some((v[0], 0.0));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl NormalizationStats {
    /// Statistics over observed entries. The target uses `visible` when given
    /// (e.g. the training mask after a validation split), otherwise `m`.
    pub fn fit(ds: &GridDataset, visible: Option<&[bool]>) -> Self {
        let vis = visible.unwrap_or(&ds.m);
        let (mut tm, mut ts) = mean_std((0..ds.y.len()).filter(|&i| vis[i]).map(|i| ds.y[i]))
            .unwrap_or((0.0, 1.0));
        if ts <= 0.0 || !ts.is_finite() {
            warn!("target has zero variance over observed entries; using stddev 1");
            ts = 1.0;
        }
        if !tm.is_finite() {
            tm = 0.0;
        }
        let d = ds.num_features();
        let n = ds.num_locations() * ds.num_times();
        let mut feature_mean = vec![0.0; d];
        let mut feature_std = vec![1.0; d];
        for f in 0..d {
            if ds.feature_kinds[f] != FeatureKind::Continuous {
                continue;
            }
            let obs = (0..n).filter(|&i| !ds.z[i * d + f]).map(|i| ds.x[i * d + f]);
            if let Some((mu, sd)) = mean_std(obs) {
                feature_mean[f] = mu;
                if sd > 0.0 {
                    feature_std[f] = sd;
                } else {
                    warn!("feature {} has zero variance; using stddev 1", ds.feature_names[f]);
                }
            }
        }
        Self {
            target_mean: tm,
            target_std: ts,
            feature_mean,
            feature_std,
        }
    }

    #[inline]
    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.target_std + self.target_mean
    }

    #[inline]
    pub fn normalize_target(&self, v: f64) -> f64 {
        (v - self.target_mean) / self.target_std
    }
}

/// Standardizes the target and continuous features. Reuses `stats` when given,
/// otherwise fits them on `ds`. Missing covariates stay zero (the feature mean).
pub fn normalize(
    ds: &GridDataset,
    stats: Option<&NormalizationStats>,
) -> (GridDataset, NormalizationStats) {
    let stats = stats.cloned().unwrap_or_else(|| NormalizationStats::fit(ds, None));
    let mut out = ds.clone();
    for (v, &obs) in out.y.iter_mut().zip(&ds.m) {
        *v = if obs { stats.normalize_target(*v) } else { 0.0 };
    }
    let d = ds.num_features();
    for (i, v) in out.x.iter_mut().enumerate() {
        let f = i % d;
        if ds.z[i] {
            *v = 0.0;
        } else if ds.feature_kinds[f] == FeatureKind::Continuous {
            *v = (*v - stats.feature_mean[f]) / stats.feature_std[f];
        }
    }
    (out, stats)
}

/// Maps normalized target values back to original units.
pub fn denormalize(values: &[f64], stats: &NormalizationStats) -> Vec<f64> {
    values.iter().map(|&v| stats.denormalize(v)).collect()
}
