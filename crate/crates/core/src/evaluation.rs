//! Scoring at held-out points, full-grid imputation with a trained model,
//! classical baselines and per-location error breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{normalize, GridDataset, NormalizationStats};
use crate::error::{Error, Result};
use crate::masking::{apply_split, MaskSplit};
use crate::model::Model;
use crate::rng::Rng;
use crate::segmentation::{make_samples, reconstruct, ImputationResult, SegmentSpec};

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Metric("no evaluation points".into()));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Sum of absolute errors over sum of absolute truths, as a ratio.
pub fn mre(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let den: f64 = truth.iter().map(|t| t.abs()).sum();
    if den == 0.0 {
        return Err(Error::Metric("relative error undefined for all-zero truth".into()));
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(num / den)
}

/// Mean squared error.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandcoverGroup {
    pub label: i64,
    pub mae: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    /// Ratio; see `mre_percent` for the rounded percentage.
    pub mre: f64,
    pub mre_percent: f64,
    pub n_eval: usize,
    pub height: usize,
    pub width: usize,
    /// Per-location MAE, `None` where a location has no evaluation point.
    pub per_location: Vec<Option<f64>>,
    pub per_location_count: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landcover: Option<Vec<LandcoverGroup>>,
}

/// Scores a full-grid estimate (original units, `K x L`) against `truth` at
/// `points`. Points whose estimate is not finite are dropped with a warning.
pub fn score(
    estimate: &[f64],
    truth: &GridDataset,
    points: &[(usize, usize)],
) -> Result<MetricReport> {
    let (k, l) = (truth.num_locations(), truth.num_times());
    if estimate.len() != k * l {
        return Err(Error::shape("score", &[k, l], &[estimate.len()]));
    }
    let mut pred = Vec::with_capacity(points.len());
    let mut obs = Vec::with_capacity(points.len());
    let mut loc_sum = vec![0.0; k];
    let mut loc_n = vec![0usize; k];
    let mut dropped = 0;
    for &(s, t) in points {
        let e = estimate[s * l + t];
        if !e.is_finite() {
            dropped += 1;
            continue;
        }
        let y = truth.y[s * l + t];
        pred.push(e);
        obs.push(y);
        loc_sum[s] += (e - y).abs();
        loc_n[s] += 1;
    }
    if dropped > 0 {
        warn!("{dropped} evaluation points have no estimate and were not scored");
    }
    let mae_v = mae(&pred, &obs)?;
    let mre_v = mre(&pred, &obs)?;
    let per_location: Vec<Option<f64>> = (0..k)
        .map(|s| (loc_n[s] > 0).then(|| loc_sum[s] / loc_n[s] as f64))
        .collect();
    let landcover = truth.landcover.as_ref().map(|lc| {
        let mut groups: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
        for s in 0..k {
            if loc_n[s] > 0 {
                let g = groups.entry(lc[s]).or_default();
                g.0 += loc_sum[s];
                g.1 += loc_n[s];
            }
        }
        groups
            .into_iter()
            .map(|(label, (sum, count))| LandcoverGroup {
                label,
                mae: sum / count as f64,
                count,
            })
            .collect()
    });
    Ok(MetricReport {
        mae: mae_v,
        mre: mre_v,
        mre_percent: (mre_v * 10000.0).round() / 100.0,
        n_eval: pred.len(),
        height: truth.height,
        width: truth.width,
        per_location,
        per_location_count: loc_n,
        landcover,
    })
}

/// Runs the model over every sample of an already normalized visible
/// dataset and averages overlapping predictions. Output is in original units.
pub fn impute(
    model: &Model,
    visible_norm: &GridDataset,
    stats: &NormalizationStats,
    segment: &SegmentSpec,
) -> Result<ImputationResult> {
    let samples = make_samples(visible_norm, segment)?;
    let preds: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| model.predict(s))
        .collect::<Result<_>>()?;
    let mut out = reconstruct(
        &samples,
        &preds,
        visible_norm.height,
        visible_norm.width,
        visible_norm.num_times(),
    )?;
    out.estimate.iter_mut().for_each(|v| *v = stats.denormalize(*v));
    Ok(out)
}

/// Imputes with `split.cond` as the visibility mask and scores the held-out
/// points. Held-out values are erased before the model runs.
pub fn evaluate_model(
    truth: &GridDataset,
    split: &MaskSplit,
    model: &Model,
    stats: &NormalizationStats,
    segment: &SegmentSpec,
) -> Result<(MetricReport, ImputationResult)> {
    let visible = apply_split(truth, split)?;
    let (norm, _) = normalize(&visible, Some(stats));
    let result = impute(model, &norm, stats, segment)?;
    let report = score(&result.estimate, truth, &split.eval_points)?;
    Ok((report, result))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Per-location monthly mean.
    Mean,
    /// Linear interpolation in time.
    Interp,
    /// Low-rank matrix factorization.
    Mf,
}

/// Per (location, month) mean of visible values, falling back to the
/// location mean and then the global mean.
pub fn monthly_mean_estimate(ds: &GridDataset, visible: &[bool]) -> Result<Vec<f64>> {
    let (k, l) = (ds.num_locations(), ds.num_times());
    let months = ds.months();
    let (mut gsum, mut gn) = (0.0, 0usize);
    let mut out = vec![0.0; k * l];
    let mut per_loc = Vec::with_capacity(k);
    for s in 0..k {
        let mut msum = [0.0; 13];
        let mut mn = [0usize; 13];
        for t in 0..l {
            if visible[s * l + t] {
                let v = ds.y[s * l + t];
                msum[months[t] as usize] += v;
                mn[months[t] as usize] += 1;
                gsum += v;
                gn += 1;
            }
        }
        per_loc.push((msum, mn));
    }
    if gn == 0 {
        return Err(Error::Metric("no visible values for the monthly mean".into()));
    }
    let global = gsum / gn as f64;
    for (s, (msum, mn)) in per_loc.iter().enumerate() {
        let total: usize = mn.iter().sum();
        let loc_mean = if total > 0 {
            msum.iter().sum::<f64>() / total as f64
        } else {
            global
        };
        for t in 0..l {
            let m = months[t] as usize;
            out[s * l + t] = if mn[m] > 0 { msum[m] / mn[m] as f64 } else { loc_mean };
        }
    }
    Ok(out)
}

/// Linear interpolation in time between visible values, copying the nearest
/// visible value beyond the ends. Locations with nothing visible get NaN.
pub fn linear_interpolation_estimate(ds: &GridDataset, visible: &[bool]) -> Vec<f64> {
    let (k, l) = (ds.num_locations(), ds.num_times());
    let mut out = vec![f64::NAN; k * l];
    let mut empty = 0;
    for s in 0..k {
        let known: Vec<usize> = (0..l).filter(|&t| visible[s * l + t]).collect();
        if known.is_empty() {
            empty += 1;
            continue;
        }
        let val = |t: usize| ds.y[s * l + t];
        let x = |t: usize| ds.times[t] as f64;
        let mut next = 0;
        for t in 0..l {
            while next < known.len() && known[next] < t {
                next += 1;
            }
            out[s * l + t] = if next < known.len() && known[next] == t {
                val(t)
            } else if next == 0 {
                val(known[0])
            } else if next == known.len() {
                val(known[known.len() - 1])
            } else {
                let (a, b) = (known[next - 1], known[next]);
                let w = (x(t) - x(a)) / (x(b) - x(a));
                val(a) + w * (val(b) - val(a))
            };
        }
    }
    if empty > 0 {
        warn!("{empty} locations have no visible value and were skipped by interpolation");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfConfig {
    pub rank: usize,
    pub lambda: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            rank: 10,
            lambda: 0.1,
            iters: 100,
            seed: 0,
        }
    }
}

/// Solves `(A + lambda I) x = b`, falling back to a pseudo-inverse when the
/// system is singular.
fn ridge_solve(mut a: DMatrix<f64>, b: DVector<f64>, lambda: f64) -> DVector<f64> {
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    if let Some(ch) = a.clone().cholesky() {
        return ch.solve(&b);
    }
    a.svd(true, true)
        .solve(&b, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(b.len()))
}

fn mf_objective(
    y: &[f64],
    visible: &[bool],
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    lambda: f64,
    l: usize,
) -> f64 {
    let mut obj = 0.0;
    for (i, &vis) in visible.iter().enumerate() {
        if vis {
            let (s, t) = (i / l, i % l);
            let r = y[i] - u.row(s).dot(&v.row(t));
            obj += r * r;
        }
    }
    obj + lambda * (u.norm_squared() + v.norm_squared())
}

/// Alternating ridge least squares on the visible entries of the `K x L`
/// target matrix. Returns the reconstruction `U V^T` and the objective after
/// each full sweep.
pub fn matrix_factorization_estimate(
    ds: &GridDataset,
    visible: &[bool],
    cfg: &MfConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if cfg.rank == 0 {
        return Err(Error::Config("factorization rank must be at least 1".into()));
    }
    let (k, l, r) = (ds.num_locations(), ds.num_times(), cfg.rank);
    let mut rng = Rng::new(cfg.seed);
    let mut u = DMatrix::from_fn(k, r, |_, _| 0.1 * rng.normal());
    let mut v = DMatrix::from_fn(l, r, |_, _| 0.1 * rng.normal());
    let rows: Vec<Vec<usize>> = (0..k).map(|s| (0..l).filter(|&t| visible[s * l + t]).collect()).collect();
    let cols: Vec<Vec<usize>> = (0..l).map(|t| (0..k).filter(|&s| visible[s * l + t]).collect()).collect();
    let mut history = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        for s in 0..k {
            let mut a = DMatrix::zeros(r, r);
            let mut b = DVector::zeros(r);
            for &t in &rows[s] {
                let vt = v.row(t).transpose();
                a += &vt * vt.transpose();
                b += vt * ds.y[s * l + t];
            }
            let x = ridge_solve(a, b, cfg.lambda);
            u.set_row(s, &x.transpose());
        }
        for t in 0..l {
            let mut a = DMatrix::zeros(r, r);
            let mut b = DVector::zeros(r);
            for &s in &cols[t] {
                let us = u.row(s).transpose();
                a += &us * us.transpose();
                b += us * ds.y[s * l + t];
            }
            let x = ridge_solve(a, b, cfg.lambda);
            v.set_row(t, &x.transpose());
        }
        history.push(mf_objective(&ds.y, visible, &u, &v, cfg.lambda, l));
    }
    let full = &u * v.transpose();
    let est = (0..k * l).map(|i| full[(i / l, i % l)]).collect();
    Ok((est, history))
}

/// Estimate of a baseline under `split`, in original units.
pub fn baseline_estimate(ds: &GridDataset, split: &MaskSplit, which: Baseline, mf: &MfConfig) -> Result<Vec<f64>> {
    let visible = &split.cond;
    match which {
        Baseline::Mean => monthly_mean_estimate(ds, visible),
        Baseline::Interp => Ok(linear_interpolation_estimate(ds, visible)),
        Baseline::Mf => Ok(matrix_factorization_estimate(ds, visible, mf)?.0),
    }
}

pub fn baseline_monthly_mean(ds: &GridDataset, split: &MaskSplit) -> Result<MetricReport> {
    score(&monthly_mean_estimate(ds, &split.cond)?, ds, &split.eval_points)
}

pub fn baseline_linear_interpolation(ds: &GridDataset, split: &MaskSplit) -> Result<MetricReport> {
    score(&linear_interpolation_estimate(ds, &split.cond), ds, &split.eval_points)
}

pub fn baseline_matrix_factorization(ds: &GridDataset, split: &MaskSplit, cfg: &MfConfig) -> Result<MetricReport> {
    let (est, _) = matrix_factorization_estimate(ds, &split.cond, cfg)?;
    score(&est, ds, &split.eval_points)
}

/// Per-location CSV `row,col,mae,count,landcover`; locations without
/// evaluation points leave `mae` empty.
pub fn spatial_error_csv(report: &MetricReport, landcover: Option<&[i64]>) -> String {
    let mut out = String::from("row,col,mae,count,landcover\n");
    for (s, m) in report.per_location.iter().enumerate() {
        let mae = m.map(|v| format!("{v}")).unwrap_or_default();
        let lc = landcover.map(|lc| lc[s].to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s / report.width,
            s % report.width,
            mae,
            report.per_location_count[s],
            lc
        );
    }
    out
}

/// Per-land-cover CSV `landcover,mae,count`.
pub fn landcover_csv(report: &MetricReport) -> Option<String> {
    report.landcover.as_ref().map(|groups| {
        let mut out = String::from("landcover,mae,count\n");
        for g in groups {
            let _ = writeln!(out, "{},{},{}", g.label, g.mae, g.count);
        }
        out
    })
}
