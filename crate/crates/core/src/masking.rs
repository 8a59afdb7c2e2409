//! Missingness injection for validation splits and self-supervised targets.
//!
//! Two mechanisms: MNAR hides whole time slices (every location at a chosen
//! time), MCAR hides individual observed entries uniformly at random.

use std::fs;
use std::path::Path;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::dataio::GridDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::segmentation::Sample;

/// Candidate hiding proportions for per-sample training masks.
pub const TRAINING_PROPORTIONS: [f64; 3] = [0.2, 0.5, 0.8];

/// Default validation hiding proportion.
pub const DEFAULT_VALIDATION_P: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Mnar,
    Mcar,
}

/// Round-half-up hidden count.
pub fn hidden_count(p: f64, eligible: usize) -> usize {
    (p * eligible as f64 + 0.5).floor() as usize
}

/// Conditioning mask `M°` and the evaluation points it hides.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSplit {
    pub num_locations: usize,
    pub num_times: usize,
    /// `K x L`, true = visible to the model.
    pub cond: Vec<bool>,
    /// `(location, time)` pairs with `M = 1` and `M° = 0`, sorted.
    pub eval_points: Vec<(usize, usize)>,
}

impl MaskSplit {
    /// Builds the split from `m` and the points to hide; points must be observed.
    pub fn from_eval_points(
        m: &[bool],
        num_locations: usize,
        num_times: usize,
        mut points: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if m.len() != num_locations * num_times {
            return Err(Error::shape("split", &[num_locations, num_times], &[m.len()]));
        }
        points.sort_unstable();
        points.dedup();
        let mut cond = m.to_vec();
        for &(s, t) in &points {
            if s >= num_locations || t >= num_times || !m[s * num_times + t] {
                return Err(Error::Split(format!(
                    "evaluation point ({s}, {t}) is not an observed cell"
                )));
            }
            cond[s * num_times + t] = false;
        }
        Ok(Self {
            num_locations,
            num_times,
            cond,
            eval_points: points,
        })
    }
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Split(format!("proportion {p} must lie strictly in (0, 1)")))
    }
}

/// Hides `round(p * eligible)` whole time slices, where a slice is eligible
/// when at least one location is observed at that time.
pub fn mnar_split(
    m: &[bool],
    num_locations: usize,
    num_times: usize,
    p: f64,
    rng: &mut Rng,
) -> Result<MaskSplit> {
    check_p(p)?;
    let eligible: Vec<usize> = (0..num_times)
        .filter(|&t| (0..num_locations).any(|s| m[s * num_times + t]))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Split("no time point has an observation".into()));
    }
    let hidden = rng.choose_k(&eligible, hidden_count(p, eligible.len()));
    let points = hidden
        .iter()
        .flat_map(|&t| {
            (0..num_locations)
                .filter(move |&s| m[s * num_times + t])
                .map(move |s| (s, t))
        })
        .collect();
    MaskSplit::from_eval_points(m, num_locations, num_times, points)
}

/// Hides `round(p * observed)` observed entries uniformly without replacement.
pub fn mcar_split(
    m: &[bool],
    num_locations: usize,
    num_times: usize,
    p: f64,
    rng: &mut Rng,
) -> Result<MaskSplit> {
    check_p(p)?;
    let observed: Vec<usize> = (0..m.len()).filter(|&i| m[i]).collect();
    if observed.is_empty() {
        return Err(Error::Split("no observed entries".into()));
    }
    let hidden = rng.choose_k(&observed, hidden_count(p, observed.len()));
    let points = hidden
        .iter()
        .map(|&i| (i / num_times, i % num_times))
        .collect();
    MaskSplit::from_eval_points(m, num_locations, num_times, points)
}

pub fn split(
    scenario: Scenario,
    m: &[bool],
    num_locations: usize,
    num_times: usize,
    p: f64,
    rng: &mut Rng,
) -> Result<MaskSplit> {
    match scenario {
        Scenario::Mnar => mnar_split(m, num_locations, num_times, p, rng),
        Scenario::Mcar => mcar_split(m, num_locations, num_times, p, rng),
    }
}

/// Copy of `ds` in which only cells visible under `split` are observed; the
/// held-out target values are erased, not just masked.
pub fn apply_split(ds: &GridDataset, split: &MaskSplit) -> Result<GridDataset> {
    if split.cond.len() != ds.y.len() {
        return Err(Error::shape(
            "apply_split",
            &[ds.num_locations(), ds.num_times()],
            &[split.num_locations, split.num_times],
        ));
    }
    let mut out = ds.clone();
    out.m = split.cond.clone();
    for (v, &vis) in out.y.iter_mut().zip(&split.cond) {
        if !vis {
            *v = 0.0;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskOutcome {
    Masked { p: f64, targets: usize },
    /// No visible entries, or the draw hid nothing.
    Skipped,
}

/// Draws `p` from [`TRAINING_PROPORTIONS`] and hides that share of the
/// sample's visible entries under `scenario`, writing `sample.m_cond`.
pub fn training_mask(sample: &mut Sample, scenario: Scenario, rng: &mut Rng) -> MaskOutcome {
    let p = *rng.choose(&TRAINING_PROPORTIONS);
    let (k, l) = (sample.tile_k(), sample.window_len);
    let drawn = split(scenario, &sample.m, k, l, p, rng);
    match drawn {
        Ok(s) if !s.eval_points.is_empty() => {
            let targets = s.eval_points.len();
            sample.m_cond = s.cond;
            MaskOutcome::Masked { p, targets }
        }
        _ => {
            debug!(
                "skipping sample at tile {:?}, window {}: nothing to hide",
                sample.tile_origin, sample.window_start
            );
            sample.m_cond = sample.m.clone();
            MaskOutcome::Skipped
        }
    }
}

/// On-disk form of a validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub scenario: Scenario,
    pub p: f64,
    pub seed: u64,
    pub num_locations: usize,
    pub num_times: usize,
    pub eval_points: Vec<(usize, usize)>,
}

impl SplitFile {
    pub fn new(scenario: Scenario, p: f64, seed: u64, split: &MaskSplit) -> Self {
        Self {
            scenario,
            p,
            seed,
            num_locations: split.num_locations,
            num_times: split.num_times,
            eval_points: split.eval_points.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_split(&self, ds: &GridDataset) -> Result<MaskSplit> {
        if self.num_locations != ds.num_locations() || self.num_times != ds.num_times() {
            return Err(Error::Split(format!(
                "split is for a {}x{} grid, dataset is {}x{}",
                self.num_locations,
                self.num_times,
                ds.num_locations(),
                ds.num_times()
            )));
        }
        MaskSplit::from_eval_points(&ds.m, self.num_locations, self.num_times, self.eval_points.clone())
    }
}
