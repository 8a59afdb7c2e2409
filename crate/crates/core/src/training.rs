//! Self-supervised optimization: the masked reconstruction loss, Adam, the
//! cosine learning-rate schedule and the epoch loop.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{normalize, GridDataset, NormalizationStats};
use crate::error::{Error, Result};
use crate::masking::{apply_split, training_mask, MaskOutcome, MaskSplit, Scenario};
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;
use crate::segmentation::{make_samples, Sample, SegmentSpec};
use crate::tensor::{save_checkpoint, Gradients, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub scenario: Scenario,
    pub seed: u64,
    /// Global gradient-norm cap; off by default.
    pub clip_norm: Option<f64>,
    /// Draw each sample's training mask once instead of every epoch.
    pub fixed_masks: bool,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub segment: SegmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 200,
            lr_max: 1e-3,
            lr_min: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scenario: Scenario::Mnar,
            seed: 0,
            clip_norm: None,
            fixed_masks: false,
            checkpoint_every: 0,
            segment: SegmentSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_min <= self.lr_max) || self.lr_min < 0.0 {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= lr_min ({}) <= lr_max ({})",
                self.lr_min, self.lr_max
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * epoch / epochs)) / 2`, written so
/// both endpoints come out exact.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let w = 0.5 * (1.0 + (PI * epoch as f64 / cfg.epochs as f64).cos());
    cfg.lr_max * w + cfg.lr_min * (1.0 - w)
}

/// Flat indices of loss targets: observed but hidden from the model.
pub fn target_cells(m: &[bool], m_cond: &[bool]) -> Vec<usize> {
    (0..m.len()).filter(|&i| m[i] && !m_cond[i]).collect()
}

/// Masked absolute error `sum |pred - y| * (m - m_cond) / sum (m - m_cond)` in
/// plain arithmetic.
pub fn surrogate_loss(pred: &[f64], y: &[f64], m: &[bool], m_cond: &[bool]) -> Result<f64> {
    if pred.len() != y.len() || m.len() != y.len() || m_cond.len() != y.len() {
        return Err(Error::shape("surrogate_loss", &[pred.len(), y.len()], &[m.len(), m_cond.len()]));
    }
    let cells = target_cells(m, m_cond);
    if cells.is_empty() {
        return Err(Error::Loss("no masked targets".into()));
    }
    let num: f64 = cells.iter().map(|&i| (pred[i] - y[i]).abs()).sum();
    Ok(num / cells.len() as f64)
}

/// Differentiable numerator `sum |pred - y|` over `cells`, scaled by `1 / denom`.
/// Only the target cells are gathered, so nothing else in `pred` or `y` is read.
pub fn masked_abs_error(tape: &mut Tape, pred: Var, y: &[f64], cells: &[usize], denom: f64) -> Result<Var> {
    if cells.is_empty() || !(denom > 0.0) {
        return Err(Error::Loss("no masked targets".into()));
    }
    let n = tape.value(pred).len();
    let flat = tape.reshape(pred, &[n, 1])?;
    let picked = tape.index_select(flat, cells)?;
    let truth = tape.constant(Tensor::new(vec![cells.len(), 1], cells.iter().map(|&i| y[i]).collect())?);
    let diff = tape.sub(picked, truth)?;
    let a = tape.abs(diff);
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / denom))
}

/// Bias-corrected Adam moments, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for p in store.iter_mut() {
            if let Some(g) = &p.tensor.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = p.tensor.grad.clone() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales accumulated gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter_map(|(_, p)| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for p in store.iter_mut() {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Where [`train`] writes its log and checkpoints; both optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2 << 40;
const MASK_STREAM: u64 = 3 << 40;

fn mask_rng(root: &Rng, epoch: usize, sample: usize) -> Rng {
    root.fork(MASK_STREAM + ((epoch as u64) << 24) + sample as u64)
}

/// Forward and backward for one sample; returns its loss share and gradients.
fn sample_gradients(model: &Model, s: &Sample, denom: f64) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let pred = model.forward(&mut tape, s)?;
    let cells = target_cells(&s.m, &s.m_cond);
    let loss = masked_abs_error(&mut tape, pred, &s.y, &cells, denom)?;
    let g = tape.backward(loss)?;
    Ok((tape.scalar(loss), g))
}

/// Normalizes a dataset that already carries the validation split. Statistics
/// come from the visible entries only.
pub fn prepare_training_data(
    ds: &GridDataset,
    split: &MaskSplit,
) -> Result<(GridDataset, NormalizationStats)> {
    let visible = apply_split(ds, split)?;
    Ok(normalize(&visible, None))
}

/// Fills the data-dependent fields of a model config.
pub fn config_for_dataset(mut cfg: ModelConfig, ds: &GridDataset) -> ModelConfig {
    cfg.num_features = ds.num_features();
    cfg.static_features = ds.static_features();
    cfg
}

/// Trains a fresh model on `ds`, whose mask is already the post-split
/// visibility mask and whose values are normalized.
pub fn train(
    ds: &GridDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut model = Model::new(model_cfg.clone(), &mut root.fork(INIT_STREAM))?;
    let mut samples = make_samples(ds, &cfg.segment)?;
    let mut adam = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.eps);
    let mut log = match &out.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    if let Some(dir) = &out.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut history = TrainHistory::default();
    info!(
        "training {} parameters on {} samples for {} epochs",
        model.store.num_scalars(),
        samples.len(),
        cfg.epochs
    );
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg);
        if epoch == 0 || !cfg.fixed_masks {
            for (i, s) in samples.iter_mut().enumerate() {
                let draw_epoch = if cfg.fixed_masks { 0 } else { epoch };
                if training_mask(s, cfg.scenario, &mut mask_rng(&root, draw_epoch, i)) == MaskOutcome::Skipped {
                    debug!("epoch {epoch}: sample {i} has nothing to hide");
                }
            }
        }
        let mut order: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].num_targets() > 0).collect();
        if order.is_empty() {
            return Err(Error::Loss("no sample has masked targets".into()));
        }
        root.fork(SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);
        let mut batch_losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let denom: usize = batch.iter().map(|&i| samples[i].num_targets()).sum();
            let results: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&i| sample_gradients(&model, &samples[i], denom as f64))
                .collect();
            model.store.zero_grad();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                model.store.accumulate(&g);
            }
            if let Some(c) = cfg.clip_norm {
                clip_gradients(&mut model.store, c);
            }
            adam.update(&mut model.store, lr)?;
            batch_losses.push(loss);
        }
        let loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let rec = EpochRecord {
            epoch,
            loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        debug!("epoch {epoch}: loss {loss:.6} lr {lr:.2e}");
        if let (Some(w), Some(p)) = (log.as_mut(), &out.log) {
            let line = serde_json::to_string(&rec).map_err(|e| Error::json(p, e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(p, e))?;
        }
        history.epochs.push(rec);
        if let Some(dir) = &out.checkpoint_dir {
            let done = epoch + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs {
                save_checkpoint(&model.store, &dir.join(format!("epoch{done:04}.ckpt")))?;
            }
        }
    }
    if let (Some(w), Some(p)) = (log.as_mut(), &out.log) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    if let Some(dir) = &out.checkpoint_dir {
        save_checkpoint(&model.store, &final_checkpoint(dir))?;
    }
    if history.epochs.last().is_some_and(|r| !r.loss.is_finite()) {
        warn!("final training loss is not finite");
    }
    Ok((model, history))
}

pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join("model.ckpt")
}
