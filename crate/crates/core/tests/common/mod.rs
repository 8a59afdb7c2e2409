#![allow(dead_code)]

use st_impute::dataio::{normalize, GridDataset};
use st_impute::masking::{training_mask, Scenario};
use st_impute::model::ModelConfig;
use st_impute::segmentation::{make_samples, Sample, SegmentSpec};
use st_impute::synthgen::{synth_field, FieldSpec};
use st_impute::tensor::{Tape, Tensor, Var};
use st_impute::Rng;

pub fn field(h: usize, w: usize, l: usize, seed: u64) -> GridDataset {
    synth_field(&FieldSpec {
        height: h,
        width: w,
        num_times: l,
        seed,
        ..FieldSpec::default()
    })
    .unwrap()
}

/// One normalized sample covering an `n x n x l` field, with a training mask drawn.
pub fn masked_sample(n: usize, l: usize, seed: u64, scenario: Scenario) -> Sample {
    let (ds, _) = normalize(&field(n, n, l, seed), None);
    let spec = SegmentSpec {
        window_len: l,
        stride: l,
        tile: n,
    };
    let mut s = make_samples(&ds, &spec).unwrap().remove(0);
    let mut rng = Rng::new(seed + 100);
    while training_mask(&mut s, scenario, &mut rng) == st_impute::masking::MaskOutcome::Skipped {}
    s
}

pub fn small_config(dim: usize, layers: usize, num_features: usize) -> ModelConfig {
    ModelConfig {
        dim,
        layers,
        mlp_hidden: dim,
        num_features,
        ..ModelConfig::default()
    }
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut Rng::new(seed))
}

/// Scalar `sum(out * r)` with fixed random weights `r`, so every output
/// entry gets a distinct adjoint.
pub fn probe(tape: &mut Tape, out: Var, seed: u64) -> st_impute::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(randn(&shape, seed));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

/// Fully observed `h x w x l` dataset with `d` continuous features, all zero.
pub fn blank(h: usize, w: usize, l: usize, d: usize) -> GridDataset {
    let n = h * w * l;
    GridDataset {
        height: h,
        width: w,
        times: (0..l as i64).collect(),
        y: vec![0.0; n],
        m: vec![true; n],
        x: vec![0.0; n * d],
        z: vec![false; n * d],
        feature_names: (0..d).map(|f| format!("x{f}")).collect(),
        feature_kinds: vec![st_impute::dataio::FeatureKind::Continuous; d],
        cell_size_km: 1.0,
        landcover: None,
        epoch: chrono::NaiveDate::parse_from_str(st_impute::dataio::DEFAULT_EPOCH, "%Y-%m-%d").unwrap(),
    }
}
