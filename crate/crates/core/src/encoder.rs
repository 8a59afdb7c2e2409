//! Input encoding: target values with a learned mask token, covariates,
//! sinusoidal time position and a learned spatial embedding, summed into one
//! `tile_k x window_len x C` latent.

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub value: Mlp,
    /// Starts at zero.
    pub mask_token: ParamId,
    /// Absent when the dataset has no covariate columns.
    pub covariate: Option<Mlp>,
    pub spatial: Mlp,
    pub dim: usize,
}

impl EncoderParams {
    pub fn new(
        store: &mut ParamStore,
        num_features: usize,
        dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let value = Mlp::new(store, "enc.value", 1, hidden, dim, rng)?;
        let mask_token = store.add("enc.mask_token", Tensor::zeros(&[dim]))?;
        let covariate = if num_features > 0 {
            Some(Mlp::new(store, "enc.covariate", num_features, hidden, dim, rng)?)
        } else {
            None
        };
        let spatial = Mlp::new(store, "enc.spatial", 2, hidden, dim, rng)?;
        Ok(Self {
            value,
            mask_token,
            covariate,
            spatial,
            dim,
        })
    }

    pub fn num_scalars(num_features: usize, dim: usize, hidden: usize) -> usize {
        let cov = if num_features > 0 {
            Mlp::num_scalars(num_features, hidden, dim)
        } else {
            0
        };
        Mlp::num_scalars(1, hidden, dim) + dim + cov + Mlp::num_scalars(2, hidden, dim)
    }
}

/// `MLP(y) * m + token * (1 - m)` per cell, shape `[k, l, C]`.
///
/// Hidden cells feed a zero into the MLP, so whatever is stored there (even
/// NaN) cannot reach the output.
pub fn encode_values(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &EncoderParams,
    y: &[f64],
    m: &[bool],
    k: usize,
    l: usize,
) -> Result<Var> {
    if y.len() != k * l || m.len() != k * l {
        return Err(Error::shape("encode_values", &[k, l], &[y.len(), m.len()]));
    }
    let screened: Vec<f64> = y
        .iter()
        .zip(m)
        .map(|(&v, &vis)| if vis { v } else { 0.0 })
        .collect();
    let on: Vec<f64> = m.iter().map(|&v| f64::from(u8::from(v))).collect();
    let off: Vec<f64> = on.iter().map(|v| 1.0 - v).collect();
    let yv = tape.constant(Tensor::new(vec![k, l, 1], screened)?);
    let onv = tape.constant(Tensor::new(vec![k, l, 1], on)?);
    let offv = tape.constant(Tensor::new(vec![k, l, 1], off)?);
    let enc_y = enc.value.forward(tape, store, yv)?;
    let shown = tape.mul(enc_y, onv)?;
    let token = tape.param(store, enc.mask_token);
    let hidden = tape.mul(offv, token)?;
    tape.add(shown, hidden)
}

/// Sinusoidal position code for absolute time index `t`.
pub fn temporal_encoding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "latent dimension {dim} must be even for the time encoding"
        )));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Time codes for `window_start .. window_start + l`, shape `[l, C]`.
pub fn temporal_block(window_start: usize, l: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(l * dim);
    for t in window_start..window_start + l {
        data.extend(temporal_encoding(t, dim)?);
    }
    Tensor::new(vec![l, dim], data)
}

/// Spatial embedding of normalized coordinates, shape `[k, 1, C]`.
pub fn spatial_embedding(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &EncoderParams,
    coords: &[[f64; 2]],
) -> Result<Var> {
    let k = coords.len();
    let flat = coords.iter().flat_map(|c| c.iter().copied()).collect();
    let cv = tape.constant(Tensor::new(vec![k, 1, 2], flat)?);
    enc.spatial.forward(tape, store, cv)
}

/// Covariate encoding of `x` (`k x l x D`), shape `[k, l, C]`.
pub fn encode_covariates(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &Mlp,
    x: &[f64],
    k: usize,
    l: usize,
    d: usize,
) -> Result<Var> {
    let xv = tape.constant(Tensor::new(vec![k, l, d], x.to_vec())?);
    mlp.forward(tape, store, xv)
}

/// Element-wise sum of the encodings; every summand must broadcast to
/// `[k, l, C]` and the result must have exactly that shape.
pub fn combine(tape: &mut Tape, target: &[usize], parts: &[Var]) -> Result<Var> {
    let (&first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::Contract("combine needs at least one encoding".into()))?;
    let mut h = first;
    for &p in rest {
        h = tape.add(h, p).map_err(|_| {
            Error::Contract(format!(
                "encoding of shape {:?} does not broadcast to {target:?}",
                tape.shape(p)
            ))
        })?;
    }
    if tape.shape(h) != target {
        return Err(Error::Contract(format!(
            "combined encoding has shape {:?}, expected {target:?}",
            tape.shape(h)
        )));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_code_at_zero_and_one() {
        let e = temporal_encoding(0, 6).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = temporal_encoding(1, 4).unwrap();
        assert!((e[0] - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((e[1] - 0.540_302_305_868_139_8).abs() < 1e-15);
        assert!(temporal_encoding(3, 5).is_err());
    }

    #[test]
    fn fully_hidden_is_mask_token() {
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, 0, 4, 8, &mut Rng::new(0)).unwrap();
        store.get_mut(enc.mask_token).tensor.data_mut().copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        let mut tape = Tape::new();
        let v = encode_values(&mut tape, &store, &enc, &[0.4, f64::NAN], &[false, false], 1, 2).unwrap();
        assert_eq!(tape.value(v), &[1.0, -2.0, 0.5, 3.0, 1.0, -2.0, 0.5, 3.0]);
    }

    #[test]
    fn combine_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let b = tape.constant(Tensor::zeros(&[5, 4]));
        assert!(combine(&mut tape, &[2, 3, 4], &[a, b]).is_err());
        let c = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(combine(&mut tape, &[2, 3, 4], &[a, c]).is_ok());
    }
}
