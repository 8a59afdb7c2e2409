//! The full network: encoder, a stack of spatiotemporal attention layers with
//! an outer residual, and an output head over the concatenated layer outputs.

use serde::{Deserialize, Serialize};

use crate::attention::{msa, sw_msa_stack, AttentionParams, SwStage, WindowSpec};
use crate::encoder::{
    combine, encode_covariates, encode_values, spatial_embedding, temporal_block, EncoderParams,
};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Mlp};
use crate::rng::Rng;
use crate::segmentation::Sample;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SpatialVariant {
    Msa,
    SwMsa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CovariateMode {
    All,
    None,
    TimeVarying,
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub temporal_heads: usize,
    pub spatial_heads: usize,
    pub spatial_variant: SpatialVariant,
    pub sw_schedule: Vec<WindowSpec>,
    pub mlp_hidden: usize,
    pub use_time: bool,
    pub use_space: bool,
    pub covariate_mode: CovariateMode,
    /// Width of the covariate vector fed to the encoder.
    pub num_features: usize,
    /// Per covariate column, whether it is constant in time. Empty means
    /// every column counts as time-varying.
    pub static_features: Vec<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            temporal_heads: 1,
            spatial_heads: 1,
            spatial_variant: SpatialVariant::SwMsa,
            sw_schedule: vec![WindowSpec::square(4, 0), WindowSpec::square(4, 2)],
            mlp_hidden: 64,
            use_time: true,
            use_space: true,
            covariate_mode: CovariateMode::All,
            num_features: 0,
            static_features: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("latent dimension {} must be even and positive", self.dim)));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one attention layer is required".into()));
        }
        for (name, h) in [("temporal", self.temporal_heads), ("spatial", self.spatial_heads)] {
            if h == 0 || self.dim % h != 0 {
                return Err(Error::Config(format!(
                    "{name} head count {h} must divide latent dimension {}",
                    self.dim
                )));
            }
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        if self.spatial_variant == SpatialVariant::SwMsa && self.use_space && self.sw_schedule.is_empty() {
            return Err(Error::Config("shifted-window schedule is empty".into()));
        }
        if !self.static_features.is_empty() && self.static_features.len() != self.num_features {
            return Err(Error::Config(format!(
                "static_features has {} entries for {} covariates",
                self.static_features.len(),
                self.num_features
            )));
        }
        Ok(())
    }

    /// Checks that every window divides a `height x width` tile.
    pub fn validate_tile(&self, height: usize, width: usize) -> Result<()> {
        if self.use_space && self.spatial_variant == SpatialVariant::SwMsa {
            for w in &self.sw_schedule {
                w.validate(height, width)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpatialBlock {
    Msa { attn: AttentionParams, norm: LayerNorm },
    Shifted { stages: Vec<SwStage>, norm: LayerNorm },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub temporal: Option<(AttentionParams, LayerNorm)>,
    pub spatial: Option<SpatialBlock>,
    pub mlp: Mlp,
    pub mlp_norm: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub layers: Vec<LayerParams>,
    pub head: Mlp,
}

impl ModelParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let encoder = EncoderParams::new(store, cfg.num_features, c, cfg.mlp_hidden, rng)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("layer{i}");
            let temporal = if cfg.use_time {
                Some((
                    AttentionParams::new(store, &format!("{p}.time"), c, cfg.temporal_heads, rng)?,
                    LayerNorm::new(store, &format!("{p}.time_norm"), c)?,
                ))
            } else {
                None
            };
            let spatial = if !cfg.use_space {
                None
            } else if cfg.spatial_variant == SpatialVariant::Msa {
                Some(SpatialBlock::Msa {
                    attn: AttentionParams::new(store, &format!("{p}.space"), c, cfg.spatial_heads, rng)?,
                    norm: LayerNorm::new(store, &format!("{p}.space_norm"), c)?,
                })
            } else {
                let mut stages = Vec::with_capacity(cfg.sw_schedule.len());
                for (j, spec) in cfg.sw_schedule.iter().enumerate() {
                    stages.push(SwStage {
                        spec: *spec,
                        attn: AttentionParams::new(store, &format!("{p}.sw{j}"), c, cfg.spatial_heads, rng)?,
                        norm: LayerNorm::new(store, &format!("{p}.sw{j}_norm"), c)?,
                    });
                }
                Some(SpatialBlock::Shifted {
                    stages,
                    norm: LayerNorm::new(store, &format!("{p}.space_norm"), c)?,
                })
            };
            layers.push(LayerParams {
                temporal,
                spatial,
                mlp: Mlp::new(store, &format!("{p}.mlp"), c, cfg.mlp_hidden, c, rng)?,
                mlp_norm: LayerNorm::new(store, &format!("{p}.mlp_norm"), c)?,
            });
        }
        let head = Mlp::new(store, "head", cfg.layers * c, cfg.mlp_hidden, 1, rng)?;
        Ok(Self {
            encoder,
            layers,
            head,
        })
    }
}

/// Closed-form number of scalar weights for `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let c = cfg.dim;
    let attn = AttentionParams::num_scalars(c);
    let ln = LayerNorm::num_scalars(c);
    let time = if cfg.use_time { attn + ln } else { 0 };
    let space = match (cfg.use_space, cfg.spatial_variant) {
        (false, _) => 0,
        (true, SpatialVariant::Msa) => attn + ln,
        (true, SpatialVariant::SwMsa) => cfg.sw_schedule.len() * (attn + ln) + ln,
    };
    let layer = time + space + Mlp::num_scalars(c, cfg.mlp_hidden, c) + ln;
    EncoderParams::num_scalars(cfg.num_features, c, cfg.mlp_hidden)
        + cfg.layers * layer
        + Mlp::num_scalars(cfg.layers * c, cfg.mlp_hidden, 1)
}

/// Configuration, weights and their layout.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let params = ModelParams::new(&mut store, &config, rng)?;
        Ok(Self {
            config,
            store,
            params,
        })
    }

    pub fn forward(&self, tape: &mut Tape, sample: &Sample) -> Result<Var> {
        forward(tape, &self.store, &self.params, &self.config, sample)
    }

    /// Point predictions for every cell of the sample, `tile_k x window_len`.
    pub fn predict(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, sample)?;
        Ok(tape.value(out).to_vec())
    }
}

/// One spatiotemporal layer on `h[k, l, C]`.
pub fn st_layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &LayerParams,
    h: Var,
    tile_h: usize,
    tile_w: usize,
) -> Result<Var> {
    let mut h = h;
    if let Some((attn, norm)) = &layer.temporal {
        let a = msa(tape, store, attn, h, None)?;
        h = norm.residual(tape, store, h, a)?;
    }
    match &layer.spatial {
        Some(SpatialBlock::Msa { attn, norm }) => {
            let by_time = tape.permute(h, &[1, 0, 2])?;
            let a = msa(tape, store, attn, by_time, None)?;
            let a = tape.permute(a, &[1, 0, 2])?;
            h = norm.residual(tape, store, h, a)?;
        }
        Some(SpatialBlock::Shifted { stages, norm }) => {
            let a = sw_msa_stack(tape, store, stages, h, tile_h, tile_w)?;
            h = norm.residual(tape, store, h, a)?;
        }
        None => {}
    }
    let m = layer.mlp.forward(tape, store, h)?;
    layer.mlp_norm.residual(tape, store, h, m)
}

/// Covariates as the encoder sees them under the configured mode.
fn select_covariates(cfg: &ModelConfig, sample: &Sample) -> Vec<f64> {
    let d = sample.num_features;
    let keep = |f: usize| {
        let is_static = cfg.static_features.get(f).copied().unwrap_or(false);
        match cfg.covariate_mode {
            CovariateMode::All => true,
            CovariateMode::None => false,
            CovariateMode::TimeVarying => !is_static,
            CovariateMode::Static => is_static,
        }
    };
    if cfg.covariate_mode == CovariateMode::All {
        return sample.x.clone();
    }
    sample
        .x
        .iter()
        .enumerate()
        .map(|(i, &v)| if keep(i % d) { v } else { 0.0 })
        .collect()
}

/// Predictions `[k, l]` for one sample.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    sample: &Sample,
) -> Result<Var> {
    let (k, l, c) = (sample.tile_k(), sample.window_len, cfg.dim);
    if sample.num_features != cfg.num_features {
        return Err(Error::ConfigMismatch(format!(
            "model expects {} covariates, sample has {}",
            cfg.num_features, sample.num_features
        )));
    }
    cfg.validate_tile(sample.tile_h, sample.tile_w)?;
    let enc = &params.encoder;
    let mut parts = vec![encode_values(tape, store, enc, &sample.y, &sample.m_cond, k, l)?];
    if let Some(mlp) = &enc.covariate {
        let x = select_covariates(cfg, sample);
        parts.push(encode_covariates(tape, store, mlp, &x, k, l, cfg.num_features)?);
    }
    parts.push(tape.constant(temporal_block(sample.window_start, l, c)?));
    parts.push(spatial_embedding(tape, store, enc, &sample.coords)?);
    let mut h = combine(tape, &[k, l, c], &parts)?;
    let mut outputs = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let delta = st_layer_forward(tape, store, layer, h, sample.tile_h, sample.tile_w)?;
        h = tape.add(h, delta)?;
        outputs.push(h);
    }
    let joined = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat(&outputs, 2)?
    };
    let out = params.head.forward(tape, store, joined)?;
    tape.reshape(out, &[k, l])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_store() {
        for cfg in [
            ModelConfig { num_features: 6, ..ModelConfig::default() },
            ModelConfig {
                dim: 8,
                layers: 2,
                spatial_variant: SpatialVariant::Msa,
                use_time: false,
                ..ModelConfig::default()
            },
            ModelConfig { use_space: false, num_features: 3, ..ModelConfig::default() },
        ] {
            let m = Model::new(cfg.clone(), &mut Rng::new(0)).unwrap();
            assert_eq!(m.store.num_scalars(), count_parameters(&cfg));
        }
    }

    #[test]
    fn deeper_model_has_more_parameters() {
        let a = ModelConfig::default();
        let b = ModelConfig { layers: 8, ..a.clone() };
        assert!(count_parameters(&b) > count_parameters(&a));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ModelConfig { dim: 7, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { temporal_heads: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig::default().validate_tile(10, 12).is_err());
        assert!(ModelConfig::default().validate_tile(12, 12).is_ok());
    }
}
