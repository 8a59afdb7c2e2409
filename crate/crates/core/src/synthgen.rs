//! Deterministic synthetic data: a smooth AR(1) field with a rain-like
//! driver covariate, and moving binary blobs for sequence imputation.

use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureKind, GridDataset, DEFAULT_EPOCH};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const VALUE_RANGE: (f64, f64) = (0.05, 0.45);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSpec {
    pub height: usize,
    pub width: usize,
    pub num_times: usize,
    /// Lag-1 coefficient of the latent field.
    pub phi: f64,
    /// Gaussian smoothing scale in cells; 0 leaves white noise.
    pub length_scale: f64,
    /// Weight of the driver covariate in the target.
    pub beta: f64,
    /// Independent observation noise.
    pub sigma: f64,
    pub n_noise_covariates: usize,
    /// Probability of a rain event per time step.
    pub event_rate: f64,
    /// Per-step retention of the driver covariate.
    pub decay: f64,
    pub cell_size_km: f64,
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            num_times: 144,
            phi: 0.9,
            length_scale: 2.0,
            beta: 1.0,
            sigma: 0.05,
            n_noise_covariates: 2,
            event_rate: 0.2,
            decay: 0.6,
            cell_size_km: 1.0,
            seed: 0,
        }
    }
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.num_times == 0 {
            return Err(Error::Config("field extents must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.phi) {
            return Err(Error::Config(format!("phi {} must lie in [0, 1)", self.phi)));
        }
        if !(self.length_scale >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Config("length_scale and sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.event_rate) || !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Config("event_rate must lie in [0, 1] and decay in [0, 1)".into()));
        }
        if !(self.cell_size_km > 0.0) {
            return Err(Error::Config("cell_size_km must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian weights over `-r..=r`, `r = ceil(3 * scale)`.
pub fn gaussian_kernel(scale: f64) -> Vec<f64> {
    if scale <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * scale).ceil() as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * scale * scale)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Unit-variance smooth noise on an `h x w` grid. Noise is drawn on a grid
/// padded by the kernel radius so the borders see full support.
pub fn smooth_noise(h: usize, w: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    let kern = gaussian_kernel(scale);
    let r = kern.len() / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let raw: Vec<f64> = (0..ph * pw).map(|_| rng.normal()).collect();
    // rows then columns
    let mut tmp = vec![0.0; ph * w];
    for i in 0..ph {
        for j in 0..w {
            tmp[i * w + j] = kern.iter().enumerate().map(|(o, k)| k * raw[i * pw + j + o]).sum();
        }
    }
    let norm: f64 = kern.iter().map(|k| k * k).sum();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let v: f64 = kern.iter().enumerate().map(|(o, k)| k * tmp[(i + o) * w + j]).sum();
            out[i * w + j] = v / norm;
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

fn to_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Smooth AR(1) field `W`, rain-like driver `C1`, target `Y = W + beta C1 + noise`
/// mapped affinely into [`VALUE_RANGE`]. Covariates are `[C1, noise...]`,
/// the noise columns constant in time. Everything is observed.
pub fn synth_field(spec: &FieldSpec) -> Result<GridDataset> {
    spec.validate()?;
    let (h, w, l) = (spec.height, spec.width, spec.num_times);
    let k = h * w;
    let root = Rng::new(spec.seed);
    let mut field_rng = root.fork(1);
    let mut rain_rng = root.fork(2);
    let mut obs_rng = root.fork(3);
    let mut cov_rng = root.fork(4);

    // time-major scratch: [t][s]
    let innov = (1.0 - spec.phi * spec.phi).sqrt();
    let mut latent = vec![0.0; l * k];
    for t in 0..l {
        let eps = smooth_noise(h, w, spec.length_scale, &mut field_rng);
        for s in 0..k {
            latent[t * k + s] = if t == 0 {
                eps[s]
            } else {
                spec.phi * latent[(t - 1) * k + s] + innov * eps[s]
            };
        }
    }
    let mut rain = vec![0.0; l * k];
    for t in 0..l {
        let event = rain_rng.bernoulli(spec.event_rate);
        let strength = -(1.0 - rain_rng.uniform()).ln();
        let pattern = smooth_noise(h, w, spec.length_scale.max(1.0) * 2.0, &mut rain_rng);
        for s in 0..k {
            let prev = if t > 0 { spec.decay * rain[(t - 1) * k + s] } else { 0.0 };
            let impulse = if event { strength * (1.0 + 0.5 * pattern[s]).max(0.0) } else { 0.0 };
            rain[t * k + s] = prev + impulse;
        }
    }
    standardize(&mut rain);
    let mut raw: Vec<f64> = (0..l * k)
        .map(|i| latent[i] + spec.beta * rain[i] + spec.sigma * obs_rng.normal())
        .collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    raw.iter_mut()
        .for_each(|v| *v = VALUE_RANGE.0 + (VALUE_RANGE.1 - VALUE_RANGE.0) * (*v - lo) / span);

    let d = 1 + spec.n_noise_covariates;
    let noise: Vec<f64> = (0..k * spec.n_noise_covariates).map(|_| cov_rng.normal()).collect();
    let mut y = vec![0.0; k * l];
    let mut x = vec![0.0; k * l * d];
    for s in 0..k {
        for t in 0..l {
            y[s * l + t] = to_f32(raw[t * k + s]);
            let base = (s * l + t) * d;
            x[base] = to_f32(rain[t * k + s]);
            for j in 0..spec.n_noise_covariates {
                x[base + 1 + j] = to_f32(noise[s * spec.n_noise_covariates + j]);
            }
        }
    }
    let mut feature_names = vec!["precip".to_string()];
    feature_names.extend((1..=spec.n_noise_covariates).map(|j| format!("noise{j}")));
    let landcover = (0..k).map(|s| ((s / w) * 3 / h) as i64 + 1).collect();
    let ds = GridDataset {
        height: h,
        width: w,
        times: (0..l as i64).collect(),
        y,
        m: vec![true; k * l],
        x,
        z: vec![false; k * l * d],
        feature_names,
        feature_kinds: vec![FeatureKind::Continuous; d],
        cell_size_km: spec.cell_size_km,
        landcover: Some(landcover),
        epoch: DEFAULT_EPOCH.parse().expect("valid default epoch"),
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Semi-major axis in pixels; the minor axis is 0.6 of it.
    pub radius: f64,
    /// Maximum speed in pixels per frame.
    pub max_speed: f64,
    /// Maximum rotation in radians per frame.
    pub max_rotation: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            height: 28,
            width: 28,
            frames: 10,
            radius: 6.0,
            max_speed: 1.5,
            max_rotation: 0.3,
            seed: 0,
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || !(self.radius > 0.0) {
            return Err(Error::Config("blobs need frames and a positive radius".into()));
        }
        if 2.0 * self.radius >= self.height.min(self.width) as f64 {
            return Err(Error::Config(format!(
                "radius {} does not fit a {}x{} frame",
                self.radius, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Frames of one sequence, `frames x height x width`, values 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSequence {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<f64>>,
}

impl BlobSequence {
    /// The sequence as a fully observed grid dataset with no covariates.
    pub fn to_dataset(&self) -> GridDataset {
        let (k, l) = (self.height * self.width, self.frames.len());
        let mut y = vec![0.0; k * l];
        for (t, f) in self.frames.iter().enumerate() {
            for s in 0..k {
                y[s * l + t] = f[s];
            }
        }
        GridDataset {
            height: self.height,
            width: self.width,
            times: (0..l as i64).collect(),
            y,
            m: vec![true; k * l],
            x: Vec::new(),
            z: Vec::new(),
            feature_names: Vec::new(),
            feature_kinds: Vec::new(),
            cell_size_km: 1.0,
            landcover: None,
            epoch: DEFAULT_EPOCH.parse().expect("valid default epoch"),
        }
    }
}

fn rasterize(spec: &BlobSpec, cy: f64, cx: f64, angle: f64) -> Vec<f64> {
    let (a, b) = (spec.radius, 0.6 * spec.radius);
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0.0; spec.height * spec.width];
    for r in 0..spec.height {
        for c in 0..spec.width {
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                out[r * spec.width + c] = 1.0;
            }
        }
    }
    out
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = -*vel;
    } else if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -*vel;
    }
}

/// One elliptical blob per sequence, translating and rotating at constant
/// rates and bouncing off the frame edges.
pub fn moving_blobs(spec: &BlobSpec, n_sequences: usize) -> Result<Vec<BlobSequence>> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let (lo_y, hi_y) = (spec.radius, spec.height as f64 - spec.radius);
    let (lo_x, hi_x) = (spec.radius, spec.width as f64 - spec.radius);
    (0..n_sequences)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let mut cy = rng.uniform_range(lo_y, hi_y);
            let mut cx = rng.uniform_range(lo_x, hi_x);
            let mut vy = rng.uniform_range(-spec.max_speed, spec.max_speed);
            let mut vx = rng.uniform_range(-spec.max_speed, spec.max_speed);
            let spin = rng.uniform_range(-spec.max_rotation, spec.max_rotation);
            let mut angle = rng.uniform_range(0.0, std::f64::consts::PI);
            let mut frames = Vec::with_capacity(spec.frames);
            for _ in 0..spec.frames {
                frames.push(rasterize(spec, cy, cx, angle));
                cy += vy;
                cx += vx;
                reflect(&mut cy, &mut vy, lo_y, hi_y);
                reflect(&mut cx, &mut vx, lo_x, hi_x);
                angle += spin;
            }
            Ok(BlobSequence {
                height: spec.height,
                width: spec.width,
                frames,
            })
        })
        .collect()
}

/// Visibility mask for one frame where white pixels (value > 0.5) are hidden
/// `white_bias` times as often as black ones and the expected hidden share
/// is `rate`. Returns true for visible pixels.
pub fn apply_biased_mcar(frame: &[f64], rate: f64, white_bias: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("rate {rate} must lie strictly in (0, 1)")));
    }
    if !(white_bias > 0.0) {
        return Err(Error::Config(format!("white_bias {white_bias} must be positive")));
    }
    let (p_black, p_white) = biased_rates(frame, rate, white_bias)?;
    Ok(frame
        .iter()
        .map(|&v| !rng.bernoulli(if v > 0.5 { p_white } else { p_black }))
        .collect())
}

/// `(p_black, p_white)` with `p_white = white_bias * p_black` and mean `rate`.
pub fn biased_rates(frame: &[f64], rate: f64, white_bias: f64) -> Result<(f64, f64)> {
    let n = frame.len() as f64;
    let n_white = frame.iter().filter(|&&v| v > 0.5).count() as f64;
    let p_black = rate * n / ((n - n_white) + white_bias * n_white);
    let p_white = white_bias * p_black;
    if p_white > 1.0 || p_black > 1.0 {
        return Err(Error::Config(format!(
            "hiding rate {rate} with white bias {white_bias} needs probability {:.3} > 1",
            p_white.max(p_black)
        )));
    }
    Ok((p_black, p_white))
}
