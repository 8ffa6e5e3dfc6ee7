//! Small convolutional encoders for both modalities.
//!
//! Layout: conv 3×3/2 → ReLU → conv 3×3/2 → ReLU → (2×2 average pool for
//! images) → pointwise projection to the embedding width.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, Waveform, HOP, WINDOW_LEN};
use crate::error::{invalid, shape, Error, Result};
use crate::nn::{self, Conv2d, ConvTape, Linear, Parameters};

/// Pooling applied to the 512×432 log spectrogram before encoding.
pub const AUDIO_POOL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub modality: Modality,
    /// H, W, channels of the input.
    pub input: (usize, usize, usize),
    pub hidden: (usize, usize),
    pub embed: usize,
    pub pool: bool,
}

impl EncoderConfig {
    /// 64×64 RGB scene image → 8×8×32.
    pub fn visual() -> Self {
        Self { modality: Modality::Visual, input: (64, 64, 3), hidden: (16, 32), embed: 32, pool: true }
    }

    /// 64×54 pooled log spectrogram → 16×14×32.
    pub fn audio() -> Self {
        Self { modality: Modality::Audio, input: (64, 54, 1), hidden: (16, 32), embed: 32, pool: false }
    }

    pub fn output_grid(&self) -> (usize, usize) {
        let (h, w) = (self.input.0.div_ceil(2).div_ceil(2), self.input.1.div_ceil(2).div_ceil(2));
        if self.pool {
            (h / 2, w / 2)
        } else {
            (h, w)
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 || self.hidden.0 == 0 || self.hidden.1 == 0 || self.embed == 0 {
            return invalid("encoder dimensions must be positive");
        }
        let (oh, ow) = self.output_grid();
        if oh == 0 || ow == 0 {
            return invalid("input too small for the encoder");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Linear,
}

impl EncoderParams {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c1, c2) = config.hidden;
        Ok(Self {
            config,
            conv1: Conv2d::new(rng, config.input.2, c1, 3, 2),
            conv2: Conv2d::new(rng, c1, c2, 3, 2),
            proj: Linear::new(rng, c2, config.embed),
        })
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.conv1.tensors();
        t.extend(self.conv2.tensors());
        t.extend(self.proj.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.conv1.tensors_mut();
        t.extend(self.conv2.tensors_mut());
        t.extend(self.proj.tensors_mut());
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// H×W×C
    pub grid: Array3<f64>,
    pub modality: Modality,
}

impl FeatureMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.grid.dim()
    }

    /// Row-major (H·W)×C view as an owned matrix.
    pub fn points(&self) -> Array2<f64> {
        let (h, w, c) = self.grid.dim();
        self.grid.to_owned().into_shape_with_order((h * w, c)).expect("contiguous grid")
    }

    pub fn from_points(points: Array2<f64>, h: usize, w: usize, modality: Modality) -> Result<Self> {
        let c = points.ncols();
        if points.nrows() != h * w {
            return shape(format!("{} points do not fill a {h}×{w} grid", points.nrows()));
        }
        let grid = points.into_shape_with_order((h, w, c)).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(Self { grid, modality })
    }
}

pub struct EncoderTape {
    t1: ConvTape,
    y1: Array3<f64>,
    t2: ConvTape,
    y2: Array3<f64>,
    /// Input rows of the projection.
    proj_in: Array2<f64>,
}

pub fn encode(input: &Array3<f64>, params: &EncoderParams) -> Result<FeatureMap> {
    encode_taped(input, params).map(|(f, _)| f)
}

pub fn encode_taped(input: &Array3<f64>, params: &EncoderParams) -> Result<(FeatureMap, EncoderTape)> {
    let cfg = &params.config;
    if input.dim() != cfg.input {
        return shape(format!("encoder expects input {:?}, got {:?}", cfg.input, input.dim()));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder input"));
    }
    let (z1, t1) = params.conv1.forward(input)?;
    let y1 = nn::relu(&z1);
    let (z2, t2) = params.conv2.forward(&y1)?;
    let y2 = nn::relu(&z2);
    let pooled = if cfg.pool { nn::avg_pool2(&y2) } else { y2.clone() };
    let (h, w, c) = pooled.dim();
    let proj_in = pooled.into_shape_with_order((h * w, c)).expect("contiguous");
    let out = params.proj.forward(&proj_in)?;
    let fm = FeatureMap::from_points(out, h, w, cfg.modality)?;
    Ok((fm, EncoderTape { t1, y1, t2, y2, proj_in }))
}

/// Returns (parameter gradient, input gradient).
pub fn encode_backward(
    params: &EncoderParams,
    tape: &EncoderTape,
    upstream: &Array3<f64>,
) -> Result<(EncoderParams, Array3<f64>)> {
    let (h, w) = params.config.output_grid();
    if upstream.dim() != (h, w, params.config.embed) {
        return shape("encoder upstream gradient has the wrong shape");
    }
    let dy = upstream.to_owned().into_shape_with_order((h * w, params.config.embed)).expect("contiguous");
    let (g_proj, d_pooled) = params.proj.backward(&tape.proj_in, &dy);
    let d_pooled = d_pooled.into_shape_with_order((h, w, params.config.hidden.1)).expect("contiguous");
    let d_y2 = if params.config.pool {
        let (yh, yw, _) = tape.y2.dim();
        nn::avg_pool2_backward(&d_pooled, (yh, yw))
    } else {
        d_pooled
    };
    let d_z2 = nn::relu_backward(&tape.y2, &d_y2);
    let (g2, d_y1) = params.conv2.backward(&tape.t2, &d_z2)?;
    let d_z1 = nn::relu_backward(&tape.y1, &d_y1);
    let (g1, dx) = params.conv1.backward(&tape.t1, &d_z1)?;
    Ok((EncoderParams { config: params.config, conv1: g1, conv2: g2, proj: g_proj }, dx))
}

/// Zero mean, unit variance over the whole array; constant inputs map to zero.
pub fn standardize(x: &Array3<f64>) -> Array3<f64> {
    let n = x.len().max(1) as f64;
    let mean = x.sum() / n;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        x.mapv(|v| (v - mean) / sd)
    } else {
        Array3::zeros(x.raw_dim())
    }
}

/// Mixture waveform → standardized 64×54×1 pooled log spectrogram.
pub fn audio_input(w: &Waveform) -> Result<Array3<f64>> {
    let spec = dsp::stft(w, WINDOW_LEN, HOP)?;
    let logmag = dsp::log_magnitude(&spec);
    let pooled = dsp::avg_pool(&logmag, AUDIO_POOL, AUDIO_POOL)?;
    let (h, wd) = pooled.dim();
    Ok(standardize(&pooled.into_shape_with_order((h, wd, 1)).expect("contiguous")))
}

/// Scene image → per-image standardized copy.
pub fn visual_input(image: &Array3<f64>) -> Array3<f64> {
    standardize(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn small() -> EncoderConfig {
        EncoderConfig { modality: Modality::Audio, input: (8, 8, 1), hidden: (3, 4), embed: 5, pool: false }
    }

    #[test]
    fn default_shapes() {
        let mut rng = stream(1, &[]);
        let p = EncoderParams::new(EncoderConfig::visual(), &mut rng).unwrap();
        let f = encode(&Array3::from_elem((64, 64, 3), 0.3), &p).unwrap();
        assert_eq!(f.dims(), (8, 8, 32));
        let p = EncoderParams::new(EncoderConfig::audio(), &mut rng).unwrap();
        let f = encode(&Array3::from_elem((64, 54, 1), 0.3), &p).unwrap();
        assert_eq!(f.dims(), (16, 14, 32));
        assert!(encode(&Array3::zeros((64, 64, 3)), &p).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let p = EncoderParams::new(EncoderConfig::visual(), &mut stream(2, &[])).unwrap();
        let f = encode(&Array3::zeros((64, 64, 3)), &p).unwrap();
        assert!(f.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn points_round_trip() {
        let p = EncoderParams::new(EncoderConfig::visual(), &mut stream(3, &[])).unwrap();
        let mut rng = stream(4, &[]);
        let x = Array3::from_shape_fn((64, 64, 3), |_| rng.random_range(0.0..1.0));
        let f = encode(&x, &p).unwrap();
        let back = FeatureMap::from_points(f.points(), 8, 8, Modality::Visual).unwrap();
        assert_eq!(back, f);
        assert_eq!(f.points().row(9).to_vec(), f.grid.slice(ndarray::s![1, 1, ..]).to_vec());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream(5, &[]);
        let p = EncoderParams::new(small(), &mut rng).unwrap();
        let x = Array3::from_shape_fn((8, 8, 1), |_| StandardNormal.sample(&mut rng));
        let up = Array3::from_shape_fn((2, 2, 5), |_| StandardNormal.sample(&mut rng));
        let (_, tape) = encode_taped(&x, &p).unwrap();
        let (gp, gx) = encode_backward(&p, &tape, &up).unwrap();
        let loss = |p: &EncoderParams, x: &Array3<f64>| (encode(x, p).unwrap().grid * &up).sum();
        let h = 1e-5;
        let flat = p.flatten();
        let analytic = gp.flatten();
        let mut worst: f64 = 0.0;
        for i in 0..flat.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            let (mut fa, mut fb) = (flat.clone(), flat.clone());
            fa[i] += h;
            fb[i] -= h;
            a.assign_flat(&fa);
            b.assign_flat(&fb);
            let num = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            worst = worst.max((num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6));
        }
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.as_slice_mut().unwrap()[i] += h;
            b.as_slice_mut().unwrap()[i] -= h;
            let num = (loss(&p, &a) - loss(&p, &b)) / (2.0 * h);
            let an = gx.as_slice().unwrap()[i];
            worst = worst.max((num - an).abs() / num.abs().max(an.abs()).max(1e-6));
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = stream(6, &[]);
        let p = EncoderParams::new(small(), &mut rng).unwrap();
        let x = Array3::from_shape_fn((8, 8, 1), |_| StandardNormal.sample(&mut rng));
        let (_, tape) = encode_taped(&x, &p).unwrap();
        let (gp, gx) = encode_backward(&p, &tape, &Array3::zeros((2, 2, 5))).unwrap();
        assert!(gp.flatten().iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dead_unit_has_zero_gradient() {
        let mut rng = stream(7, &[]);
        let mut p = EncoderParams::new(small(), &mut rng).unwrap();
        // first hidden channel of conv2 can never fire
        p.conv2.weight.column_mut(0).fill(0.0);
        p.conv2.bias[0] = -1.0;
        let x = Array3::from_shape_fn((8, 8, 1), |_| StandardNormal.sample(&mut rng));
        let (_, tape) = encode_taped(&x, &p).unwrap();
        let up = Array3::from_shape_fn((2, 2, 5), |_| StandardNormal.sample(&mut rng));
        let (gp, _) = encode_backward(&p, &tape, &up).unwrap();
        assert!(gp.conv2.weight.column(0).iter().all(|&v| v == 0.0));
        assert_eq!(gp.conv2.bias[0], 0.0);
        assert!(gp.proj.weight.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_inputs() {
        let x = Array3::from_shape_fn((4, 5, 3), |(i, j, c)| (i * 7 + j * 3 + c) as f64 * 0.1 + 2.0);
        let z = standardize(&x);
        assert!(z.mean().unwrap().abs() < 1e-12);
        assert!((z.std(0.0) - 1.0).abs() < 1e-12);
        assert!(standardize(&Array3::from_elem((2, 2, 1), 0.5)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn audio_input_shape() {
        let w = Waveform::zeros(dsp::CLIP_SAMPLES, dsp::DEFAULT_SAMPLE_RATE);
        assert_eq!(audio_input(&w).unwrap().dim(), (64, 54, 1));
    }
}
