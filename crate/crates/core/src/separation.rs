//! Visually guided separation: ratio-mask targets, a U-Net mask predictor
//! with a guidance vector tiled at the bottleneck, L1 training and
//! projection-based SDR/SIR/SAR.

use ndarray::{concatenate, s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::{soft_kmeans, SoftKMeansConfig};
use crate::dsp::{self, Spectrogram, Waveform};
use crate::encoders::{encode, visual_input, EncoderParams, standardize};
use crate::error::{invalid, shape, Error, Result};
use crate::nn::{self, Adam, Conv2d, ConvTape, Linear, Parameters, UpConv2d, UpConvTape};
use crate::rng::stream;
use crate::scenegen::Scene;

/// Reported in place of +∞ dB.
pub const DB_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorConfig {
    pub window_len: usize,
    pub hop: usize,
    pub freq_bins: usize,
    pub frames: usize,
    /// Channels of the first encoder layer; doubled at every level.
    pub base_channels: usize,
    pub depth: usize,
    pub guidance_dim: usize,
    pub leaky_slope: f64,
}

impl SeparatorConfig {
    /// 256×216 grid from a 510-sample window.
    pub fn desk() -> Self {
        Self {
            window_len: 510,
            hop: dsp::HOP,
            freq_bins: 256,
            frames: 216,
            base_channels: 16,
            depth: 6,
            guidance_dim: 32,
            leaky_slope: 0.2,
        }
    }

    /// Full 512×432 grid of the training spectrograms.
    pub fn full() -> Self {
        Self { window_len: dsp::WINDOW_LEN, freq_bins: 512, frames: 432, ..Self::desk() }
    }

    /// Samples analysed per clip.
    pub fn clip_len(&self) -> usize {
        (self.frames - 1) * self.hop
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Encoder output sizes, input first.
    fn level_dims(&self) -> Vec<(usize, usize)> {
        let mut d = vec![(self.freq_bins, self.frames)];
        for _ in 0..self.depth {
            let (h, w) = *d.last().expect("nonempty");
            d.push((h.div_ceil(2), w.div_ceil(2)));
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.guidance_dim == 0 {
            return invalid("separator dimensions must be positive");
        }
        if self.window_len / 2 + 1 != self.freq_bins {
            return invalid(format!("window {} gives {} bins, not {}", self.window_len, self.window_len / 2 + 1, self.freq_bins));
        }
        if self.frames < 2 || self.hop == 0 {
            return invalid("separator needs at least two frames");
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return invalid("leaky slope must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorParams {
    pub config: SeparatorConfig,
    pub down: Vec<Conv2d>,
    pub up: Vec<UpConv2d>,
    pub guide: Linear,
}

impl SeparatorParams {
    pub fn new(config: SeparatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[0x5E9]);
        let d = config.depth;
        let down = (0..d)
            .map(|l| {
                let cin = if l == 0 { 1 } else { config.channels(l - 1) };
                Conv2d::new(&mut rng, cin, config.channels(l), 4, 2)
            })
            .collect();
        let up = (0..d)
            .map(|i| {
                let cin = 2 * config.channels(d - 1 - i);
                let cout = if i + 1 == d { 1 } else { config.channels(d - 2 - i) };
                UpConv2d::new(&mut rng, cin, cout)
            })
            .collect();
        let guide = Linear::new(&mut rng, config.guidance_dim, config.channels(d - 1));
        Ok(Self { config, down, up, guide })
    }
}

impl Parameters for SeparatorParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = self.down.iter().flat_map(|c| c.tensors()).collect();
        t.extend(self.up.iter().flat_map(|c| c.tensors()));
        t.extend(self.guide.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = self.down.iter_mut().flat_map(|c| c.tensors_mut()).collect();
        t.extend(self.up.iter_mut().flat_map(|c| c.tensors_mut()));
        t.extend(self.guide.tensors_mut());
        t
    }
}

pub struct SeparatorTape {
    down: Vec<(ConvTape, Array3<f64>)>,
    guidance: Array2<f64>,
    up: Vec<(UpConvTape, (usize, usize), Array3<f64>)>,
}

/// Network input: standardized `ln(1 + |X|)` as an F×T×1 grid.
pub fn network_input(mix_mag: &Array2<f64>) -> Array3<f64> {
    let (f, t) = mix_mag.dim();
    standardize(&mix_mag.mapv(f64::ln_1p).into_shape_with_order((f, t, 1)).expect("contiguous"))
}

fn crop(x: &Array3<f64>, dims: (usize, usize)) -> Array3<f64> {
    x.slice(s![..dims.0, ..dims.1, ..]).to_owned()
}

fn uncrop(g: &Array3<f64>, full: (usize, usize, usize)) -> Array3<f64> {
    let mut out = Array3::zeros(full);
    let (h, w, _) = g.dim();
    out.slice_mut(s![..h, ..w, ..]).assign(g);
    out
}

/// Mask in (0, 1) over the F×T grid.
pub fn predict_mask_taped(
    params: &SeparatorParams,
    input: &Array3<f64>,
    guidance: &Array1<f64>,
) -> Result<(Array2<f64>, SeparatorTape)> {
    let cfg = &params.config;
    if input.dim() != (cfg.freq_bins, cfg.frames, 1) {
        return shape(format!("separator expects {}×{}×1, got {:?}", cfg.freq_bins, cfg.frames, input.dim()));
    }
    if guidance.len() != cfg.guidance_dim {
        return shape(format!("guidance has {} dims, separator expects {}", guidance.len(), cfg.guidance_dim));
    }
    let dims = cfg.level_dims();
    let mut down = Vec::with_capacity(cfg.depth);
    let mut h = input.clone();
    for conv in &params.down {
        let (z, tape) = conv.forward(&h)?;
        h = nn::leaky_relu(&z, cfg.leaky_slope);
        down.push((tape, h.clone()));
    }
    let g_in = guidance.clone().insert_axis(Axis(0));
    let g = params.guide.forward(&g_in)?;
    let (bh, bw) = dims[cfg.depth];
    let tiled = Array3::from_shape_fn((bh, bw, g.ncols()), |(_, _, c)| g[[0, c]]);
    let mut x = concatenate(Axis(2), &[h.view(), tiled.view()]).expect("matching grids");
    let mut up = Vec::with_capacity(cfg.depth);
    let mut mask = None;
    for (i, layer) in params.up.iter().enumerate() {
        let (u, tape) = layer.forward(&x)?;
        let full = (u.dim().0, u.dim().1);
        let target = dims[cfg.depth - 1 - i];
        let u = crop(&u, target);
        if i + 1 == cfg.depth {
            let m = u.index_axis(Axis(2), 0).mapv(nn::sigmoid);
            up.push((tape, full, Array3::zeros((0, 0, 0))));
            mask = Some(m);
        } else {
            let a = nn::relu(&u);
            x = concatenate(Axis(2), &[a.view(), down[cfg.depth - 2 - i].1.view()]).expect("matching grids");
            up.push((tape, full, a));
        }
    }
    let mask = mask.expect("depth ≥ 1");
    Ok((mask, SeparatorTape { down, guidance: g_in, up }))
}

pub fn predict_mask(params: &SeparatorParams, input: &Array3<f64>, guidance: &Array1<f64>) -> Result<Array2<f64>> {
    predict_mask_taped(params, input, guidance).map(|(m, _)| m)
}

/// Parameter gradient given dL/dmask.
pub fn separator_backward(
    params: &SeparatorParams,
    tape: &SeparatorTape,
    mask: &Array2<f64>,
    g_mask: &Array2<f64>,
) -> Result<SeparatorParams> {
    let cfg = &params.config;
    if g_mask.dim() != mask.dim() {
        return shape("mask gradient has the wrong shape");
    }
    let d = cfg.depth;
    let mut grad = params.zeros_like();
    // skip gradients arriving at each encoder output
    let mut skip: Vec<Option<Array3<f64>>> = vec![None; d];
    let (f, t) = mask.dim();
    let mut g = (g_mask * &mask.mapv(|m| m * (1.0 - m))).into_shape_with_order((f, t, 1)).expect("contiguous");
    for i in (0..d).rev() {
        let (utape, full, a) = &tape.up[i];
        if i + 1 != d {
            let ca = a.dim().2;
            let g_a = g.slice(s![.., .., ..ca]).to_owned();
            skip[d - 2 - i] = Some(g.slice(s![.., .., ca..]).to_owned());
            g = nn::relu_backward(a, &g_a);
        }
        let cout = params.up[i].cout;
        let g_full = uncrop(&g, (full.0, full.1, cout));
        let (gp, gx) = params.up[i].backward(utape, &g_full)?;
        grad.up[i] = gp;
        g = gx;
    }
    // bottleneck: split encoder half and tiled guidance half
    let top = cfg.channels(d - 1);
    let g_tiled = g.slice(s![.., .., top..]).sum_axis(Axis(0)).sum_axis(Axis(0)).insert_axis(Axis(0));
    let (gg, _) = params.guide.backward(&tape.guidance, &g_tiled);
    grad.guide = gg;
    let mut g_h = g.slice(s![.., .., ..top]).to_owned();
    for l in (0..d).rev() {
        if let Some(extra) = skip[l].take() {
            g_h += &extra;
        }
        let (ctape, out) = &tape.down[l];
        let g_z = nn::leaky_relu_backward(out, &g_h, cfg.leaky_slope);
        let (gp, gx) = params.down[l].backward(ctape, &g_z)?;
        grad.down[l] = gp;
        g_h = gx;
    }
    Ok(grad)
}

/// `clamp(target / mix, 0, 1)`, with 0/0 taken as 1.
pub fn make_mask_target(target_mag: &Array2<f64>, mix_mag: &Array2<f64>) -> Result<Array2<f64>> {
    if target_mag.dim() != mix_mag.dim() {
        return shape(format!("target {:?} and mixture {:?} grids differ", target_mag.dim(), mix_mag.dim()));
    }
    if target_mag.iter().chain(mix_mag).any(|&v| !(v >= 0.0)) {
        return invalid("magnitudes must be non-negative");
    }
    let mut out = Array2::zeros(target_mag.raw_dim());
    ndarray::Zip::from(&mut out).and(target_mag).and(mix_mag).for_each(|o, &a, &m| {
        // a silent mixture cell passes everything through
        *o = if m == 0.0 {
            1.0
        } else {
            (a / m).clamp(0.0, 1.0)
        };
    });
    Ok(out)
}

/// Mean absolute difference.
pub fn separation_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return shape("mask shapes differ");
    }
    Ok((pred - target).mapv(f64::abs).mean().unwrap_or(0.0))
}

/// Subgradient of [`separation_loss`]; zero where the masks agree.
pub fn separation_loss_grad(pred: &Array2<f64>, target: &Array2<f64>) -> Result<Array2<f64>> {
    if pred.dim() != target.dim() {
        return shape("mask shapes differ");
    }
    let n = pred.len() as f64;
    Ok((pred - target).mapv(|d| if d > 0.0 { 1.0 / n } else if d < 0.0 { -1.0 / n } else { 0.0 }))
}

/// Applies `mask` to the mixture magnitudes and inverts with the mixture phase.
pub fn apply_mask(mix: &Spectrogram, mask: &Array2<f64>) -> Result<Waveform> {
    if mask.dim() != mix.magnitudes.dim() {
        return shape("mask does not match the mixture spectrogram");
    }
    dsp::istft(&mix.with_magnitudes(&mix.magnitudes * mask)?)
}

pub struct Separation {
    pub mask: Array2<f64>,
    pub waveform: Waveform,
}

pub fn separate(params: &SeparatorParams, mix: &Spectrogram, guidance: &Array1<f64>) -> Result<Separation> {
    let mask = predict_mask(params, &network_input(&mix.magnitudes), guidance)?;
    let waveform = apply_mask(mix, &mask)?;
    Ok(Separation { mask, waveform })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssScores {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

fn db(num: f64, den: f64) -> f64 {
    if den <= 0.0 || num / den > 10f64.powf(DB_CAP / 10.0) {
        DB_CAP
    } else if num <= 0.0 {
        -DB_CAP
    } else {
        (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
    }
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves the symmetric positive-definite system `a x = b` by Cholesky.
fn solve_spd(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let sum: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - sum;
                if !(d > 1e-12 * a[i][i].abs().max(1e-300)) {
                    return invalid("reference stems are linearly dependent");
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - sum) / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Ok(x)
}

/// Projection decomposition of `estimate` against the reference stems.
pub fn bss_metrics(estimate: &Waveform, references: &[Waveform], target: usize) -> Result<BssScores> {
    if target >= references.len() {
        return Err(Error::IndexOutOfRange { index: target, len: references.len() });
    }
    let n = estimate.len();
    if references.iter().any(|r| r.len() != n) {
        return shape("estimate and references differ in length");
    }
    if references.iter().any(|r| r.energy() == 0.0) {
        return invalid("reference has zero energy");
    }
    let e = &estimate.samples;
    let st = &references[target].samples;
    let alpha = dotp(e, st) / dotp(st, st);
    let s_target: Vec<f64> = st.iter().map(|v| alpha * v).collect();
    let gram: Vec<Vec<f64>> =
        references.iter().map(|a| references.iter().map(|b| dotp(&a.samples, &b.samples)).collect()).collect();
    let rhs: Vec<f64> = references.iter().map(|r| dotp(e, &r.samples)).collect();
    let coef = solve_spd(&gram, &rhs)?;
    let mut proj = vec![0.0; n];
    for (c, r) in coef.iter().zip(references) {
        for (p, v) in proj.iter_mut().zip(&r.samples) {
            *p += c * v;
        }
    }
    let interf: Vec<f64> = proj.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let artif: Vec<f64> = e.iter().zip(&proj).map(|(x, p)| x - p).collect();
    let energy = |v: &[f64]| dotp(v, v);
    let distortion: Vec<f64> = interf.iter().zip(&artif).map(|(a, b)| a + b).collect();
    Ok(BssScores {
        sdr: db(energy(&s_target), energy(&distortion)),
        sir: db(energy(&s_target), energy(&interf)),
        sar: db(energy(&proj), energy(&artif)),
    })
}

/// One (mixture, target source) training or evaluation item.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationSample {
    pub id: String,
    pub mix: Spectrogram,
    pub input: Array3<f64>,
    pub mask_target: Array2<f64>,
    pub guidance: Array1<f64>,
    /// Trimmed stems of every source in the scene.
    pub references: Vec<Waveform>,
    pub target: usize,
}

impl SeparationSample {
    pub fn from_scene(scene: &Scene, target: usize, guidance: Array1<f64>, cfg: &SeparatorConfig) -> Result<Self> {
        cfg.validate()?;
        if target >= scene.stems.len() {
            return Err(Error::IndexOutOfRange { index: target, len: scene.stems.len() });
        }
        let len = cfg.clip_len();
        if scene.waveform.len() < len {
            return invalid("scene shorter than the separator clip");
        }
        let mix_w = scene.waveform.fit_to(len);
        let mix = dsp::stft(&mix_w, cfg.window_len, cfg.hop)?;
        let references: Vec<Waveform> = scene.stems.iter().map(|s| s.fit_to(len)).collect();
        let tgt = dsp::stft(&references[target], cfg.window_len, cfg.hop)?;
        Ok(Self {
            id: format!("{}-s{target}", scene.scene_id),
            input: network_input(&mix.magnitudes),
            mask_target: make_mask_target(&tgt.magnitudes, &mix.magnitudes)?,
            mix,
            guidance,
            references,
            target,
        })
    }

    pub fn mixture(&self) -> Result<Waveform> {
        dsp::istft(&self.mix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceKind {
    /// The matched visual cluster center.
    Center,
    /// Channel-wise max over the cells assigned to the matched center.
    MaskPooled,
}

/// One unit-norm guidance vector per source of `scene`, in source order.
/// Each source takes the visual center with the highest mean assignment
/// over its ground-truth patch.
pub fn scene_guidance(
    visual: &EncoderParams,
    scene: &Scene,
    clustering: &SoftKMeansConfig,
    kind: GuidanceKind,
) -> Result<Vec<Array1<f64>>> {
    let fm = encode(&visual_input(&scene.image), visual)?;
    let (gh, gw, c) = fm.dims();
    let points = fm.points();
    let state = soft_kmeans(&points, clustering)?;
    let (ih, iw) = (scene.image.dim().0, scene.image.dim().1);
    let mut out = Vec::with_capacity(scene.gt_masks.len());
    for gt in &scene.gt_masks {
        let cells = Array2::from_shape_fn((gh, gw), |(r, q)| {
            let (y0, y1) = (r * ih / gh, (r + 1) * ih / gh);
            let (x0, x1) = (q * iw / gw, (q + 1) * iw / gw);
            gt.slice(s![y0..y1, x0..x1]).mean().unwrap_or(0.0)
        });
        let cells = cells.into_shape_with_order(gh * gw).expect("contiguous");
        let total = cells.sum().max(1e-12);
        let score = |j: usize| state.assignments.column(j).dot(&cells) / total;
        let j = (0..state.centers.nrows()).fold(0, |best, j| if score(j) > score(best) { j } else { best });
        let v = match kind {
            GuidanceKind::Center => state.centers.row(j).to_owned(),
            GuidanceKind::MaskPooled => {
                let mut pooled = Array1::from_elem(c, f64::NEG_INFINITY);
                let mut any = false;
                for (i, row) in points.outer_iter().enumerate() {
                    let w = state.assignments.row(i);
                    let owner = (0..w.len()).fold(0, |b, k| if w[k] > w[b] { k } else { b });
                    if owner == j {
                        any = true;
                        pooled.zip_mut_with(&row, |p, &x| *p = p.max(x));
                    }
                }
                if any { pooled } else { state.centers.row(j).to_owned() }
            }
        };
        let norm = v.dot(&v).sqrt();
        out.push(if norm > 0.0 { v / norm } else { v });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SeparatorTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-3, batch_size: 8, seed: 0 }
    }
}

/// Mean loss and gradient over a batch.
pub fn batch_loss_and_grad(params: &SeparatorParams, batch: &[&SeparationSample]) -> Result<(f64, SeparatorParams)> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    for s in batch {
        let (mask, tape) = predict_mask_taped(params, &s.input, &s.guidance)?;
        total += separation_loss(&mask, &s.mask_target)?;
        let g = separation_loss_grad(&mask, &s.mask_target)?;
        grad.accumulate(&separator_backward(params, &tape, &mask, &g)?);
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((total / n, grad))
}

/// Adam on the L1 mask loss; returns the mean training loss of each epoch.
pub fn train_separator(
    params: &mut SeparatorParams,
    train: &[SeparationSample],
    cfg: &SeparatorTrainConfig,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return invalid("no training samples");
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return invalid("batch size and learning rate must be positive");
    }
    let mut opt = Adam::new(params.num_params());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[0x5E9, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SeparationSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = batch_loss_and_grad(params, &batch)?;
            opt.step(params, &grad, cfg.lr);
            total += loss;
            batches += 1;
        }
        if params.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("separator parameters diverged"));
        }
        history.push(total / batches as f64);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

fn score(sample: &SeparationSample, estimate: &Waveform) -> Result<SampleScore> {
    let m = bss_metrics(estimate, &sample.references, sample.target)?;
    Ok(SampleScore { sample_id: sample.id.clone(), sdr: m.sdr, sir: m.sir, sar: m.sar })
}

pub fn evaluate_separator(params: &SeparatorParams, samples: &[SeparationSample]) -> Result<Vec<SampleScore>> {
    samples.iter().map(|s| score(s, &separate(params, &s.mix, &s.guidance)?.waveform)).collect()
}

/// Scores with the ground-truth ratio mask applied.
pub fn oracle_scores(samples: &[SeparationSample]) -> Result<Vec<SampleScore>> {
    samples.iter().map(|s| score(s, &apply_mask(&s.mix, &s.mask_target)?)).collect()
}

/// Scores with the unprocessed mixture as the estimate.
pub fn mixture_scores(samples: &[SeparationSample]) -> Result<Vec<SampleScore>> {
    samples.iter().map(|s| score(s, &s.mixture()?)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradcheckOptions};
    use ndarray::array;
    use rand::Rng;
    use std::f64::consts::PI;

    fn tiny() -> SeparatorConfig {
        SeparatorConfig { window_len: 30, hop: 8, freq_bins: 16, frames: 12, base_channels: 2, depth: 3, guidance_dim: 3, leaky_slope: 0.2 }
    }

    fn tone(freq: f64, len: usize, sr: u32) -> Waveform {
        Waveform::new((0..len).map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin()).collect(), sr).unwrap()
    }

    #[test]
    fn layer_widths_follow_the_contract() {
        let p = SeparatorParams::new(SeparatorConfig::desk(), 0).unwrap();
        let outs: Vec<usize> = p.down.iter().map(|c| c.cout).collect();
        assert_eq!(outs, vec![16, 32, 64, 128, 256, 512]);
        let ins: Vec<usize> = p.up.iter().map(|c| c.cin / 2).collect();
        assert_eq!(ins, vec![512, 256, 128, 64, 32, 16]);
        assert_eq!(p.up[5].cout, 1);
        assert_eq!(p.guide.fan_out(), 512);
        assert_eq!(SeparatorConfig::desk().level_dims()[6], (4, 4));
    }

    #[test]
    fn output_matches_input_grid() {
        let cfg = SeparatorConfig { base_channels: 2, ..SeparatorConfig::desk() };
        let p = SeparatorParams::new(cfg, 1).unwrap();
        let x = Array3::from_shape_fn((256, 216, 1), |(f, t, _)| ((f * 7 + t) % 11) as f64 / 11.0);
        let m = predict_mask(&p, &x, &Array1::ones(32)).unwrap();
        assert_eq!(m.dim(), (256, 216));
        assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(predict_mask(&p, &x, &Array1::ones(31)).is_err());
    }

    #[test]
    fn network_gradient_matches_differences() {
        let cfg = tiny();
        let mut p = SeparatorParams::new(cfg, 2).unwrap();
        let mut rng = stream(3, &[]);
        let flat: Vec<f64> = p.flatten().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
        p.assign_flat(&flat);
        let x = Array3::from_shape_fn((16, 12, 1), |_| rng.random_range(-1.0..1.0));
        let gvec = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((16, 12), |_| rng.random_range(-1.0..1.0));
        let (mask, tape) = predict_mask_taped(&p, &x, &gvec).unwrap();
        let grad = separator_backward(&p, &tape, &mask, &probe).unwrap();
        let f = |flat: &[f64]| {
            let mut q = p.clone();
            q.assign_flat(flat);
            Ok((predict_mask(&q, &x, &gvec)? * &probe).sum())
        };
        let r = gradcheck(f, &p.flatten(), &grad.flatten(), &GradcheckOptions { coords: 400, ..Default::default() }).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn l1_loss_and_gradient() {
        let a = array![[0.2, 0.7], [0.5, 0.1]];
        assert_eq!(separation_loss(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.5);
        assert!((separation_loss(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        let mut rng = stream(5, &[]);
        let p = Array2::from_shape_fn((3, 4), |_| rng.random_range(0.0..1.0));
        let t = Array2::from_shape_fn((3, 4), |_| rng.random_range(0.0..1.0));
        let g = separation_loss_grad(&p, &t).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            for j in 0..4 {
                let (mut u, mut d) = (p.clone(), p.clone());
                u[[i, j]] += h;
                d[[i, j]] -= h;
                let num = (separation_loss(&u, &t).unwrap() - separation_loss(&d, &t).unwrap()) / (2.0 * h);
                assert!((num - g[[i, j]]).abs() <= 1e-4 * num.abs().max(1e-6));
            }
        }
        assert_eq!(separation_loss_grad(&a, &a).unwrap().sum(), 0.0);
    }

    #[test]
    fn mask_target_conventions() {
        let mix = array![[2.0, 0.0, 1.0], [4.0, 0.0, 0.5]];
        assert!(make_mask_target(&mix, &mix).unwrap().iter().all(|&v| v == 1.0));
        let zero = Array2::zeros((2, 3));
        let m = make_mask_target(&zero, &mix).unwrap();
        assert_eq!(m, array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let big = mix.mapv(|v| 3.0 * v);
        assert!(make_mask_target(&big, &mix).unwrap().iter().all(|&v| v == 1.0));
        assert!(make_mask_target(&zero, &Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn disjoint_tones_give_indicator_masks() {
        let (sr, n, win) = (11025u32, 4096usize, 510usize);
        let bin_hz = sr as f64 / win as f64;
        let a = tone(20.0 * bin_hz, n, sr);
        let b = tone(60.0 * bin_hz, n, sr);
        let mix = Waveform::new(a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(), sr).unwrap();
        let sa = dsp::stft(&a, win, 256).unwrap();
        let sm = dsp::stft(&mix, win, 256).unwrap();
        let m = make_mask_target(&sa.magnitudes, &sm.magnitudes).unwrap();
        for t in 2..m.ncols() - 2 {
            assert!((m[[20, t]] - 1.0).abs() < 1e-3);
            assert!(m[[60, t]] < 1e-3);
        }
    }

    #[test]
    fn identity_mask_reproduces_mixture() {
        let w = tone(440.0, 4000, 11025);
        let spec = dsp::stft(&w, 510, 256).unwrap();
        let out = apply_mask(&spec, &Array2::ones(spec.magnitudes.raw_dim())).unwrap();
        assert_eq!(out, dsp::istft(&spec).unwrap());
    }

    #[test]
    fn bss_exact_and_scaled_estimates() {
        let a = tone(300.0, 2000, 8000);
        let b = tone(700.0, 2000, 8000);
        let r = bss_metrics(&a, &[a.clone(), b.clone()], 0).unwrap();
        assert_eq!((r.sdr, r.sir), (DB_CAP, DB_CAP));
        let noisy = Waveform::new(
            a.samples.iter().enumerate().map(|(i, v)| v + 0.1 * ((i * 7919) % 13) as f64 / 13.0).collect(),
            8000,
        )
        .unwrap();
        let base = bss_metrics(&noisy, &[a.clone(), b.clone()], 0).unwrap();
        for alpha in [0.5, 3.0] {
            let scaled = Waveform::new(noisy.samples.iter().map(|v| alpha * v).collect(), 8000).unwrap();
            let s = bss_metrics(&scaled, &[a.clone(), b.clone()], 0).unwrap();
            assert!((s.sdr - base.sdr).abs() < 1e-9 && (s.sir - base.sir).abs() < 1e-9 && (s.sar - base.sar).abs() < 1e-9);
        }
        assert!(bss_metrics(&a, &[Waveform::zeros(2000, 8000)], 0).is_err());
    }

    #[test]
    fn equal_mix_of_orthogonal_stems_has_zero_sir() {
        // whole periods in the window make the tones exactly orthogonal
        let a = tone(100.0, 8000, 8000);
        let b = tone(250.0, 8000, 8000);
        assert!(dotp(&a.samples, &b.samples).abs() < 1e-8);
        let mix = Waveform::new(a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(), 8000).unwrap();
        let r = bss_metrics(&mix, &[a, b], 0).unwrap();
        assert!(r.sir.abs() < 1e-9, "{r:?}");
        assert!(r.sdr.abs() < 1e-9);
        assert_eq!(r.sar, DB_CAP);
    }

    #[test]
    fn spd_solver_matches_known_solution() {
        let a = vec![vec![4.0, 1.0], vec![1.0, 3.0]];
        let x = solve_spd(&a, &[1.0, 2.0]).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12 && (x[1] - 7.0 / 11.0).abs() < 1e-12);
        assert!(solve_spd(&[vec![1.0, 1.0], vec![1.0, 1.0]], &[1.0, 1.0]).is_err());
    }
}
