//! Poisson regression of the number of sound sources from audio features.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{audio_input, encode_backward, encode_taped, EncoderParams};
use crate::error::{invalid, shape, Error, Result};
use crate::nn::{self, Linear, MomentumSgd, Parameters};
use crate::rng::stream;
use crate::scenegen::Scene;

pub const Y_MAX: usize = 5;
/// Log-rate clamp keeping the exponential link finite.
const Z_LIMIT: f64 = 50.0;

/// λ_i − y_i ln λ_i summed over the batch, without the ln(y!) constant.
pub fn poisson_loss(lambdas: &[f64], counts: &[usize]) -> Result<f64> {
    if lambdas.len() != counts.len() {
        return shape("one count per rate is required");
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return invalid(format!("Poisson rate must be positive and finite, got {l}"));
    }
    if counts.iter().any(|&y| y == 0) {
        return invalid("counts start at 1");
    }
    Ok(lambdas.iter().zip(counts).map(|(&l, &y)| l - y as f64 * l.ln()).sum())
}

/// dL/dλ for each sample.
pub fn poisson_loss_grad(lambdas: &[f64], counts: &[usize]) -> Result<Vec<f64>> {
    poisson_loss(lambdas, counts)?;
    Ok(lambdas.iter().zip(counts).map(|(&l, &y)| 1.0 - y as f64 / l).collect())
}

/// Mode of Poisson(λ) over 1..=y_max; ties go to the smaller count.
pub fn predict_count(lambda: f64, y_max: usize) -> usize {
    let y_max = y_max.max(1);
    let mut best = (1, f64::NEG_INFINITY);
    let mut log_fact = 0.0;
    for y in 1..=y_max {
        log_fact += (y as f64).ln();
        let log_pmf = -lambda + y as f64 * lambda.ln() - log_fact;
        if log_pmf > best.1 {
            best = (y, log_pmf);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountingHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl CountingHead {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        Self { fc1: Linear::new(rng, channels, channels), fc2: Linear::new(rng, channels, 1) }
    }
}

impl Parameters for CountingHead {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.fc1.tensors();
        t.extend(self.fc2.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.fc1.tensors_mut();
        t.extend(self.fc2.tensors_mut());
        t
    }
}

pub struct HeadTape {
    argmax: Vec<(usize, usize)>,
    grid: (usize, usize, usize),
    pooled: Array2<f64>,
    hidden: Array2<f64>,
    z: f64,
}

/// Global max pool → affine → ReLU → affine; returns λ = exp(z).
pub fn head_forward(head: &CountingHead, grid: &Array3<f64>) -> Result<(f64, HeadTape)> {
    let (h, w, c) = grid.dim();
    if c != head.fc1.fan_in() {
        return shape(format!("counting head expects {} channels, got {c}", head.fc1.fan_in()));
    }
    let mut argmax = vec![(0, 0); c];
    let mut pooled = Array2::from_elem((1, c), f64::NEG_INFINITY);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                if grid[[i, j, ch]] > pooled[[0, ch]] {
                    pooled[[0, ch]] = grid[[i, j, ch]];
                    argmax[ch] = (i, j);
                }
            }
        }
    }
    let hidden = nn::relu(&head.fc1.forward(&pooled)?);
    let z = head.fc2.forward(&hidden)?[[0, 0]];
    if !z.is_finite() {
        return Err(Error::NonFinite("counting log-rate"));
    }
    let lambda = z.clamp(-Z_LIMIT, Z_LIMIT).exp();
    Ok((lambda, HeadTape { argmax, grid: (h, w, c), pooled, hidden, z }))
}

/// Gradient of `g_lambda · λ` into head parameters and the feature grid.
pub fn head_backward(head: &CountingHead, tape: &HeadTape, g_lambda: f64) -> (CountingHead, Array3<f64>) {
    let dz = if tape.z.abs() < Z_LIMIT { g_lambda * tape.z.exp() } else { 0.0 };
    let (g2, d_hidden) = head.fc2.backward(&tape.hidden, &Array2::from_elem((1, 1), dz));
    let d_pre = nn::relu_backward(&tape.hidden, &d_hidden);
    let (g1, d_pooled) = head.fc1.backward(&tape.pooled, &d_pre);
    let mut d_grid = Array3::zeros(tape.grid);
    for (ch, &(i, j)) in tape.argmax.iter().enumerate() {
        d_grid[[i, j, ch]] += d_pooled[[0, ch]];
    }
    (CountingHead { fc1: g1, fc2: g2 }, d_grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Counter {
    pub encoder: EncoderParams,
    pub head: CountingHead,
}

impl Parameters for Counter {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.head.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

impl Counter {
    pub fn new<R: Rng>(encoder: EncoderParams, rng: &mut R) -> Self {
        let head = CountingHead::new(encoder.config.embed, rng);
        Self { encoder, head }
    }

    pub fn rate(&self, input: &Array3<f64>) -> Result<f64> {
        let (fm, _) = encode_taped(input, &self.encoder)?;
        Ok(head_forward(&self.head, &fm.grid)?.0)
    }

    /// Summed Poisson loss over the samples and its parameter gradient.
    pub fn loss_and_grad(&self, batch: &[&CountSample]) -> Result<(f64, Counter)> {
        let mut grad = self.clone();
        grad.fill(0.0);
        let mut loss = 0.0;
        for s in batch {
            let (fm, etape) = encode_taped(&s.input, &self.encoder)?;
            let (lambda, htape) = head_forward(&self.head, &fm.grid)?;
            loss += poisson_loss(&[lambda], &[s.count])?;
            let g = poisson_loss_grad(&[lambda], &[s.count])?[0];
            let (gh, d_grid) = head_backward(&self.head, &htape, g);
            let (ge, _) = encode_backward(&self.encoder, &etape, &d_grid)?;
            grad.head.accumulate(&gh);
            grad.encoder.accumulate(&ge);
        }
        Ok((loss, grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountSample {
    pub id: String,
    /// Pooled log spectrogram, H×W×1.
    pub input: Array3<f64>,
    pub count: usize,
}

impl CountSample {
    /// The scene's mixture with its source count as the label.
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Ok(Self { id: scene.scene_id.clone(), input: audio_input(&scene.waveform)?, count: scene.k_sources })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch decay: lr / (1 + decay·epoch).
    pub decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub y_max: usize,
    pub seed: u64,
}

impl Default for CounterConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-2, decay: 0.5, momentum: 0.9, batch_size: 16, y_max: Y_MAX, seed: 0 }
    }
}

impl CounterConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr / (1.0 + self.decay * epoch as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    pub accuracy: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub test: CountMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub history: Vec<CountEpoch>,
    pub final_metrics: CountMetrics,
    pub warnings: Vec<String>,
}

pub fn evaluate_counter(model: &Counter, samples: &[CountSample], y_max: usize) -> Result<CountMetrics> {
    if samples.is_empty() {
        return invalid("no samples to evaluate");
    }
    let mut hits = 0usize;
    let mut abs_err = 0.0;
    for s in samples {
        let y = predict_count(model.rate(&s.input)?, y_max);
        hits += usize::from(y == s.count);
        abs_err += (y as f64 - s.count as f64).abs();
    }
    let n = samples.len() as f64;
    Ok(CountMetrics { accuracy: hits as f64 / n, mae: abs_err / n })
}

/// Expected accuracy and MAE of a uniform guess over 1..=y_max.
pub fn chance_metrics(samples: &[CountSample], y_max: usize) -> CountMetrics {
    let n = samples.len().max(1) as f64;
    let mut acc = 0.0;
    let mut mae = 0.0;
    for s in samples {
        for guess in 1..=y_max {
            acc += f64::from(u8::from(guess == s.count)) / y_max as f64;
            mae += (guess as f64 - s.count as f64).abs() / y_max as f64;
        }
    }
    CountMetrics { accuracy: acc / n, mae: mae / n }
}

/// Momentum-SGD fine-tuning of encoder and head together. Steps use the
/// batch-mean gradient.
pub fn train_counter(
    mut model: Counter,
    train: &[CountSample],
    test: &[CountSample],
    cfg: &CounterConfig,
) -> Result<(Counter, CountReport)> {
    if train.is_empty() || test.is_empty() {
        return invalid("counter training needs train and test samples");
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return invalid("batch size and learning rate must be positive");
    }
    if let Some(s) = train.iter().chain(test).find(|s| s.count == 0 || s.count > cfg.y_max) {
        return invalid(format!("count {} outside 1..={}", s.count, cfg.y_max));
    }
    let mut warnings = Vec::new();
    let first = train[0].count;
    if train.iter().all(|s| s.count == first) {
        warnings.push(format!("training set contains only count {first}"));
    }
    let mean = train.iter().map(|s| s.count as f64).sum::<f64>() / train.len() as f64;
    model.head.fc2.bias[0] = mean.ln();

    let mut opt = MomentumSgd::new(model.num_params(), cfg.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, &[0xC0, epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&CountSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grad) = model.loss_and_grad(&batch)?;
            total += loss;
            grad.scale(1.0 / batch.len() as f64);
            opt.step(&mut model, &grad, cfg.lr_at(epoch));
        }
        if model.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("counter parameters diverged"));
        }
        history.push(CountEpoch {
            epoch: epoch + 1,
            train_loss: total / train.len() as f64,
            test: evaluate_counter(&model, test, cfg.y_max)?,
        });
    }
    let final_metrics = evaluate_counter(&model, test, cfg.y_max)?;
    Ok((model, CountReport { history, final_metrics, warnings }))
}

/// Rates for a batch, handy for diagnostics.
pub fn rates(model: &Counter, samples: &[CountSample]) -> Result<Array1<f64>> {
    samples.iter().map(|s| model.rate(&s.input)).collect::<Result<Vec<_>>>().map(Array1::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, Modality};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn loss_examples() {
        let l = poisson_loss(&[2.0], &[2]).unwrap();
        assert!((l - (2.0 - 2.0 * 2f64.ln())).abs() < 1e-15);
        assert!((l - 0.61371).abs() < 1e-5);
        assert!(poisson_loss(&[0.0], &[1]).is_err());
        assert!(poisson_loss(&[-1.0], &[1]).is_err());
    }

    #[test]
    fn loss_minimised_at_count() {
        for y in 1..=5usize {
            let at = poisson_loss(&[y as f64], &[y]).unwrap();
            for d in [-0.3, -0.01, 0.01, 0.3] {
                assert!(poisson_loss(&[y as f64 + d], &[y]).unwrap() > at);
            }
        }
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let l = [0.7, 2.2, 4.9];
        let y = [1, 3, 2];
        let g = poisson_loss_grad(&l, &y).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let (mut a, mut b) = (l, l);
            a[i] += h;
            b[i] -= h;
            let num = (poisson_loss(&a, &y).unwrap() - poisson_loss(&b, &y).unwrap()) / (2.0 * h);
            assert!((num - g[i]).abs() / num.abs().max(1e-12) <= 1e-6);
        }
    }

    #[test]
    fn predictor_examples() {
        assert_eq!(predict_count(2.5, 5), 2);
        assert_eq!(predict_count(3.0, 5), 2);
        assert_eq!(predict_count(0.3, 5), 1);
        assert_eq!(predict_count(9.7, 5), 5);
    }

    #[test]
    fn chance_is_one_over_classes() {
        let samples: Vec<CountSample> = (1..=5)
            .map(|y| CountSample { id: y.to_string(), input: Array3::zeros((1, 1, 1)), count: y })
            .collect();
        let m = chance_metrics(&samples, 5);
        assert!((m.accuracy - 0.2).abs() < 1e-12);
        assert!((m.mae - 1.6).abs() < 1e-12);
    }

    #[test]
    fn head_gradient_matches_differences() {
        let mut rng = stream(3, &[]);
        let head = CountingHead::new(6, &mut rng);
        let grid = Array3::from_shape_fn((3, 4, 6), |_| StandardNormal.sample(&mut rng));
        let (_, tape) = head_forward(&head, &grid).unwrap();
        let (gh, gg) = head_backward(&head, &tape, 1.0);
        let h = 1e-5;
        let flat = head.flatten();
        let an = gh.flatten();
        for i in 0..flat.len() {
            let (mut a, mut b) = (head.clone(), head.clone());
            let (mut fa, mut fb) = (flat.clone(), flat.clone());
            fa[i] += h;
            fb[i] -= h;
            a.assign_flat(&fa);
            b.assign_flat(&fb);
            let num = (head_forward(&a, &grid).unwrap().0 - head_forward(&b, &grid).unwrap().0) / (2.0 * h);
            assert!((num - an[i]).abs() / num.abs().max(an[i].abs()).max(1e-6) <= 1e-4, "param {i}");
        }
        for i in 0..grid.len() {
            let (mut a, mut b) = (grid.clone(), grid.clone());
            a.as_slice_mut().unwrap()[i] += h;
            b.as_slice_mut().unwrap()[i] -= h;
            let num = (head_forward(&head, &a).unwrap().0 - head_forward(&head, &b).unwrap().0) / (2.0 * h);
            let g = gg.as_slice().unwrap()[i];
            assert!((num - g).abs() / num.abs().max(g.abs()).max(1e-6) <= 1e-4, "grid {i}");
        }
    }

    #[test]
    fn rate_is_positive() {
        let mut rng = stream(4, &[]);
        let cfg = EncoderConfig { modality: Modality::Audio, input: (8, 8, 1), hidden: (2, 3), embed: 4, pool: false };
        let mut model = Counter::new(EncoderParams::new(cfg, &mut rng).unwrap(), &mut rng);
        model.head.fc2.bias[0] = -1e4;
        assert!(model.rate(&Array3::from_elem((8, 8, 1), 1.0)).unwrap() > 0.0);
    }
}
