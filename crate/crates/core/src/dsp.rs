//! Audio front end and back end.
//!
//! Center-padded STFT with a periodic Hann window, overlap-add ISTFT,
//! `log(1 + m)` magnitude compression and a log-spaced frequency
//! projection with an approximate inverse.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 11025;
/// Clip length giving exactly 432 center-padded frames at hop 256.
pub const CLIP_SAMPLES: usize = 110_336;
pub const WINDOW_LEN: usize = 1022;
pub const HOP: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Zero-pads or truncates to `len` samples.
    pub fn fit_to(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self { samples, sample_rate: self.sample_rate }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub window_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Length of the analysed signal, used to strip padding on inversion.
    pub signal_len: usize,
}

impl StftParams {
    pub fn freq_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn frames(&self) -> usize {
        self.signal_len / self.hop + 1
    }
}

/// Fractional source-bin positions sampled by a projected spectrogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub source_bins: usize,
    pub positions: Vec<f64>,
}

impl FrequencyGrid {
    /// One output row per source bin.
    pub fn identity(source_bins: usize) -> Self {
        Self { source_bins, positions: (0..source_bins).map(|i| i as f64).collect() }
    }

    /// Log-spaced rows from the first non-DC bin up to Nyquist.
    pub fn log_spaced(source_bins: usize, out_bins: usize) -> Result<Self> {
        if out_bins < 2 {
            return invalid("log-frequency projection needs at least 2 output bins");
        }
        if source_bins < 3 {
            return invalid("log-frequency projection needs at least 3 source bins");
        }
        let top = ((source_bins - 1) as f64).ln();
        let positions = (0..out_bins)
            .map(|k| (top * k as f64 / (out_bins - 1) as f64).exp())
            .collect();
        Ok(Self { source_bins, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Linear interpolation of every column of `grid` (F×T) at the grid positions.
    pub fn project(&self, grid: &Array2<f64>) -> Result<Array2<f64>> {
        if grid.nrows() != self.source_bins {
            return shape(format!(
                "grid has {} rows, projection expects {}",
                grid.nrows(),
                self.source_bins
            ));
        }
        let mut out = Array2::zeros((self.positions.len(), grid.ncols()));
        for (k, &p) in self.positions.iter().enumerate() {
            let (lo, frac) = split_position(p, self.source_bins);
            let hi = (lo + 1).min(self.source_bins - 1);
            for t in 0..grid.ncols() {
                out[[k, t]] = (1.0 - frac) * grid[[lo, t]] + frac * grid[[hi, t]];
            }
        }
        Ok(out)
    }

    /// Approximate inverse: maps projected rows back onto the source bins by
    /// interpolating in the projected index space.
    pub fn unproject(&self, projected: &Array2<f64>) -> Result<Array2<f64>> {
        if projected.nrows() != self.positions.len() {
            return shape("projected grid does not match frequency grid");
        }
        let mut out = Array2::zeros((self.source_bins, projected.ncols()));
        for i in 0..self.source_bins {
            let x = i as f64;
            // positions are increasing; locate the bracketing pair
            let idx = self.positions.partition_point(|&p| p <= x);
            let (lo, hi, frac) = if idx == 0 {
                (0, 0, 0.0)
            } else if idx >= self.positions.len() {
                let last = self.positions.len() - 1;
                (last, last, 0.0)
            } else {
                let (p0, p1) = (self.positions[idx - 1], self.positions[idx]);
                (idx - 1, idx, (x - p0) / (p1 - p0))
            };
            for t in 0..projected.ncols() {
                out[[i, t]] = (1.0 - frac) * projected[[lo, t]] + frac * projected[[hi, t]];
            }
        }
        Ok(out)
    }

    fn nearest_rows(&self) -> Vec<usize> {
        self.positions
            .iter()
            .map(|p| (p.round() as usize).min(self.source_bins - 1))
            .collect()
    }
}

fn split_position(p: f64, bins: usize) -> (usize, f64) {
    let p = p.clamp(0.0, (bins - 1) as f64);
    let lo = (p.floor() as usize).min(bins - 1);
    (lo, p - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrequencyScale {
    Linear,
    Projected(FrequencyGrid),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// F×T, non-negative.
    pub magnitudes: Array2<f64>,
    /// F×T, radians.
    pub phases: Array2<f64>,
    pub params: StftParams,
    pub scale: FrequencyScale,
}

impl Spectrogram {
    pub fn freq_bins(&self) -> usize {
        self.magnitudes.nrows()
    }

    pub fn frames(&self) -> usize {
        self.magnitudes.ncols()
    }

    /// Same phases, new magnitudes (e.g. after masking).
    pub fn with_magnitudes(&self, magnitudes: Array2<f64>) -> Result<Self> {
        if magnitudes.dim() != self.magnitudes.dim() {
            return shape("replacement magnitudes have a different shape");
        }
        Ok(Self { magnitudes, ..self.clone() })
    }
}

pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
}

pub fn stft(w: &Waveform, window_len: usize, hop: usize) -> Result<Spectrogram> {
    if w.is_empty() {
        return invalid("cannot transform an empty waveform");
    }
    if hop == 0 {
        return invalid("hop must be positive");
    }
    if window_len < 2 || window_len % 2 != 0 {
        return invalid("window length must be even and at least 2");
    }
    if hop > window_len {
        return invalid("hop must not exceed the window length");
    }
    let params = StftParams {
        window_len,
        hop,
        sample_rate: w.sample_rate,
        signal_len: w.len(),
    };
    let (bins, frames) = (params.freq_bins(), params.frames());
    let pad = window_len / 2;
    let mut padded = vec![0.0; pad + w.len() + window_len];
    padded[pad..pad + w.len()].copy_from_slice(&w.samples);

    let window = hann_window(window_len);
    let fft = plans(window_len).forward;
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    let mut magnitudes = Array2::zeros((bins, frames));
    let mut phases = Array2::zeros((bins, frames));
    for t in 0..frames {
        let start = t * hop;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            let (m, p) = buf[f].to_polar();
            magnitudes[[f, t]] = m;
            phases[[f, t]] = p;
        }
    }
    Ok(Spectrogram { magnitudes, phases, params, scale: FrequencyScale::Linear })
}

/// Overlap-add inversion with window-power normalisation. Projected
/// spectrograms are first mapped back to the linear grid (approximate).
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let params = s.params;
    let (magnitudes, phases) = match &s.scale {
        FrequencyScale::Linear => (s.magnitudes.clone(), s.phases.clone()),
        FrequencyScale::Projected(grid) => {
            let mags = grid.unproject(&s.magnitudes)?.mapv(|m| m.max(0.0));
            (mags, unproject_phases(grid, &s.phases))
        }
    };
    let n = params.window_len;
    if n < 2 || n % 2 != 0 || params.hop == 0 {
        return invalid("invalid STFT parameters");
    }
    if magnitudes.nrows() != params.freq_bins() {
        return shape(format!(
            "{} frequency bins inconsistent with window length {}",
            magnitudes.nrows(),
            n
        ));
    }
    if magnitudes.dim() != phases.dim() {
        return shape("magnitude and phase grids differ");
    }
    let frames = magnitudes.ncols();
    let bins = magnitudes.nrows();
    let window = hann_window(n);
    let ifft = plans(n).inverse;
    let out_len = (frames - 1) * params.hop + n;
    let mut acc = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        for f in 0..bins {
            buf[f] = Complex::from_polar(magnitudes[[f, t]], phases[[f, t]]);
        }
        // Hermitian completion; DC and Nyquist must be real
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        for f in 1..n / 2 {
            buf[n - f] = buf[f].conj();
        }
        ifft.process(&mut buf);
        let start = t * params.hop;
        for k in 0..n {
            acc[start + k] += buf[k].re / n as f64 * window[k];
            norm[start + k] += window[k] * window[k];
        }
    }
    let pad = n / 2;
    let samples = (0..params.signal_len)
        .map(|i| {
            let j = i + pad;
            if j < out_len && norm[j] > 1e-10 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform { samples, sample_rate: params.sample_rate })
}

fn unproject_phases(grid: &FrequencyGrid, phases: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((grid.source_bins, phases.ncols()));
    for i in 0..grid.source_bins {
        let k = grid
            .positions
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - i as f64).abs().total_cmp(&(b.1 - i as f64).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        out.row_mut(i).assign(&phases.row(k));
    }
    out
}

/// Elementwise `ln(1 + m)`; maps silence to 0 instead of -inf.
pub fn log_magnitude(s: &Spectrogram) -> Array2<f64> {
    s.magnitudes.mapv(f64::ln_1p)
}

/// Resamples magnitudes onto `out_bins` log-spaced frequency rows.
pub fn log_freq_project(s: &Spectrogram, out_bins: usize) -> Result<Spectrogram> {
    let grid = match &s.scale {
        FrequencyScale::Linear => FrequencyGrid::log_spaced(s.freq_bins(), out_bins)?,
        FrequencyScale::Projected(_) => return invalid("spectrogram is already projected"),
    };
    project_onto(s, grid)
}

/// Resamples a linear spectrogram onto an arbitrary frequency grid.
pub fn project_onto(s: &Spectrogram, grid: FrequencyGrid) -> Result<Spectrogram> {
    let magnitudes = grid.project(&s.magnitudes)?;
    let rows = grid.nearest_rows();
    let mut phases = Array2::zeros(magnitudes.dim());
    for (k, &r) in rows.iter().enumerate() {
        phases.row_mut(k).assign(&s.phases.row(r));
    }
    Ok(Spectrogram {
        magnitudes,
        phases,
        params: s.params,
        scale: FrequencyScale::Projected(grid),
    })
}

/// Non-overlapping block average; trailing rows/columns that do not fill a
/// block are dropped.
pub fn avg_pool(grid: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    if rows == 0 || cols == 0 {
        return invalid("pooling factors must be positive");
    }
    let (h, w) = (grid.nrows() / rows, grid.ncols() / cols);
    if h == 0 || w == 0 {
        return shape("grid smaller than one pooling block");
    }
    let mut out = Array2::zeros((h, w));
    let scale = 1.0 / (rows * cols) as f64;
    for ((i, j), v) in out.indexed_iter_mut() {
        let block = grid.slice(ndarray::s![i * rows..(i + 1) * rows, j * cols..(j + 1) * cols]);
        *v = block.sum() * scale;
    }
    Ok(out)
}

/// Energy of the magnitudes weighted by each row's share of the source axis.
pub fn weighted_energy(s: &Spectrogram) -> f64 {
    let row_energy = s.magnitudes.mapv(|m| m * m).sum_axis(Axis(1));
    match &s.scale {
        FrequencyScale::Linear => row_energy.sum(),
        FrequencyScale::Projected(grid) => {
            let p = &grid.positions;
            let n = p.len();
            (0..n)
                .map(|k| {
                    let left = if k == 0 { p[0] } else { 0.5 * (p[k] - p[k - 1]) };
                    let right = if k + 1 == n { 0.0 } else { 0.5 * (p[k + 1] - p[k]) };
                    row_energy[k] * (left + right)
                })
                .sum()
        }
    }
}

pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let signal: f64 = reference.iter().map(|x| x * x).sum();
    let noise: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    10.0 * (signal / noise.max(1e-300)).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 11025).unwrap()
    }

    #[test]
    fn paper_resolution_dimensions() {
        let w = Waveform::zeros(CLIP_SAMPLES, DEFAULT_SAMPLE_RATE);
        let s = stft(&w, WINDOW_LEN, HOP).unwrap();
        assert_eq!(s.magnitudes.dim(), (512, 432));
        assert!(s.magnitudes.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn bin_center_sinusoid_peaks_at_its_bin() {
        let (n, k, sr) = (256usize, 19usize, 11025u32);
        let f = k as f64 * sr as f64 / n as f64;
        let samples = (0..4000)
            .map(|i| (2.0 * PI * f * i as f64 / sr as f64).sin())
            .collect();
        let s = stft(&Waveform::new(samples, sr).unwrap(), n, 64).unwrap();
        for t in 0..s.frames() {
            let col = s.magnitudes.column(t);
            let peak = col.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(peak, k, "frame {t}");
        }
    }

    #[test]
    fn round_trip_is_near_exact() {
        let w = noise(5000, 3);
        let back = istft(&stft(&w, 256, 64).unwrap()).unwrap();
        assert_eq!(back.len(), w.len());
        assert!(snr_db(&w.samples, &back.samples) > 100.0);
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence() {
        let s = stft(&noise(3000, 1), 128, 32).unwrap();
        let z = s.with_magnitudes(Array2::zeros(s.magnitudes.dim())).unwrap();
        assert!(istft(&z).unwrap().samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unit_mask_is_identity() {
        let s = stft(&noise(3000, 2), 128, 32).unwrap();
        let masked = s.with_magnitudes(&s.magnitudes * &Array2::<f64>::ones(s.magnitudes.dim())).unwrap();
        assert_eq!(istft(&masked).unwrap(), istft(&s).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(stft(&Waveform::zeros(0, 8000), 64, 16).is_err());
        assert!(stft(&noise(100, 0), 64, 0).is_err());
        assert!(stft(&noise(100, 0), 63, 16).is_err());
        let mut s = stft(&noise(300, 0), 64, 16).unwrap();
        s.params.window_len = 128;
        assert!(istft(&s).is_err());
    }

    #[test]
    fn log_magnitude_values() {
        let s = stft(&noise(300, 0), 64, 16).unwrap();
        let mut mags = Array2::zeros((33, 2));
        mags[[0, 0]] = 0.0;
        mags[[1, 0]] = std::f64::consts::E - 1.0;
        mags[[2, 0]] = 3.0;
        mags[[3, 0]] = 2.0;
        let s = Spectrogram {
            phases: Array2::zeros((33, 2)),
            magnitudes: mags,
            params: s.params,
            scale: FrequencyScale::Linear,
        };
        let l = log_magnitude(&s);
        assert_eq!(l[[0, 0]], 0.0);
        assert!((l[[1, 0]] - 1.0).abs() < 1e-15);
        assert!(l[[2, 0]] > l[[3, 0]]);
    }

    #[test]
    fn identity_grid_copies() {
        let s = stft(&noise(2000, 5), 128, 32).unwrap();
        let p = project_onto(&s, FrequencyGrid::identity(s.freq_bins())).unwrap();
        let dev = (&p.magnitudes - &s.magnitudes).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(dev <= 1e-12);
        let back = istft(&p).unwrap();
        assert!(snr_db(&istft(&s).unwrap().samples, &back.samples) > 100.0);
    }

    #[test]
    fn constant_spectrum_stays_constant() {
        let s = stft(&noise(2000, 5), 128, 32).unwrap();
        let s = s.with_magnitudes(Array2::from_elem(s.magnitudes.dim(), 0.7)).unwrap();
        let p = log_freq_project(&s, 40).unwrap();
        assert!(p.magnitudes.iter().all(|&m| (m - 0.7).abs() < 1e-12));
        assert!(log_freq_project(&s, 1).is_err());
    }

    #[test]
    fn smooth_spectrum_energy_is_preserved() {
        // broad Gaussian bumps stand in for smoothed tone spectra
        let s = stft(&noise(4000, 9), 1022, 256).unwrap();
        let bins = s.freq_bins();
        let mut mags = Array2::zeros((bins, s.frames()));
        for ((f, t), m) in mags.indexed_iter_mut() {
            let c = 150.0 + 20.0 * t as f64;
            *m = (-((f as f64 - c) / 60.0).powi(2)).exp() + 0.1;
        }
        let s = s.with_magnitudes(mags).unwrap();
        let p = log_freq_project(&s, 512).unwrap();
        let ratio = weighted_energy(&p) / weighted_energy(&s);
        assert!((ratio - 1.0).abs() < 0.05, "energy ratio {ratio}");
    }

    #[test]
    fn avg_pool_blocks() {
        let g = Array2::from_shape_fn((4, 6), |(i, j)| (i * 6 + j) as f64);
        let p = avg_pool(&g, 2, 3).unwrap();
        assert_eq!(p.dim(), (2, 2));
        assert_eq!(p[[0, 0]], (0.0 + 1.0 + 2.0 + 6.0 + 7.0 + 8.0) / 6.0);
    }
}
