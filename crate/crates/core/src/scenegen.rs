//! Synthetic audiovisual scenes with planted sources.
//!
//! Each source class pairs a harmonic tone with a coloured grating patch.
//! A scene places `k` distinct classes on a low-contrast noise background and
//! mixes their stems with white noise 40 dB below the clean mixture.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, CLIP_SAMPLES, DEFAULT_SAMPLE_RATE};
use crate::error::{invalid, Result};
use crate::rng::stream;

/// Fundamentals chosen so that partials 1-3 of different classes are at
/// least 113 Hz apart.
const FUNDAMENTALS_HZ: [f64; 8] = [248.0, 622.0, 1018.0, 1131.0, 1357.0, 1470.0, 1606.0, 1753.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SourceClass {
    pub class_id: usize,
    pub fundamental_hz: f64,
    pub harmonic_weights: Vec<f64>,
    /// P×P×3 texture in [0, 1].
    pub pattern: Array3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub sample_rate: u32,
    pub clip_samples: usize,
    /// Noise level relative to the clean mixture RMS.
    pub noise_db: f64,
    /// Peak amplitude of a unit-gain stem.
    pub stem_scale: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            sample_rate: DEFAULT_SAMPLE_RATE,
            clip_samples: CLIP_SAMPLES,
            noise_db: -40.0,
            stem_scale: 0.18,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// The default eight-class library with `patch`-sized textures.
pub fn default_classes(patch: usize) -> Vec<SourceClass> {
    (0..FUNDAMENTALS_HZ.len())
        .map(|c| {
            let color = hsv_to_rgb(c as f64 / 8.0, 0.85, 0.95);
            let angle = c as f64 * PI / 8.0 * 3.0;
            let freq = 2.0 + (c % 3) as f64;
            let (ca, sa) = (angle.cos(), angle.sin());
            let pattern = Array3::from_shape_fn((patch, patch, 3), |(y, x, ch)| {
                let u = (x as f64 * ca + y as f64 * sa) / patch as f64;
                let g = 0.5 + 0.5 * (2.0 * PI * freq * u).cos();
                (0.4 * color[ch] + 0.6 * g).clamp(0.0, 1.0)
            });
            SourceClass {
                class_id: c,
                fundamental_hz: FUNDAMENTALS_HZ[c],
                harmonic_weights: vec![1.0, 0.5 + 0.1 * (c % 3) as f64, 0.25 + 0.05 * (c % 4) as f64],
                pattern,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub seed: u64,
    /// Mixture of all stems plus noise.
    pub waveform: Waveform,
    /// H×W×3 in [0, 1].
    pub image: Array3<f64>,
    pub k_sources: usize,
    pub source_ids: Vec<usize>,
    /// Binary H×W masks, pairwise disjoint.
    pub gt_masks: Vec<Array2<f64>>,
    pub stems: Vec<Waveform>,
    /// Top-left corner of each patch.
    pub positions: Vec<(usize, usize)>,
    pub noise_std: f64,
}

pub fn make_scene(classes: &[SourceClass], k: usize, seed: u64) -> Result<Scene> {
    make_scene_with(&SceneConfig::default(), classes, k, seed)
}

pub fn make_scene_with(
    cfg: &SceneConfig,
    classes: &[SourceClass],
    k: usize,
    seed: u64,
) -> Result<Scene> {
    if k == 0 {
        return invalid("a scene needs at least one source");
    }
    if k > classes.len() {
        return invalid(format!("k = {k} exceeds the {} available classes", classes.len()));
    }
    let distinct: HashSet<usize> = classes.iter().map(|c| c.class_id).collect();
    if distinct.len() != classes.len() {
        return invalid("source classes must be distinct");
    }
    if classes.iter().any(|c| c.pattern.dim() != (cfg.patch_size, cfg.patch_size, 3)) {
        return invalid("class pattern size does not match the scene config");
    }
    let mut rng = stream(seed, &[k as u64]);

    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.shuffle(&mut rng);
    let chosen: Vec<&SourceClass> = order[..k].iter().map(|&i| &classes[i]).collect();

    let n = cfg.image_size;
    let p = cfg.patch_size;
    let mut image = Array3::from_shape_fn((n, n, 3), |_| 0.5 + rng.random_range(-0.05..0.05));
    let positions = place_patches(&mut rng, n, p, k)?;
    let mut gt_masks = Vec::with_capacity(k);
    for (class, &(y, x)) in chosen.iter().zip(&positions) {
        image.slice_mut(s![y..y + p, x..x + p, ..]).assign(&class.pattern);
        let mut mask = Array2::zeros((n, n));
        mask.slice_mut(s![y..y + p, x..x + p]).fill(1.0);
        gt_masks.push(mask);
    }

    let sr = cfg.sample_rate as f64;
    let mut stems = Vec::with_capacity(k);
    for class in &chosen {
        let gain = rng.random_range(0.5..=1.0);
        let rate = rng.random_range(0.5..3.0);
        let env_phase = rng.random_range(0.0..2.0 * PI);
        let phases: Vec<f64> =
            class.harmonic_weights.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let norm: f64 = class.harmonic_weights.iter().sum();
        let amp = cfg.stem_scale * gain / (1.3 * norm);
        let samples = (0..cfg.clip_samples)
            .map(|i| {
                let t = i as f64 / sr;
                let env = 1.0 + 0.3 * (2.0 * PI * rate * t + env_phase).sin();
                let tone: f64 = class
                    .harmonic_weights
                    .iter()
                    .zip(&phases)
                    .enumerate()
                    .map(|(h, (w, ph))| {
                        w * (2.0 * PI * (h + 1) as f64 * class.fundamental_hz * t + ph).sin()
                    })
                    .sum();
                amp * env * tone
            })
            .collect();
        stems.push(Waveform { samples, sample_rate: cfg.sample_rate });
    }

    let mut mixture = vec![0.0; cfg.clip_samples];
    for stem in &stems {
        for (m, s) in mixture.iter_mut().zip(&stem.samples) {
            *m += s;
        }
    }
    let rms = (mixture.iter().map(|x| x * x).sum::<f64>() / mixture.len() as f64).sqrt();
    let noise_std = rms * 10f64.powf(cfg.noise_db / 20.0);
    let normal = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    for m in mixture.iter_mut() {
        *m += normal.sample(&mut rng);
    }

    Ok(Scene {
        scene_id: format!("k{k}-{seed:016x}"),
        seed,
        waveform: Waveform { samples: mixture, sample_rate: cfg.sample_rate },
        image,
        k_sources: k,
        source_ids: chosen.iter().map(|c| c.class_id).collect(),
        gt_masks,
        stems,
        positions,
        noise_std,
    })
}

fn place_patches<R: Rng>(rng: &mut R, n: usize, p: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if p > n {
        return invalid("patch larger than image");
    }
    let overlaps = |a: (usize, usize), b: (usize, usize)| {
        a.0 < b.0 + p && b.0 < a.0 + p && a.1 < b.1 + p && b.1 < a.1 + p
    };
    'attempt: for _ in 0..200 {
        let mut placed: Vec<(usize, usize)> = Vec::with_capacity(k);
        for _ in 0..k {
            let mut ok = false;
            for _ in 0..200 {
                let cand = (rng.random_range(0..=n - p), rng.random_range(0..=n - p));
                if placed.iter().all(|&q| !overlaps(cand, q)) {
                    placed.push(cand);
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'attempt;
            }
        }
        return Ok(placed);
    }
    // dense fallback: shuffled lattice cells
    let cells = n / p;
    let mut lattice: Vec<(usize, usize)> =
        (0..cells * cells).map(|i| ((i / cells) * p, (i % cells) * p)).collect();
    if lattice.len() < k {
        return invalid(format!("{k} patches of size {p} do not fit in a {n}×{n} image"));
    }
    lattice.shuffle(rng);
    lattice.truncate(k);
    Ok(lattice)
}

/// Normalised correlation of two textures (mean-subtracted cosine).
pub fn pattern_correlation(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let (ma, mb) = (a.mean().unwrap_or(0.0), b.mean().unwrap_or(0.0));
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (x, y) = (x - ma, y - mb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa * bb).sqrt().max(1e-300)
}

pub trait Graded {
    fn source_count(&self) -> usize;
    fn id(&self) -> &str;
}

impl Graded for Scene {
    fn source_count(&self) -> usize {
        self.k_sources
    }
    fn id(&self) -> &str {
        &self.scene_id
    }
}

/// Scenes grouped into stages C1..Cmax by source count.
#[derive(Debug, Clone)]
pub struct CurriculumSet<T> {
    /// `stages[j - 1]` holds C_j.
    pub stages: Vec<Vec<T>>,
}

impl<T: Graded> CurriculumSet<T> {
    pub fn stage(&self, j: usize) -> &[T] {
        match j.checked_sub(1).and_then(|i| self.stages.get(i)) {
            Some(s) => s,
            None => &[],
        }
    }

    pub fn stage_of(&self, scene_id: &str) -> Option<usize> {
        self.stages
            .iter()
            .position(|st| st.iter().any(|s| s.id() == scene_id))
            .map(|i| i + 1)
    }

    pub fn max_stage(&self) -> usize {
        self.stages.len()
    }

    pub fn len(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> BTreeMap<usize, usize> {
        self.stages.iter().enumerate().map(|(i, s)| (i + 1, s.len())).collect()
    }
}

/// Sorts scenes into stages by source count; each stage is ordered by id and
/// then shuffled with `seed`, so membership and order ignore input order.
pub fn grade<T: Graded>(scenes: Vec<T>, seed: u64) -> CurriculumSet<T> {
    let max = scenes.iter().map(Graded::source_count).max().unwrap_or(0);
    let mut stages: Vec<Vec<T>> = (0..max).map(|_| Vec::new()).collect();
    for scene in scenes {
        let j = scene.source_count();
        if j >= 1 {
            stages[j - 1].push(scene);
        }
    }
    for (i, stage) in stages.iter_mut().enumerate() {
        stage.sort_by(|a, b| a.id().cmp(b.id()));
        stage.shuffle(&mut stream(seed, &[0x6772_6164_65, i as u64]));
    }
    CurriculumSet { stages }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SceneConfig {
        SceneConfig { clip_samples: 4096, ..SceneConfig::default() }
    }

    #[test]
    fn single_source_scene() {
        let classes = default_classes(16);
        let s = make_scene_with(&small_cfg(), &classes, 1, 11).unwrap();
        assert_eq!(s.gt_masks.len(), 1);
        assert_eq!(s.gt_masks[0].sum(), 256.0);
        let noise: Vec<f64> =
            s.waveform.samples.iter().zip(&s.stems[0].samples).map(|(m, t)| m - t).collect();
        let std = (noise.iter().map(|x| x * x).sum::<f64>() / noise.len() as f64).sqrt();
        assert!((std / s.noise_std - 1.0).abs() < 0.1);
    }

    #[test]
    fn same_seed_same_scene() {
        let classes = default_classes(16);
        let a = make_scene_with(&small_cfg(), &classes, 2, 5).unwrap();
        let b = make_scene_with(&small_cfg(), &classes, 2, 5).unwrap();
        assert_eq!(a, b);
        let c = make_scene_with(&small_cfg(), &classes, 2, 6).unwrap();
        assert_ne!(a.waveform, c.waveform);
    }

    #[test]
    fn stems_sum_to_mixture_minus_noise() {
        let classes = default_classes(16);
        let s = make_scene_with(&small_cfg(), &classes, 3, 8).unwrap();
        let mut sum = vec![0.0; s.waveform.len()];
        for stem in &s.stems {
            for (a, b) in sum.iter_mut().zip(&stem.samples) {
                *a += b;
            }
        }
        let residual: f64 =
            s.waveform.samples.iter().zip(&sum).map(|(m, x)| (m - x).powi(2)).sum::<f64>();
        let expected_noise = s.noise_std.powi(2) * sum.len() as f64;
        // residual is exactly the injected noise
        assert!((residual / expected_noise - 1.0).abs() < 0.1);
        let energy: f64 = sum.iter().map(|x| x * x).sum();
        let rel = (residual / energy).sqrt();
        assert!((rel - 0.01).abs() < 1e-3, "noise at -40 dB, got rel {rel}");
    }

    #[test]
    fn masks_disjoint_and_large_enough() {
        let classes = default_classes(16);
        for seed in 0..20 {
            let s = make_scene_with(&small_cfg(), &classes, 4, seed).unwrap();
            let total: Array2<f64> = s.gt_masks.iter().fold(Array2::zeros((64, 64)), |a, m| a + m);
            assert!(total.iter().all(|&v| v <= 1.0));
            for m in &s.gt_masks {
                assert!(m.sum() >= 0.01 * 4096.0);
            }
            let ids: HashSet<_> = s.source_ids.iter().collect();
            assert_eq!(ids.len(), 4);
        }
    }

    #[test]
    fn dense_scenes_still_place() {
        let classes = default_classes(16);
        let s = make_scene_with(&small_cfg(), &classes, 8, 1).unwrap();
        assert_eq!(s.positions.len(), 8);
    }

    #[test]
    fn too_many_sources_is_an_error() {
        let classes = default_classes(16);
        assert!(make_scene_with(&small_cfg(), &classes, 9, 0).is_err());
        assert!(make_scene_with(&small_cfg(), &classes, 0, 0).is_err());
    }

    #[test]
    fn class_library_is_distinguishable() {
        let classes = default_classes(16);
        for a in 0..classes.len() {
            for b in a + 1..classes.len() {
                let r = pattern_correlation(&classes[a].pattern, &classes[b].pattern);
                assert!(r < 0.5, "classes {a},{b} correlate at {r}");
                assert_ne!(classes[a].fundamental_hz, classes[b].fundamental_hz);
            }
        }
    }

    struct Tag(usize, String);
    impl Graded for Tag {
        fn source_count(&self) -> usize {
            self.0
        }
        fn id(&self) -> &str {
            &self.1
        }
    }

    fn tags(counts: &[usize]) -> Vec<Tag> {
        counts.iter().enumerate().map(|(i, &c)| Tag(c, format!("s{i}"))).collect()
    }

    #[test]
    fn grading_counts() {
        let set = grade(tags(&[1, 2, 1, 3]), 0);
        assert_eq!(set.stage(1).len(), 2);
        assert_eq!(set.stage(2).len(), 1);
        assert_eq!(set.stage(3).len(), 1);
        assert_eq!(set.stage_of("s3"), Some(3));
        assert!(grade(Vec::<Tag>::new(), 0).is_empty());
    }

    #[test]
    fn grading_ignores_input_order() {
        let a = grade(tags(&[1, 2, 1, 3, 2, 1]), 4);
        let mut rev = tags(&[1, 2, 1, 3, 2, 1]);
        rev.reverse();
        let b = grade(rev, 4);
        for j in 1..=3 {
            let ia: Vec<&str> = a.stage(j).iter().map(|t| t.id()).collect();
            let ib: Vec<&str> = b.stage(j).iter().map(|t| t.id()).collect();
            assert_eq!(ia, ib);
        }
    }
}
