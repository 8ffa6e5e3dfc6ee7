//! Stage-by-stage training of the two encoders on the pairing objective.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    bilinear_resize, center_distances, contrastive_grad, contrastive_loss, localize, loss_backward, normalize_rows, pair_distance,
    ContrastiveConfig, PairDistance,
};
use crate::clustering::{soft_kmeans, soft_kmeans_backward, soft_kmeans_taped, ClusterState, ClusterTape, SoftKMeansConfig, Stiffness};
use crate::encoders::{audio_input, encode, encode_backward, visual_input, encode_taped, EncoderConfig, EncoderParams, EncoderTape, FeatureMap};
use crate::error::{invalid, Error, Result};
use crate::nn::{MomentumSgd, Parameters};
use crate::rng::stream;
use crate::scenegen::{CurriculumSet, Graded, Scene};

/// Encoder-ready view of a scene; waveforms are dropped after featurising.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingSample {
    pub id: String,
    pub k: usize,
    pub source_ids: Vec<usize>,
    pub audio: Array3<f64>,
    pub image: Array3<f64>,
}

impl PairingSample {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let mut source_ids = scene.source_ids.clone();
        source_ids.sort_unstable();
        Ok(Self {
            id: scene.scene_id.clone(),
            k: scene.k_sources,
            source_ids,
            audio: audio_input(&scene.waveform)?,
            image: visual_input(&scene.image),
        })
    }
}

impl Graded for PairingSample {
    fn source_count(&self) -> usize {
        self.k
    }
    fn id(&self) -> &str {
        &self.id
    }
}

pub const DEFAULT_BASE_LR: f64 = 1e-4;

/// Base rate divided by ten at each later stage.
pub fn stage_lr(base: f64, stage: usize) -> f64 {
    base * 10f64.powi(-(stage.saturating_sub(1) as i32))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub beta: Stiffness,
    pub em_iters: usize,
    pub seed: u64,
    pub negatives_per_positive: usize,
    pub momentum: f64,
    /// Global L2 bound on each step's gradient; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Ends the stage after the first epoch whose pairing accuracy reaches this.
    #[serde(default)]
    pub stop_at: Option<f64>,
}

impl StageConfig {
    pub fn new(stage: usize) -> Self {
        Self {
            stage,
            lr: stage_lr(DEFAULT_BASE_LR, stage),
            epochs: 30,
            batch_size: 16,
            margin: 1.0,
            beta: Stiffness::default(),
            em_iters: 10,
            seed: 0,
            negatives_per_positive: 1,
            momentum: 0.9,
            grad_clip: None,
            stop_at: None,
        }
    }

    pub fn k_a(&self) -> usize {
        self.stage
    }

    /// One extra visual center for the background.
    pub fn k_v(&self) -> usize {
        self.stage + 1
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig { margin: self.margin, negatives_per_positive: self.negatives_per_positive }
    }

    pub fn audio_clustering(&self) -> SoftKMeansConfig {
        SoftKMeansConfig { k: self.k_a(), beta: self.beta, iters: self.em_iters }
    }

    pub fn visual_clustering(&self) -> SoftKMeansConfig {
        SoftKMeansConfig { k: self.k_v(), beta: self.beta, iters: self.em_iters }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == 0 {
            return invalid("stages are numbered from 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must lie in [0, 1)");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return invalid("gradient clip must be positive");
        }
        self.contrastive().validate()?;
        self.audio_clustering();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub audio: EncoderParams,
    pub visual: EncoderParams,
}

impl Model {
    pub fn new(audio: EncoderConfig, visual: EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            audio: EncoderParams::new(audio, &mut stream(seed, &[0xA0]))?,
            visual: EncoderParams::new(visual, &mut stream(seed, &[0x71]))?,
        })
    }

    pub fn default_seeded(seed: u64) -> Result<Self> {
        Self::new(EncoderConfig::audio(), EncoderConfig::visual(), seed)
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.audio.tensors();
        t.extend(self.visual.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.audio.tensors_mut();
        t.extend(self.visual.tensors_mut());
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    /// 0 is the evaluation before the first update of a stage.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub pairing_accuracy: f64,
    /// NaN when the evaluation set has no pair of that kind.
    #[serde(with = "nan_as_null")]
    pub mean_positive: f64,
    #[serde(with = "nan_as_null")]
    pub mean_negative: f64,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() { s.serialize_none() } else { s.serialize_some(v) }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: MomentumSgd,
    pub history: Vec<EpochRecord>,
    /// Stage in progress and epochs completed in it.
    pub position: Option<(usize, usize)>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let n = model.num_params();
        Self { model, optimizer: MomentumSgd::new(n, 0.9), history: Vec::new(), position: None }
    }

    pub fn stage_history(&self, stage: usize) -> Vec<&EpochRecord> {
        self.history.iter().filter(|r| r.stage == stage).collect()
    }
}

/// One scored pair: audio of `audio`, image of `visual`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub audio: usize,
    pub visual: usize,
    pub positive: bool,
}

struct Encoded {
    fm: FeatureMap,
    tape: EncoderTape,
    clusters: ClusterState,
    ctape: ClusterTape,
}

fn encode_and_cluster(input: &Array3<f64>, params: &EncoderParams, cfg: &SoftKMeansConfig) -> Result<Encoded> {
    let (fm, tape) = encode_taped(input, params)?;
    let (clusters, ctape) = soft_kmeans_taped(&fm.points(), cfg)?;
    Ok(Encoded { fm, tape, clusters, ctape })
}

fn backprop(params: &EncoderParams, enc: &Encoded, g_centers: &Array2<f64>) -> Result<EncoderParams> {
    let points = enc.fm.points();
    let zero_w = Array2::zeros(enc.clusters.assignments.raw_dim());
    let g_points = soft_kmeans_backward(&points, &enc.ctape, g_centers, &zero_w)?;
    let (h, w, c) = enc.fm.dims();
    let g_grid = g_points.into_shape_with_order((h, w, c)).expect("contiguous");
    Ok(encode_backward(params, &enc.tape, &g_grid)?.0)
}

/// Mean contrastive loss over `pairs`, with the gradient for both encoders.
pub fn batch_loss_and_grad(
    model: &Model,
    samples: &[PairingSample],
    pairs: &[PairIndex],
    stage: &StageConfig,
) -> Result<(f64, Model)> {
    let (loss, grad, _) = batch_forward(model, samples, pairs, stage, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn batch_forward(
    model: &Model,
    samples: &[PairingSample],
    pairs: &[PairIndex],
    stage: &StageConfig,
    with_grad: bool,
) -> Result<(f64, Option<Model>, Vec<f64>)> {
    if pairs.is_empty() {
        return invalid("batch has no pairs");
    }
    let (acfg, vcfg) = (stage.audio_clustering(), stage.visual_clustering());
    let mut audio: BTreeMap<usize, Encoded> = BTreeMap::new();
    let mut visual: BTreeMap<usize, Encoded> = BTreeMap::new();
    let scene = |idx: usize| -> Result<&PairingSample> {
        let s = samples.get(idx).ok_or(Error::IndexOutOfRange { index: idx, len: samples.len() })?;
        if s.k != stage.stage {
            return invalid(format!("scene {} has {} sources but stage is {}", s.id, s.k, stage.stage));
        }
        Ok(s)
    };
    for p in pairs {
        if !audio.contains_key(&p.audio) {
            audio.insert(p.audio, encode_and_cluster(&scene(p.audio)?.audio, &model.audio, &acfg)?);
        }
        if !visual.contains_key(&p.visual) {
            visual.insert(p.visual, encode_and_cluster(&scene(p.visual)?.image, &model.visual, &vcfg)?);
        }
    }
    let mut tapes = Vec::with_capacity(pairs.len());
    let mut dists = Vec::with_capacity(pairs.len());
    for p in pairs {
        let t = pair_distance(&audio[&p.audio].clusters.centers, &visual[&p.visual].clusters.centers)?;
        dists.push(PairDistance { s: t.result().s_av, positive: p.positive });
        tapes.push(t);
    }
    let ccfg = stage.contrastive();
    let loss = contrastive_loss(&dists, &ccfg)?;
    let distances = dists.iter().map(|d| d.s).collect();
    if !with_grad {
        return Ok((loss, None, distances));
    }

    let dl_ds = contrastive_grad(&dists, &ccfg)?;
    let mut g_audio: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
    let mut g_visual: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
    for ((p, t), &g) in pairs.iter().zip(&tapes).zip(&dl_ds) {
        if g == 0.0 {
            continue;
        }
        let (ga, gv) = loss_backward(t, g)?;
        *g_audio.entry(p.audio).or_insert_with(|| Array2::zeros(ga.raw_dim())) += &ga;
        *g_visual.entry(p.visual).or_insert_with(|| Array2::zeros(gv.raw_dim())) += &gv;
    }
    let mut grad = model.clone();
    grad.fill(0.0);
    for (idx, g) in &g_audio {
        grad.audio.accumulate(&backprop(&model.audio, &audio[idx], g)?);
    }
    for (idx, g) in &g_visual {
        grad.visual.accumulate(&backprop(&model.visual, &visual[idx], g)?);
    }
    Ok((loss, Some(grad), distances))
}

/// Positives for every scene plus `n_negatives` partners each whose source
/// set differs from the scene's.
pub fn eval_pairs(samples: &[PairingSample], n_negatives: usize, seed: u64) -> Vec<PairIndex> {
    let mut rng = stream(seed, &[0xE7A1]);
    let mut pairs = Vec::with_capacity(samples.len() * (1 + n_negatives));
    for (i, s) in samples.iter().enumerate() {
        pairs.push(PairIndex { audio: i, visual: i, positive: true });
        let others: Vec<usize> =
            (0..samples.len()).filter(|&j| samples[j].source_ids != s.source_ids).collect();
        if others.is_empty() {
            continue;
        }
        for _ in 0..n_negatives {
            pairs.push(PairIndex { audio: i, visual: others[rng.random_range(0..others.len())], positive: false });
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairingEval {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_positive: f64,
    pub mean_negative: f64,
}

/// Balanced accuracy of the rule "positive iff S < margin/2".
pub fn balanced_accuracy(distances: &[f64], positive: &[bool], margin: f64) -> f64 {
    let (mut tp, mut np, mut tn, mut nn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &pos) in distances.iter().zip(positive) {
        let says_pos = s < margin / 2.0;
        if pos {
            np += 1;
            tp += usize::from(says_pos);
        } else {
            nn += 1;
            tn += usize::from(!says_pos);
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
    match (rate(tp, np), rate(tn, nn)) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 0.0,
    }
}

pub fn evaluate_pairs(model: &Model, samples: &[PairingSample], pairs: &[PairIndex], stage: &StageConfig) -> Result<PairingEval> {
    let (loss, _, dist) = batch_forward(model, samples, pairs, stage, false)?;
    let pos: Vec<bool> = pairs.iter().map(|p| p.positive).collect();
    let mean = |want: bool| {
        let v: Vec<f64> = dist.iter().zip(&pos).filter(|(_, &p)| p == want).map(|(&d, _)| d).collect();
        if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
    };
    Ok(PairingEval {
        loss,
        accuracy: balanced_accuracy(&dist, &pos, stage.margin),
        mean_positive: mean(true),
        mean_negative: mean(false),
    })
}

pub fn pairing_accuracy(model: &Model, samples: &[PairingSample], n_negatives: usize, stage: &StageConfig) -> Result<f64> {
    if samples.is_empty() {
        return invalid("no scenes to evaluate");
    }
    let pairs = eval_pairs(samples, n_negatives, stage.seed);
    Ok(evaluate_pairs(model, samples, &pairs, stage)?.accuracy)
}

/// Training pairs for one epoch: shuffled positives in batches, each with
/// random negatives drawn from the rest of the stage.
pub fn epoch_batches(n: usize, stage: &StageConfig, epoch: usize) -> Vec<Vec<PairIndex>> {
    let mut rng = stream(stage.seed, &[0x7EA1, stage.stage as u64, epoch as u64]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .chunks(stage.batch_size)
        .map(|chunk| {
            let mut pairs = Vec::with_capacity(chunk.len() * (1 + stage.negatives_per_positive));
            for &i in chunk {
                pairs.push(PairIndex { audio: i, visual: i, positive: true });
                if n > 1 {
                    for _ in 0..stage.negatives_per_positive {
                        let mut j = rng.random_range(0..n - 1);
                        if j >= i {
                            j += 1;
                        }
                        pairs.push(PairIndex { audio: i, visual: j, positive: false });
                    }
                }
            }
            pairs
        })
        .collect()
}

/// Trains one stage, resuming mid-stage when `state.position` says so.
/// `eval` is scored before the first update and after every epoch.
pub fn run_stage(
    mut state: TrainState,
    stage: &StageConfig,
    scenes: &[PairingSample],
    eval: &[PairingSample],
) -> Result<TrainState> {
    stage.validate()?;
    if stage.epochs == 0 {
        return Ok(state);
    }
    if scenes.is_empty() || eval.is_empty() {
        return invalid("stage needs training and evaluation scenes");
    }
    if let Some(s) = scenes.iter().chain(eval).find(|s| s.k != stage.stage) {
        return invalid(format!("scene {} has {} sources but stage is {}", s.id, s.k, stage.stage));
    }
    let eval_set = eval_pairs(eval, stage.negatives_per_positive, stage.seed);
    let start = match state.position {
        Some((j, done)) if j == stage.stage => {
            let last = state.history.iter().rev().find(|r| r.stage == j).map(|r| r.pairing_accuracy);
            if done > 0 && stage.stop_at.zip(last).is_some_and(|(t, a)| a >= t) {
                return Ok(state);
            }
            done
        }
        _ => {
            state.optimizer = MomentumSgd::new(state.model.num_params(), stage.momentum);
            let e = evaluate_pairs(&state.model, eval, &eval_set, stage)?;
            state.history.push(EpochRecord {
                stage: stage.stage,
                epoch: 0,
                train_loss: None,
                eval_loss: e.loss,
                pairing_accuracy: e.accuracy,
                mean_positive: e.mean_positive,
                mean_negative: e.mean_negative,
            });
            state.position = Some((stage.stage, 0));
            0
        }
    };
    for epoch in start..stage.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(scenes.len(), stage, epoch);
        for pairs in &batches {
            let (loss, mut grad) = batch_loss_and_grad(&state.model, scenes, pairs, stage)?;
            total += loss;
            if let Some(limit) = stage.grad_clip {
                clip_norm(&mut grad, limit);
            }
            state.optimizer.step(&mut state.model, &grad, stage.lr);
        }
        if state.model.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder parameters diverged"));
        }
        let e = evaluate_pairs(&state.model, eval, &eval_set, stage)?;
        state.history.push(EpochRecord {
            stage: stage.stage,
            epoch: epoch + 1,
            train_loss: Some(total / batches.len() as f64),
            eval_loss: e.loss,
            pairing_accuracy: e.accuracy,
            mean_positive: e.mean_positive,
            mean_negative: e.mean_negative,
        });
        state.position = Some((stage.stage, epoch + 1));
        if stage.stop_at.is_some_and(|t| e.accuracy >= t) {
            break;
        }
    }
    Ok(state)
}

/// Rescales `grad` so its global L2 norm is at most `limit`.
pub fn clip_norm<P: Parameters>(grad: &mut P, limit: f64) -> f64 {
    let norm = grad.tensors().iter().flat_map(|t| t.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > limit {
        grad.scale(limit / norm);
    }
    norm
}

/// Runs the stages in order, each warm-started from the previous one.
pub fn run_curriculum(
    mut state: TrainState,
    stages: &[StageConfig],
    train: &CurriculumSet<PairingSample>,
    eval: &CurriculumSet<PairingSample>,
) -> Result<TrainState> {
    if stages.windows(2).any(|w| w[1].stage <= w[0].stage) {
        return invalid("stages must be strictly ascending");
    }
    for stage in stages {
        if let Some((j, _)) = state.position {
            if j > stage.stage {
                continue;
            }
        }
        state = run_stage(state, stage, train.stage(stage.stage), eval.stage(stage.stage))?;
    }
    Ok(state)
}

/// Maps of the visual center matched to each audio center and of the
/// visual center farthest from it, at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLocalization {
    pub aligned: Vec<Array2<f64>>,
    pub unaligned: Vec<Array2<f64>>,
    pub grid: (usize, usize),
}

pub fn localize_sample(model: &Model, sample: &PairingSample, stage: &StageConfig) -> Result<SceneLocalization> {
    let a = encode(&sample.audio, &model.audio)?;
    let v = encode(&sample.image, &model.visual)?;
    let (gh, gw, _) = v.dims();
    let (ih, iw, _) = sample.image.dim();
    let sa = soft_kmeans(&a.points(), &stage.audio_clustering())?;
    let sv = soft_kmeans(&v.points(), &stage.visual_clustering())?;
    let d = center_distances(&normalize_rows(&sa.centers), &normalize_rows(&sv.centers));
    let mut aligned = Vec::with_capacity(stage.k_a());
    let mut unaligned = Vec::with_capacity(stage.k_a());
    for i in 0..sa.centers.nrows() {
        let hit = localize(&sa, &sv, i, (gh, gw), (ih, iw))?;
        let far = (0..sv.centers.nrows())
            .filter(|&j| j != hit.center_index)
            .fold(None, |b: Option<usize>, j| match b {
                Some(b) if d[[i, b]] >= d[[i, j]] => Some(b),
                _ => Some(j),
            })
            .unwrap_or(hit.center_index);
        let cells = sv
            .assignments
            .column(far)
            .to_owned()
            .into_shape_with_order((gh, gw))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        unaligned.push(bilinear_resize(&cells, ih, iw)?);
        aligned.push(hit.upsampled_mask);
    }
    Ok(SceneLocalization { aligned, unaligned, grid: (gh, gw) })
}

/// First epoch of `stage` whose pairing accuracy reaches `target`.
pub fn epochs_to_reach(history: &[EpochRecord], stage: usize, target: f64) -> Option<usize> {
    history.iter().filter(|r| r.stage == stage).find(|r| r.pairing_accuracy >= target).map(|r| r.epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Modality;

    fn tiny_model(seed: u64) -> Model {
        let a = EncoderConfig { modality: Modality::Audio, input: (8, 8, 1), hidden: (3, 4), embed: 4, pool: false };
        let v = EncoderConfig { modality: Modality::Visual, input: (8, 8, 3), hidden: (3, 4), embed: 4, pool: false };
        Model::new(a, v, seed).unwrap()
    }

    fn tiny_samples(n: usize, k: usize, seed: u64) -> Vec<PairingSample> {
        let mut rng = stream(seed, &[]);
        (0..n)
            .map(|i| PairingSample {
                id: format!("s{i}"),
                k,
                source_ids: (0..k).map(|j| (i + j) % 4).collect(),
                audio: Array3::from_shape_fn((8, 8, 1), |_| rng.random_range(0.0..1.0)),
                image: Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(0.0..1.0)),
            })
            .collect()
    }

    #[test]
    fn learning_rate_schedule() {
        assert_eq!(StageConfig::new(1).lr, 1e-4);
        assert!((StageConfig::new(2).lr - 1e-5).abs() < 1e-20);
        assert!((StageConfig::new(3).lr - 1e-6).abs() < 1e-21);
        assert_eq!(StageConfig::new(2).k_v(), 3);
    }

    #[test]
    fn zero_epochs_leave_state_alone() {
        let state = TrainState::new(tiny_model(1));
        let mut cfg = StageConfig::new(1);
        cfg.epochs = 0;
        let samples = tiny_samples(4, 1, 2);
        let out = run_stage(state.clone(), &cfg, &samples, &samples).unwrap();
        assert_eq!(out, state);
    }

    #[test]
    fn stage_mismatch_is_rejected() {
        let samples = tiny_samples(4, 2, 3);
        let mut cfg = StageConfig::new(1);
        cfg.epochs = 1;
        assert!(run_stage(TrainState::new(tiny_model(1)), &cfg, &samples, &samples).is_err());
    }

    #[test]
    fn accuracy_extremes() {
        assert_eq!(balanced_accuracy(&[0.0, 0.0, 1.0, 2.0], &[true, true, false, false], 1.0), 1.0);
        assert_eq!(balanced_accuracy(&[0.9, 0.0, 0.1, 2.0], &[true, true, false, false], 1.0), 0.5);
    }

    #[test]
    fn eval_negatives_have_other_sources() {
        let samples = tiny_samples(8, 1, 4);
        for p in eval_pairs(&samples, 2, 0) {
            assert_eq!(p.positive, samples[p.audio].source_ids == samples[p.visual].source_ids);
        }
    }

    #[test]
    fn batches_cover_every_scene_once() {
        let cfg = StageConfig::new(1);
        let batches = epoch_batches(37, &cfg, 3);
        let mut seen: Vec<usize> = batches.iter().flatten().filter(|p| p.positive).map(|p| p.audio).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
        assert!(batches.iter().flatten().filter(|p| !p.positive).all(|p| p.audio != p.visual));
        assert_eq!(batches, epoch_batches(37, &cfg, 3));
    }

    #[test]
    fn end_to_end_gradient_matches_differences() {
        use crate::gradcheck::{gradcheck, GradcheckOptions};
        for k in [1, 2] {
            let samples = tiny_samples(4, k, 11);
            // generic point: no pre-activation sits exactly on a ReLU kink
            let mut model = tiny_model(3);
            let mut rng = stream(12, &[]);
            let flat: Vec<f64> = model.flatten().iter().map(|_| rng.random_range(-0.6..0.6)).collect();
            model.assign_flat(&flat);
            let mut cfg = StageConfig::new(k);
            cfg.em_iters = 3;
            cfg.margin = 3.0;
            let pairs = epoch_batches(4, &cfg, 0).concat();
            let (_, grad) = batch_loss_and_grad(&model, &samples, &pairs, &cfg).unwrap();
            let f = |flat: &[f64]| {
                let mut m = model.clone();
                m.assign_flat(flat);
                batch_loss_and_grad(&m, &samples, &pairs, &cfg).map(|(l, _)| l)
            };
            let r = gradcheck(f, &model.flatten(), &grad.flatten(), &GradcheckOptions::default()).unwrap();
            assert!(r.passed, "k={k}: {r:?}");
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let samples = tiny_samples(6, 1, 5);
        let mut cfg = StageConfig::new(1);
        cfg.lr = 0.05;
        cfg.batch_size = 3;
        cfg.epochs = 3;
        let full = run_stage(TrainState::new(tiny_model(7)), &cfg, &samples, &samples).unwrap();
        let mut first = cfg;
        first.epochs = 1;
        let part = run_stage(TrainState::new(tiny_model(7)), &first, &samples, &samples).unwrap();
        let resumed = run_stage(part, &cfg, &samples, &samples).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(full.history.len(), 4);
    }

    #[test]
    fn stop_at_ends_the_stage_early() {
        let samples = tiny_samples(6, 1, 5);
        let mut cfg = StageConfig::new(1);
        cfg.epochs = 5;
        cfg.stop_at = Some(0.0);
        let out = run_stage(TrainState::new(tiny_model(7)), &cfg, &samples, &samples).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.position, Some((1, 1)));
        let again = run_stage(out.clone(), &cfg, &samples, &samples).unwrap();
        assert_eq!(again, out);
    }
}
