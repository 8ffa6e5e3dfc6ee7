//! Finite-difference checks of every differentiable operation, run as one
//! named suite.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::{contrastive_grad, contrastive_loss, scene_distance, scene_distance_backward, ContrastiveConfig, PairDistance};
use crate::clustering::{soft_kmeans_backward, soft_kmeans_taped, SoftKMeansConfig, Stiffness};
use crate::counting::{head_backward, head_forward, poisson_loss, poisson_loss_grad, CountingHead};
use crate::encoders::{encode, encode_backward, encode_taped, EncoderConfig, EncoderParams, Modality};
use crate::error::{invalid, Result};
use crate::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::nn::Parameters;
use crate::rng::stream;
use crate::separation::{
    predict_mask, predict_mask_taped, separation_loss, separation_loss_grad, separator_backward, SeparatorConfig,
    SeparatorParams,
};
use crate::trainer::{batch_loss_and_grad, epoch_batches, Model, PairingSample, StageConfig};

pub const OPS: [&str; 9] = [
    "encoder",
    "soft_kmeans",
    "scene_distance",
    "contrastive",
    "poisson_loss",
    "counting_head",
    "separation_l1",
    "separator",
    "pairing_objective",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    #[serde(flatten)]
    pub report: GradcheckReport,
}

fn randn<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn arr2<R: Rng>(rng: &mut R, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| randn(rng))
}

fn arr3<R: Rng>(rng: &mut R, d: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(d, |_| randn(rng))
}

fn flat2(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn as2(v: &[f64], r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_vec((r, c), v.to_vec()).expect("sized")
}

/// Moves parameters to a generic point so no ReLU sits on its kink.
fn generic<P: Parameters, R: Rng>(p: &mut P, rng: &mut R, scale: f64) {
    let flat: Vec<f64> = p.flatten().iter().map(|_| rng.random_range(-scale..scale)).collect();
    p.assign_flat(&flat);
}

type Check = (Vec<f64>, Vec<f64>, Box<dyn FnMut(&[f64]) -> Result<f64>>);

fn op_encoder(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, &[1]);
    let cfg = EncoderConfig { modality: Modality::Visual, input: (9, 8, 3), hidden: (3, 4), embed: 5, pool: true };
    let mut p = EncoderParams::new(cfg, &mut rng)?;
    generic(&mut p, &mut rng, 0.6);
    let x = arr3(&mut rng, (9, 8, 3));
    let fm = encode(&x, &p)?;
    let probe = arr3(&mut rng, fm.dims());
    let (_, tape) = encode_taped(&x, &p)?;
    let (g, _) = encode_backward(&p, &tape, &probe)?;
    let base = p.clone();
    let f = move |v: &[f64]| {
        let mut q = base.clone();
        q.assign_flat(v);
        Ok((encode(&x, &q)?.grid * &probe).sum())
    };
    Ok((p.flatten(), g.flatten(), Box::new(f)))
}

fn op_soft_kmeans(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, &[2]);
    let (n, d) = (24, 4);
    let pts = arr2(&mut rng, n, d);
    let cfg = SoftKMeansConfig { k: 3, beta: Stiffness::Auto { scale: 5.0 }, iters: 6 };
    let (state, tape) = soft_kmeans_taped(&pts, &cfg)?;
    let pc = arr2(&mut rng, 3, d);
    let pw = arr2(&mut rng, n, 3);
    let g = soft_kmeans_backward(&pts, &tape, &pc, &pw)?;
    let _ = state;
    let f = move |v: &[f64]| {
        let (s, _) = soft_kmeans_taped(&as2(v, n, d), &cfg)?;
        Ok((&s.centers * &pc).sum() + (&s.assignments * &pw).sum())
    };
    Ok((flat2(&pts), flat2(&g), Box::new(f)))
}

fn op_scene_distance(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, &[3]);
    let (ka, kv, c) = (2, 3, 8);
    let a = arr2(&mut rng, ka, c);
    let v = arr2(&mut rng, kv, c);
    let r = scene_distance(&a, &v)?;
    let (ga, gv) = scene_distance_backward(&a, &v, &r, 1.0)?;
    let mut x = flat2(&a);
    x.extend(flat2(&v));
    let mut g = flat2(&ga);
    g.extend(flat2(&gv));
    let f = move |p: &[f64]| Ok(scene_distance(&as2(&p[..ka * c], ka, c), &as2(&p[ka * c..], kv, c))?.s_av);
    Ok((x, g, Box::new(f)))
}

fn op_contrastive(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, &[4]);
    let cfg = ContrastiveConfig { margin: 1.0, negatives_per_positive: 1 };
    let s: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..1.6)).collect();
    let pos: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
    let pairs = move |s: &[f64]| -> Vec<PairDistance> { s.iter().zip(&pos).map(|(&s, &positive)| PairDistance { s, positive }).collect() };
    let g = contrastive_grad(&pairs(&s), &cfg)?;
    let f = move |v: &[f64]| contrastive_loss(&pairs(v), &cfg);
    Ok((s, g, Box::new(f)))
}

fn op_poisson(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, &[5]);
    let counts: Vec<usize> = (0..10).map(|i| 1 + i % 5).collect();
    let l: Vec<f64> = (0..10).map(|_| rng.random_range(0.3..6.0)).collect();
    let g = poisson_loss_grad(&l, &counts)?;
    let f = move |v: &[f64]| poisson_loss(v, &counts);
    Ok((l, g, Box::new(f)))
}

fn op_counting_head(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, &[6]);
    let mut head = CountingHead::new(6, &mut rng);
    generic(&mut head, &mut rng, 0.5);
    let grid = arr3(&mut rng, (4, 5, 6));
    let (_, tape) = head_forward(&head, &grid)?;
    let (g, _) = head_backward(&head, &tape, 1.0);
    let base = head.clone();
    let f = move |v: &[f64]| {
        let mut q = base.clone();
        q.assign_flat(v);
        Ok(head_forward(&q, &grid)?.0)
    };
    Ok((head.flatten(), g.flatten(), Box::new(f)))
}

fn op_separation_l1(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, &[7]);
    let pred = Array2::from_shape_fn((6, 7), |_| rng.random_range(0.0..1.0));
    let target = Array2::from_shape_fn((6, 7), |_| rng.random_range(0.0..1.0));
    let g = separation_loss_grad(&pred, &target)?;
    let f = move |v: &[f64]| separation_loss(&as2(v, 6, 7), &target);
    Ok((flat2(&pred), flat2(&g), Box::new(f)))
}

fn op_separator(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, &[8]);
    let cfg = SeparatorConfig {
        window_len: 30,
        hop: 8,
        freq_bins: 16,
        frames: 12,
        base_channels: 2,
        depth: 3,
        guidance_dim: 3,
        leaky_slope: 0.2,
    };
    let mut p = SeparatorParams::new(cfg, seed)?;
    generic(&mut p, &mut rng, 0.5);
    let x = Array3::from_shape_fn((16, 12, 1), |_| rng.random_range(-1.0..1.0));
    let gv = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
    let target = Array2::from_shape_fn((16, 12), |_| rng.random_range(0.0..1.0));
    let (mask, tape) = predict_mask_taped(&p, &x, &gv)?;
    let g = separator_backward(&p, &tape, &mask, &separation_loss_grad(&mask, &target)?)?;
    let base = p.clone();
    let f = move |v: &[f64]| {
        let mut q = base.clone();
        q.assign_flat(v);
        separation_loss(&predict_mask(&q, &x, &gv)?, &target)
    };
    Ok((p.flatten(), g.flatten(), Box::new(f)))
}

fn op_pairing(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, &[9]);
    let a = EncoderConfig { modality: Modality::Audio, input: (8, 8, 1), hidden: (3, 4), embed: 4, pool: false };
    let v = EncoderConfig { modality: Modality::Visual, input: (8, 8, 3), hidden: (3, 4), embed: 4, pool: false };
    let mut model = Model::new(a, v, seed)?;
    generic(&mut model, &mut rng, 0.6);
    let samples: Vec<PairingSample> = (0..4)
        .map(|i| PairingSample {
            id: format!("g{i}"),
            k: 2,
            source_ids: vec![i % 3, 3 + i % 2],
            audio: Array3::from_shape_fn((8, 8, 1), |_| rng.random_range(0.0..1.0)),
            image: Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(0.0..1.0)),
        })
        .collect();
    let mut stage = StageConfig::new(2);
    stage.em_iters = 3;
    stage.margin = 3.0;
    let pairs = epoch_batches(samples.len(), &stage, 0).concat();
    let (_, g) = batch_loss_and_grad(&model, &samples, &pairs, &stage)?;
    let base = model.clone();
    let f = move |p: &[f64]| {
        let mut m = base.clone();
        m.assign_flat(p);
        batch_loss_and_grad(&m, &samples, &pairs, &stage).map(|(l, _)| l)
    };
    Ok((model.flatten(), g.flatten(), Box::new(f)))
}

/// Runs every op; `corrupt` names one op whose analytic gradient is
/// deliberately perturbed before comparison.
pub fn run_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<OpReport>> {
    if let Some(name) = corrupt {
        if !OPS.contains(&name) {
            return invalid(format!("unknown op {name:?}"));
        }
    }
    let opts = GradcheckOptions { seed, ..GradcheckOptions::default() };
    let mut out = Vec::with_capacity(OPS.len());
    for op in OPS {
        let (x, mut g, f) = match op {
            "encoder" => op_encoder(seed)?,
            "soft_kmeans" => op_soft_kmeans(seed)?,
            "scene_distance" => op_scene_distance(seed)?,
            "contrastive" => op_contrastive(seed)?,
            "poisson_loss" => op_poisson(seed)?,
            "counting_head" => op_counting_head(seed)?,
            "separation_l1" => op_separation_l1(seed)?,
            "separator" => op_separator(seed)?,
            _ => op_pairing(seed)?,
        };
        if corrupt == Some(op) {
            g.iter_mut().for_each(|v| *v = *v * 1.5 + 1e-3);
        }
        let report = gradcheck(f, &x, &g, &opts)?;
        out.push(OpReport { op: op.to_string(), report });
    }
    Ok(out)
}
