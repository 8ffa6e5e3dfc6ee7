//! Cross-modal center matching, the contrastive pairing loss and
//! localization masks.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterState;
use crate::error::{invalid, shape, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub s_av: f64,
    /// For each audio center, the nearest visual center.
    pub matches: Vec<usize>,
    /// Distance from each audio center to its match.
    pub distances: Vec<f64>,
    pub k_a: usize,
    pub k_v: usize,
}

fn euclid(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn scene_distance(audio: &Array2<f64>, visual: &Array2<f64>) -> Result<AlignmentResult> {
    if audio.nrows() == 0 || visual.nrows() == 0 {
        return invalid("both modalities need at least one center");
    }
    if audio.ncols() != visual.ncols() {
        return shape(format!("audio centers have {} channels, visual {}", audio.ncols(), visual.ncols()));
    }
    let mut matches = Vec::with_capacity(audio.nrows());
    let mut distances = Vec::with_capacity(audio.nrows());
    for a in audio.rows() {
        let (j, d) = visual
            .rows()
            .into_iter()
            .map(|v| euclid(a, v))
            .enumerate()
            .fold((0, f64::INFINITY), |best, (j, d)| if d < best.1 { (j, d) } else { best });
        matches.push(j);
        distances.push(d);
    }
    Ok(AlignmentResult {
        s_av: distances.iter().sum(),
        matches,
        distances,
        k_a: audio.nrows(),
        k_v: visual.nrows(),
    })
}

/// Gradients of `g_s · S_av` with respect to both center sets.
/// Coincident centers take the zero subgradient.
pub fn scene_distance_backward(
    audio: &Array2<f64>,
    visual: &Array2<f64>,
    result: &AlignmentResult,
    g_s: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if audio.nrows() != result.k_a || visual.nrows() != result.k_v || audio.ncols() != visual.ncols() {
        return shape("centers do not match the alignment result");
    }
    let mut ga = Array2::zeros(audio.raw_dim());
    let mut gv = Array2::zeros(visual.raw_dim());
    for (i, (&j, &d)) in result.matches.iter().zip(&result.distances).enumerate() {
        if d == 0.0 {
            continue;
        }
        let dir = (&audio.row(i) - &visual.row(j)) * (g_s / d);
        ga.row_mut(i).assign(&dir);
        gv.row_mut(j).scaled_add(-1.0, &dir);
    }
    Ok((ga, gv))
}

/// Rows scaled to unit L2 norm; zero rows stay zero.
pub fn normalize_rows(c: &Array2<f64>) -> Array2<f64> {
    let mut out = c.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

pub fn normalize_rows_backward(c: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(c.raw_dim());
    for ((x, gy), mut gx) in c.rows().into_iter().zip(g.rows()).zip(out.rows_mut()) {
        let n = x.dot(&x).sqrt();
        if n > 0.0 {
            let y = &x / n;
            let proj = y.dot(&gy);
            gx.assign(&((&gy - &(y * proj)) / n));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub margin: f64,
    pub negatives_per_positive: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { margin: 1.0, negatives_per_positive: 1 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return invalid("margin must be positive");
        }
        if self.negatives_per_positive == 0 {
            return invalid("need at least one negative per positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDistance {
    pub s: f64,
    pub positive: bool,
}

fn check_pairs(pairs: &[PairDistance]) -> Result<()> {
    if pairs.is_empty() {
        return invalid("contrastive loss needs at least one pair");
    }
    if let Some(p) = pairs.iter().find(|p| !(p.s >= 0.0) || !p.s.is_finite()) {
        return Err(if p.s.is_finite() {
            Error::InvalidArgument(format!("pair distance {} is negative", p.s))
        } else {
            Error::NonFinite("pair distance")
        });
    }
    Ok(())
}

pub fn contrastive_loss(pairs: &[PairDistance], cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    check_pairs(pairs)?;
    let sum: f64 = pairs
        .iter()
        .map(|p| {
            if p.positive {
                p.s * p.s
            } else {
                (cfg.margin - p.s).max(0.0).powi(2)
            }
        })
        .sum();
    Ok(sum / (2.0 * pairs.len() as f64))
}

/// dL/dS for every pair; zero at and beyond the hinge.
pub fn contrastive_grad(pairs: &[PairDistance], cfg: &ContrastiveConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_pairs(pairs)?;
    let n = pairs.len() as f64;
    Ok(pairs
        .iter()
        .map(|p| {
            if p.positive {
                p.s / n
            } else if p.s < cfg.margin {
                -(cfg.margin - p.s) / n
            } else {
                0.0
            }
        })
        .collect())
}

/// Forward record of one pair under the normalised-center pipeline.
#[derive(Debug, Clone)]
pub struct PairTape {
    audio: Array2<f64>,
    visual: Array2<f64>,
    result: AlignmentResult,
}

impl PairTape {
    pub fn result(&self) -> &AlignmentResult {
        &self.result
    }
}

/// Normalises both center sets, then measures their scene distance.
pub fn pair_distance(audio: &Array2<f64>, visual: &Array2<f64>) -> Result<PairTape> {
    let result = scene_distance(&normalize_rows(audio), &normalize_rows(visual))?;
    Ok(PairTape { audio: audio.clone(), visual: visual.clone(), result })
}

/// Chains `dL/dS` back to the raw (unnormalised) centers of one pair.
pub fn loss_backward(tape: &PairTape, dl_ds: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    let (an, vn) = (normalize_rows(&tape.audio), normalize_rows(&tape.visual));
    let (ga, gv) = scene_distance_backward(&an, &vn, &tape.result, dl_ds)?;
    Ok((normalize_rows_backward(&tape.audio, &ga), normalize_rows_backward(&tape.visual, &gv)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub source_center: Array1<f64>,
    pub center_index: usize,
    /// grid_h × grid_w
    pub mask: Array2<f64>,
    pub upsampled_mask: Array2<f64>,
}

/// Picks the visual center nearest the given audio center (both sets
/// normalised as in training) and returns its assignment map.
pub fn localize(
    audio: &ClusterState,
    visual: &ClusterState,
    source_index: usize,
    grid: (usize, usize),
    image: (usize, usize),
) -> Result<LocalizationResult> {
    let k_a = audio.centers.nrows();
    if source_index >= k_a {
        return Err(Error::IndexOutOfRange { index: source_index, len: k_a });
    }
    if grid.0 * grid.1 != visual.assignments.nrows() {
        return shape(format!(
            "{}×{} grid does not hold {} assignment rows",
            grid.0,
            grid.1,
            visual.assignments.nrows()
        ));
    }
    let a = normalize_rows(&audio.centers);
    let v = normalize_rows(&visual.centers);
    let j = scene_distance(&a.slice(ndarray::s![source_index..source_index + 1, ..]).to_owned(), &v)?.matches[0];
    let mask = visual
        .assignments
        .column(j)
        .to_owned()
        .into_shape_with_order(grid)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let upsampled_mask = bilinear_resize(&mask, image.0, image.1)?;
    Ok(LocalizationResult { source_center: visual.centers.row(j).to_owned(), center_index: j, mask, upsampled_mask })
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(grid: &Array2<f64>, out_h: usize, out_w: usize) -> Result<Array2<f64>> {
    let (h, w) = grid.dim();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return invalid("cannot resize an empty grid");
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    Ok(Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (y0, y1, fy) = ys[r];
        let (x0, x1, fx) = xs[c];
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Center-to-center distance matrix, used for diagnostics.
pub fn center_distances(audio: &Array2<f64>, visual: &Array2<f64>) -> Array2<f64> {
    let mut d = Array2::zeros((audio.nrows(), visual.nrows()));
    for (i, a) in audio.axis_iter(Axis(0)).enumerate() {
        for (j, v) in visual.axis_iter(Axis(0)).enumerate() {
            d[[i, j]] = euclid(a, v);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, &[17]);
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn subset_gives_zero_distance() {
        let v = randn(3, 4, 1);
        let a = v.select(Axis(0), &[2, 0]);
        let r = scene_distance(&a, &v).unwrap();
        assert_eq!(r.s_av, 0.0);
        assert_eq!(r.matches, vec![2, 0]);
    }

    #[test]
    fn three_four_five() {
        let r = scene_distance(&array![[0.0, 0.0]], &array![[3.0, 4.0], [6.0, 8.0]]).unwrap();
        assert_eq!(r.s_av, 5.0);
        assert_eq!(r.matches, vec![0]);
    }

    #[test]
    fn permutation_moves_matches() {
        let a = randn(2, 5, 2);
        let v = randn(3, 5, 3);
        let perm = [2, 0, 1];
        let r = scene_distance(&a, &v).unwrap();
        let rp = scene_distance(&a, &v.select(Axis(0), &perm)).unwrap();
        assert!((r.s_av - rp.s_av).abs() < 1e-12);
        for (m, mp) in r.matches.iter().zip(&rp.matches) {
            assert_eq!(perm[*mp], *m);
        }
    }

    #[test]
    fn mismatched_channels() {
        assert!(scene_distance(&randn(1, 3, 0), &randn(2, 4, 0)).is_err());
    }

    #[test]
    fn translation_keeps_distance_and_matches() {
        let a = randn(2, 3, 4);
        let v = randn(3, 3, 5);
        let t = array![1.0, -7.0, 2.5];
        let r = scene_distance(&a, &v).unwrap();
        let rt = scene_distance(&(&a + &t), &(&v + &t)).unwrap();
        assert!((r.s_av - rt.s_av).abs() < 1e-12);
        assert_eq!(r.matches, rt.matches);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let r = scene_distance(&array![[0.0, 0.0]], &array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(r.matches, vec![0]);
    }

    #[test]
    fn loss_examples() {
        let cfg = ContrastiveConfig::default();
        let pos = PairDistance { s: 0.0, positive: true };
        assert_eq!(contrastive_loss(&[pos], &cfg).unwrap(), 0.0);
        let neg = PairDistance { s: 1.3, positive: false };
        assert_eq!(contrastive_loss(&[neg], &cfg).unwrap(), 0.0);
        let pairs = [PairDistance { s: 1.0, positive: true }, PairDistance { s: 0.5, positive: false }];
        assert!((contrastive_loss(&pairs, &cfg).unwrap() - 0.3125).abs() < 1e-15);
        assert!(contrastive_loss(&[], &cfg).is_err());
        assert!(contrastive_loss(&[PairDistance { s: -1.0, positive: true }], &cfg).is_err());
    }

    #[test]
    fn saturated_negative_has_zero_gradient() {
        let g = contrastive_grad(&[PairDistance { s: 2.0, positive: false }], &ContrastiveConfig::default()).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let cfg = ContrastiveConfig::default();
        let pairs = vec![
            PairDistance { s: 0.7, positive: true },
            PairDistance { s: 0.4, positive: false },
            PairDistance { s: 1.6, positive: false },
        ];
        let g = contrastive_grad(&pairs, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..pairs.len() {
            let mut p = pairs.clone();
            let mut m = pairs.clone();
            p[i].s += h;
            m[i].s -= h;
            let num = (contrastive_loss(&p, &cfg).unwrap() - contrastive_loss(&m, &cfg).unwrap()) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-8, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn pair_backward_matches_differences() {
        let a = randn(2, 8, 6);
        let v = randn(3, 8, 7);
        let tape = pair_distance(&a, &v).unwrap();
        let (ga, gv) = loss_backward(&tape, 1.0).unwrap();
        let f = |a: &Array2<f64>, v: &Array2<f64>| pair_distance(a, v).unwrap().result.s_av;
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (which, g) in [(0, &ga), (1, &gv)] {
            for idx in 0..g.len() {
                let (mut ap, mut vp, mut am, mut vm) = (a.clone(), v.clone(), a.clone(), v.clone());
                let (p, m) = if which == 0 { (&mut ap, &mut am) } else { (&mut vp, &mut vm) };
                p.as_slice_mut().unwrap()[idx] += h;
                m.as_slice_mut().unwrap()[idx] -= h;
                let num = (f(&ap, &vp) - f(&am, &vm)) / (2.0 * h);
                let an = g.as_slice().unwrap()[idx];
                worst = worst.max((num - an).abs() / num.abs().max(an.abs()).max(1e-6));
            }
        }
        assert!(worst <= 1e-4, "{worst}");
        let used: Vec<usize> = tape.result().matches.clone();
        for j in 0..3 {
            if !used.contains(&j) {
                assert!(gv.row(j).iter().all(|&x| x == 0.0));
            }
        }
    }

    fn state(centers: Array2<f64>, assignments: Array2<f64>) -> ClusterState {
        ClusterState {
            centers,
            assignments,
            objective: 0.0,
            objective_history: vec![0.0],
            free_energy_history: vec![0.0],
            beta: 1.0,
        }
    }

    #[test]
    fn localize_picks_exact_copy_and_reshapes_column() {
        let audio = state(array![[0.2, 0.9, 0.1]], Array2::from_elem((4, 1), 1.0));
        let mut w = Array2::zeros((4, 3));
        for i in 0..4 {
            w[[i, 0]] = 0.1 * i as f64;
            w[[i, 1]] = 0.25;
            w[[i, 2]] = 0.75 - 0.1 * i as f64;
        }
        let visual = state(array![[1.0, 0.0, 0.0], [0.2, 0.9, 0.1], [0.0, 0.0, 1.0]], w.clone());
        let r = localize(&audio, &visual, 0, (2, 2), (8, 8)).unwrap();
        assert_eq!(r.center_index, 1);
        assert_eq!(r.mask.iter().copied().collect::<Vec<_>>(), w.column(1).to_vec());
        assert_eq!(r.upsampled_mask.dim(), (8, 8));
        assert!(localize(&audio, &visual, 1, (2, 2), (8, 8)).is_err());
    }

    #[test]
    fn bilinear_preserves_constants_and_range() {
        let g = Array2::from_elem((3, 5), 0.4);
        let up = bilinear_resize(&g, 12, 20).unwrap();
        assert!(up.iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let g = randn(4, 4, 9).mapv(f64::abs);
        let up = bilinear_resize(&g, 32, 32).unwrap();
        let (lo, hi) = g.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(up.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}
