//! Soft K-means in channel space with a differentiable, unrolled EM loop.
//!
//! Distances are squared Euclidean throughout, which makes the weighted
//! mean of the M-step the exact minimiser of the objective for fixed
//! assignments.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// Column mass below which a cluster counts as empty.
pub const EMPTY_MASS: f64 = 1e-12;
const MIN_MEDIAN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Stiffness {
    Fixed(f64),
    /// `scale / median pairwise squared distance` of the points being clustered.
    Auto { scale: f64 },
}

impl Default for Stiffness {
    fn default() -> Self {
        Stiffness::Auto { scale: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftKMeansConfig {
    pub k: usize,
    pub beta: Stiffness,
    pub iters: usize,
}

impl SoftKMeansConfig {
    pub fn new(k: usize) -> Self {
        Self { k, beta: Stiffness::default(), iters: 10 }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return invalid("k must be at least 1");
        }
        if self.iters == 0 {
            return invalid("at least one EM iteration is required");
        }
        match self.beta {
            Stiffness::Fixed(b) | Stiffness::Auto { scale: b } if !(b > 0.0 && b.is_finite()) => {
                invalid("stiffness must be positive and finite")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// k×C
    pub centers: Array2<f64>,
    /// N×k, rows sum to one.
    pub assignments: Array2<f64>,
    /// Objective after the last iteration.
    pub objective: f64,
    /// Objective after every iteration.
    pub objective_history: Vec<f64>,
    /// Objective plus the entropy term `(1/β) Σ w ln w`, per iteration.
    pub free_energy_history: Vec<f64>,
    pub beta: f64,
}

fn check_finite(a: &Array2<f64>, what: &'static str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// N×k matrix of squared distances.
pub fn sq_distances(points: &Array2<f64>, centers: &Array2<f64>) -> Array2<f64> {
    let pn = points.map_axis(Axis(1), |r| r.dot(&r));
    let cn = centers.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = points.dot(&centers.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (pn[i] + cn[j] - 2.0 * *v).max(0.0);
    }
    d
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut w = logits.clone();
    for mut row in w.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    w
}

pub fn e_step(points: &Array2<f64>, centers: &Array2<f64>, beta: f64) -> Result<Array2<f64>> {
    if centers.nrows() == 0 {
        return invalid("need at least one center");
    }
    if points.ncols() != centers.ncols() {
        return shape("points and centers have different channel counts");
    }
    if !(beta > 0.0) {
        return invalid("beta must be positive");
    }
    check_finite(points, "points")?;
    check_finite(centers, "centers")?;
    Ok(softmax_rows(&(sq_distances(points, centers) * -beta)))
}

/// Weighted means; empty clusters are re-seeded onto the point farthest
/// from all other centers. Returns the rescued `(cluster, point)` pairs.
fn m_step_inner(points: &Array2<f64>, w: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Vec<(usize, usize)>) {
    let mass = w.sum_axis(Axis(0));
    let mut centers = w.t().dot(points);
    let mut empty = Vec::new();
    for (j, mut row) in centers.rows_mut().into_iter().enumerate() {
        if mass[j] < EMPTY_MASS {
            empty.push(j);
        } else {
            row.mapv_inplace(|v| v / mass[j]);
        }
    }
    let mut rescued = Vec::new();
    for &j in &empty {
        let filled: Vec<usize> =
            (0..centers.nrows()).filter(|c| !empty.contains(c) || rescued.iter().any(|&(r, _)| r == *c)).collect();
        let far = (0..points.nrows())
            .map(|i| {
                let d = filled
                    .iter()
                    .map(|&c| sq_dist(points.row(i), centers.row(c)))
                    .fold(f64::INFINITY, f64::min);
                (i, d)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        centers.row_mut(j).assign(&points.row(far));
        rescued.push((j, far));
    }
    (centers, mass, rescued)
}

pub fn m_step(points: &Array2<f64>, assignments: &Array2<f64>) -> Result<Array2<f64>> {
    if points.nrows() != assignments.nrows() {
        return shape("assignments and points disagree on the number of points");
    }
    Ok(m_step_inner(points, assignments).0)
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn objective(points: &Array2<f64>, centers: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (sq_distances(points, centers) * w).sum()
}

fn entropy_term(w: &Array2<f64>) -> f64 {
    w.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

/// Max-norm point first, then repeatedly the point farthest from the chosen set.
pub fn farthest_point_init(points: &Array2<f64>, k: usize) -> Vec<usize> {
    let n = points.nrows();
    let argmax = |vals: &[f64]| {
        vals.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0
    };
    let norms: Vec<f64> = points.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut chosen = vec![argmax(&norms)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = argmax(&nearest);
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    chosen
}

/// Median pair and its weights for the automatic stiffness.
#[derive(Debug, Clone)]
struct MedianInfo {
    value: f64,
    /// (i, j, weight) pairs averaged into the median.
    pairs: Vec<(usize, usize, f64)>,
    clamped: bool,
}

fn median_pairwise(points: &Array2<f64>) -> MedianInfo {
    let n = points.nrows();
    let mut all: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    let d = sq_distances(points, points);
    for i in 0..n {
        for j in i + 1..n {
            all.push((d[[i, j]], i, j));
        }
    }
    if all.is_empty() {
        return MedianInfo { value: MIN_MEDIAN, pairs: vec![], clamped: true };
    }
    let m = all.len();
    let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2)));
    let pairs = if m % 2 == 1 {
        let (_, mid, _) = all.select_nth_unstable_by(m / 2, cmp);
        vec![(mid.1, mid.2, 1.0)]
    } else {
        let (lower, hi, _) = all.select_nth_unstable_by(m / 2, cmp);
        let hi = *hi;
        let lo = *lower.iter().max_by(|a, b| cmp(a, b)).expect("non-empty lower half");
        vec![(lo.1, lo.2, 0.5), (hi.1, hi.2, 0.5)]
    };
    // exact pair distances, recomputed directly for a consistent derivative
    let value: f64 = pairs.iter().map(|&(i, j, w)| w * sq_dist(points.row(i), points.row(j))).sum();
    if value < MIN_MEDIAN {
        MedianInfo { value: MIN_MEDIAN, pairs, clamped: true }
    } else {
        MedianInfo { value, pairs, clamped: false }
    }
}

struct Step {
    /// Centers entering the E-step.
    centers_in: Array2<f64>,
    assignments: Array2<f64>,
    distances: Array2<f64>,
    mass: Array1<f64>,
    centers_out: Array2<f64>,
    rescued: Vec<(usize, usize)>,
}

/// Recorded forward pass of [`soft_kmeans_taped`].
pub struct ClusterTape {
    n: usize,
    dim: usize,
    k: usize,
    beta: f64,
    init: Vec<usize>,
    median: Option<(MedianInfo, f64)>,
    steps: Vec<Step>,
}

pub fn soft_kmeans(points: &Array2<f64>, cfg: &SoftKMeansConfig) -> Result<ClusterState> {
    soft_kmeans_taped(points, cfg).map(|(s, _)| s)
}

pub fn soft_kmeans_taped(points: &Array2<f64>, cfg: &SoftKMeansConfig) -> Result<(ClusterState, ClusterTape)> {
    cfg.validate()?;
    let (n, dim) = points.dim();
    if n < cfg.k {
        return invalid(format!("{n} points cannot form {} clusters", cfg.k));
    }
    check_finite(points, "points")?;

    let (beta, median) = match cfg.beta {
        Stiffness::Fixed(b) => (b, None),
        Stiffness::Auto { scale } => {
            let info = median_pairwise(points);
            (scale / info.value, Some((info, scale)))
        }
    };

    let init = farthest_point_init(points, cfg.k);
    let mut centers = Array2::zeros((cfg.k, dim));
    for (j, &i) in init.iter().enumerate() {
        centers.row_mut(j).assign(&points.row(i));
    }

    let mut steps = Vec::with_capacity(cfg.iters);
    let mut objective_history = Vec::with_capacity(cfg.iters);
    let mut free_energy_history = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let distances = sq_distances(points, &centers);
        let w = softmax_rows(&(&distances * -beta));
        let (next, mass, rescued) = m_step_inner(points, &w);
        let j = objective(points, &next, &w);
        objective_history.push(j);
        free_energy_history.push(j + entropy_term(&w) / beta);
        steps.push(Step {
            centers_in: centers,
            assignments: w,
            distances,
            mass,
            centers_out: next.clone(),
            rescued,
        });
        centers = next;
    }
    let last = steps.last().expect("iters >= 1");
    let state = ClusterState {
        centers: last.centers_out.clone(),
        assignments: last.assignments.clone(),
        objective: *objective_history.last().expect("iters >= 1"),
        objective_history,
        free_energy_history,
        beta,
    };
    let tape = ClusterTape { n, dim, k: cfg.k, beta, init, median, steps };
    Ok((state, tape))
}

/// Reverse-mode gradient with respect to the points, given upstream
/// gradients on the final centers (k×C) and final assignments (N×k).
pub fn soft_kmeans_backward(
    points: &Array2<f64>,
    tape: &ClusterTape,
    grad_centers: &Array2<f64>,
    grad_assignments: &Array2<f64>,
) -> Result<Array2<f64>> {
    if points.dim() != (tape.n, tape.dim) {
        return shape("points do not match the recorded forward pass");
    }
    if grad_centers.dim() != (tape.k, tape.dim) || grad_assignments.dim() != (tape.n, tape.k) {
        return shape("upstream gradients do not match the recorded forward pass");
    }
    let mut gx = Array2::<f64>::zeros((tape.n, tape.dim));
    let mut gc = grad_centers.clone();
    let mut gw = grad_assignments.clone();
    let mut g_beta = 0.0;

    for step in tape.steps.iter().rev() {
        let w = &step.assignments;
        // M-step: c_j = Σ_i w_ij x_i / m_j
        let rescued_rows: Vec<usize> = step.rescued.iter().map(|&(j, _)| j).collect();
        for &(j, i) in &step.rescued {
            let g = gc.row(j).to_owned();
            gx.row_mut(i).scaled_add(1.0, &g);
        }
        let mut gc_scaled = gc.clone();
        for j in 0..tape.k {
            if rescued_rows.contains(&j) {
                gc_scaled.row_mut(j).fill(0.0);
            } else {
                gc_scaled.row_mut(j).mapv_inplace(|v| v / step.mass[j]);
            }
        }
        // dL/dw_ij += <gc_j, x_i - c_j> / m_j
        let proj = points.dot(&gc_scaled.t());
        let offs = (&step.centers_out * &gc_scaled).sum_axis(Axis(1));
        for ((i, j), g) in gw.indexed_iter_mut() {
            *g += proj[[i, j]] - offs[j];
        }
        gx += &w.dot(&gc_scaled);

        // softmax
        let row_dot = (&gw * w).sum_axis(Axis(1));
        let mut g_logits = gw.clone();
        for ((i, _), g) in g_logits.indexed_iter_mut() {
            *g -= row_dot[i];
        }
        g_logits *= w;
        // logits = -β D
        g_beta -= (&g_logits * &step.distances).sum();
        let gd = g_logits * -tape.beta;

        // D_ij = |x_i - c_j|^2
        let row_sum = gd.sum_axis(Axis(1));
        let col_sum = gd.sum_axis(Axis(0));
        let gd_c = gd.dot(&step.centers_in);
        for ((i, ch), g) in gx.indexed_iter_mut() {
            *g += 2.0 * (row_sum[i] * points[[i, ch]] - gd_c[[i, ch]]);
        }
        let gd_x = gd.t().dot(points);
        let mut gc_prev = Array2::zeros((tape.k, tape.dim));
        for ((j, ch), g) in gc_prev.indexed_iter_mut() {
            *g = 2.0 * (col_sum[j] * step.centers_in[[j, ch]] - gd_x[[j, ch]]);
        }
        gc = gc_prev;
        gw = Array2::zeros((tape.n, tape.k));
    }

    for (j, &i) in tape.init.iter().enumerate() {
        let g = gc.row(j).to_owned();
        gx.row_mut(i).scaled_add(1.0, &g);
    }

    if let Some((info, scale)) = &tape.median {
        if !info.clamped {
            let g_median = g_beta * (-scale / (info.value * info.value));
            for &(i, j, wt) in &info.pairs {
                let diff = &points.row(i) - &points.row(j);
                gx.row_mut(i).scaled_add(2.0 * g_median * wt, &diff);
                gx.row_mut(j).scaled_add(-2.0 * g_median * wt, &diff);
            }
        }
    }
    Ok(gx)
}
