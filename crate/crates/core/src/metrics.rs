//! Localization scores: thresholded IoU, cIoU and the area under the
//! cIoU-vs-threshold curve.

use ndarray::Array2;
use rand::Rng;

use crate::alignment::bilinear_resize;
use crate::error::{invalid, shape, Result};

/// Fraction of the prediction's maximum at which it is binarised.
pub const MASK_THRESHOLD: f64 = 0.5;

/// IoU thresholds 0, 0.05, …, 1.0.
pub fn auc_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// IoU between `pred ≥ 0.5·max(pred)` and `gt > 0.5`. An all-zero
/// prediction selects nothing.
pub fn mask_iou(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return shape(format!("prediction {:?} and ground truth {:?} differ", pred.dim(), gt.dim()));
    }
    let peak = pred.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cut = MASK_THRESHOLD * peak;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let a = peak > 0.0 && p >= cut;
        let b = g > 0.5;
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Fraction of scenes whose IoU reaches `threshold`.
pub fn ciou(ious: &[f64], threshold: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v >= threshold).count() as f64 / ious.len() as f64
}

/// Trapezoid area under cIoU over the standard thresholds.
pub fn auc(ious: &[f64]) -> f64 {
    let t = auc_thresholds();
    let c: Vec<f64> = t.iter().map(|&x| ciou(ious, x)).collect();
    t.windows(2).zip(c.windows(2)).map(|(t, c)| 0.5 * (t[1] - t[0]) * (c[0] + c[1])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocalizationSummary {
    pub ciou: f64,
    pub auc: f64,
    pub mean_iou: f64,
    pub scenes: usize,
}

pub fn summarize(ious: &[f64]) -> LocalizationSummary {
    let mean_iou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
    LocalizationSummary { ciou: ciou(ious, 0.5), auc: auc(ious), mean_iou, scenes: ious.len() }
}

/// Baseline map: every grid cell goes to one of `k` centers uniformly at
/// random and one center is picked at random; upsampled like a real mask.
pub fn random_assignment_mask<R: Rng>(
    rng: &mut R,
    grid: (usize, usize),
    k: usize,
    image: (usize, usize),
) -> Result<Array2<f64>> {
    if k == 0 {
        return invalid("need at least one center");
    }
    let chosen = rng.random_range(0..k);
    let cells = Array2::from_shape_fn(grid, |_| if rng.random_range(0..k) == chosen { 1.0 } else { 0.0 });
    bilinear_resize(&cells, image.0, image.1)
}
