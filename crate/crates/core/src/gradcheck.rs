//! Central-difference gradient checking over a flat parameter vector.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Coordinates probed; every coordinate when the vector is shorter.
    pub coords: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, coords: 200, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub coords_checked: usize,
    pub passed: bool,
}

pub fn relative_error(numeric: f64, analytic: f64, floor: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(floor)
}

/// Compares `analytic` with central differences of `loss` around `params`.
pub fn gradcheck<F>(mut loss: F, params: &[f64], analytic: &[f64], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return invalid("analytic gradient length differs from the parameter count");
    }
    if params.is_empty() {
        return invalid("nothing to check");
    }
    if !(opts.step > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let first = loss(params)?;
    let second = loss(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let indices: Vec<usize> = if params.len() <= opts.coords {
        (0..params.len()).collect()
    } else {
        let mut idx = sample(&mut stream(opts.seed, &[0x6763]), params.len(), opts.coords).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut probe = params.to_vec();
    let mut worst = (0.0, indices[0]);
    for &i in &indices {
        probe[i] = params[i] + opts.step;
        let up = loss(&probe)?;
        probe[i] = params[i] - opts.step;
        let down = loss(&probe)?;
        probe[i] = params[i];
        let err = relative_error((up - down) / (2.0 * opts.step), analytic[i], opts.floor);
        if !(err <= worst.0) {
            worst = (err, i);
        }
    }
    Ok(GradcheckReport {
        max_rel_err: worst.0,
        worst_index: worst.1,
        coords_checked: indices.len(),
        passed: worst.0 <= opts.tol,
    })
}
