use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{CompiledField, ScalarField};
use crate::error::Result;

const GRAD_TOL: f64 = 1e-8;
const STEP_TOL: f64 = 1e-12;
const MAX_ITER: usize = 200;
const MAX_STEP: f64 = 0.5;
const DEDUP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    /// Positive-definite Hessian (a local minimum).
    Stable,
    /// At least one negative Hessian eigenvalue.
    Unstable,
    /// Smallest `|eigenvalue|` vanishes to working precision.
    Marginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryPoint {
    pub x: Vec<f64>,
    pub stability: Stability,
    pub grad_norm: f64,
}

pub(crate) fn classify(h: &DMatrix<f64>) -> Stability {
    let eig = SymmetricEigen::new(h.clone()).eigenvalues;
    let scale = eig.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if eig.iter().any(|v| v.abs() <= 1e-10 * scale) {
        Stability::Marginal
    } else if eig.iter().all(|&v| v > 0.0) {
        Stability::Stable
    } else {
        Stability::Unstable
    }
}

/// Pseudo-inverse solve of `a · d = b`, tolerant of singular `a`.
pub(crate) fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, v| m.max(*v));
    if smax == 0.0 {
        return None;
    }
    svd.solve(b, rcond * smax).ok()
}

/// Newton on `∇ₓF = 0`. Iterates until the gradient is below 1e-8 and the
/// step has shrunk to round-off, so slowly converging degenerate roots are
/// still resolved tightly.
pub(crate) fn newton(field: &CompiledField, seed: &[f64], t: f64) -> Result<Option<(Vec<f64>, f64)>> {
    let mut x = DVector::from_column_slice(seed);
    for _ in 0..MAX_ITER {
        let g = field.grad(x.as_slice(), t)?;
        let h = field.hess(x.as_slice(), t)?;
        let gn = g.amax();
        if !gn.is_finite() {
            return Ok(None);
        }
        let Some(mut step) = pinv_solve(&h, &(-&g), 1e-300) else {
            return Ok(if gn < GRAD_TOL { Some((x.as_slice().to_vec(), gn)) } else { None });
        };
        let norm = step.norm();
        if norm > MAX_STEP {
            step *= MAX_STEP / norm;
        }
        x += &step;
        if gn < GRAD_TOL && step.amax() <= STEP_TOL * (1.0 + x.amax()) {
            let gn = field.grad(x.as_slice(), t)?.amax();
            return Ok((gn < GRAD_TOL).then(|| (x.as_slice().to_vec(), gn)));
        }
    }
    let gn = field.grad(x.as_slice(), t)?.amax();
    Ok((gn < GRAD_TOL).then(|| (x.as_slice().to_vec(), gn)))
}

/// Stationary points reached by Newton from each seed, deduplicated within
/// 1e-6 and sorted lexicographically.
pub fn stationary_points<F: ScalarField + ?Sized>(field: &F, t: f64, seeds: &[Vec<f64>]) -> Result<Vec<StationaryPoint>> {
    stationary_points_within(&CompiledField::new(field)?, t, seeds, None)
}

/// As [`stationary_points`] on a compiled field, discarding points outside `bounds`.
pub fn stationary_points_within(
    field: &CompiledField,
    t: f64,
    seeds: &[Vec<f64>],
    bounds: Option<&[(f64, f64)]>,
) -> Result<Vec<StationaryPoint>> {
    let mut out: Vec<StationaryPoint> = Vec::new();
    for seed in seeds {
        let Some((x, gn)) = newton(field, seed, t)? else { continue };
        if let Some(b) = bounds {
            if x.iter().zip(b).any(|(v, &(lo, hi))| *v < lo || *v > hi) {
                continue;
            }
        }
        if out.iter().any(|p| p.x.iter().zip(&x).all(|(a, b)| (a - b).abs() <= DEDUP)) {
            continue;
        }
        let stability = classify(&field.hess(&x, t)?);
        out.push(StationaryPoint { x, stability, grad_norm: gn });
    }
    out.sort_by(|a, b| {
        a.x.iter().zip(&b.x).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(out)
}

/// Stationary points of a one-dimensional field over a temperature sweep,
/// seeded uniformly on `x_range`.
pub fn bifurcation_diagram<F: ScalarField + ?Sized>(
    field: &F,
    x_range: (f64, f64),
    temperatures: &[f64],
    seeds_per_t: usize,
) -> Result<Vec<(f64, StationaryPoint)>> {
    let compiled = CompiledField::new(field)?;
    let seeds: Vec<Vec<f64>> = crate::losses::linspace(x_range.0, x_range.1, seeds_per_t).into_iter().map(|s| vec![s]).collect();
    let mut out = Vec::new();
    for &t in temperatures {
        for p in stationary_points_within(&compiled, t, &seeds, Some(&[x_range]))? {
            out.push((t, p));
        }
    }
    Ok(out)
}
