use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::contour::curvature_zero_contour;
use super::stationary::pinv_solve;
use super::{CompiledField, ScalarField};
use crate::error::{Error, Result};

const RES_TOL: f64 = 1e-8;
const STEP_TOL: f64 = 1e-12;
const MAX_ITER: usize = 100;
const FD_STEP: f64 = 1e-4;

/// Starting point for [`solve_critical_point`]; without `xi` the Hessian
/// eigenvector of smallest `|eigenvalue|` is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalGuess {
    pub x: Vec<f64>,
    pub t: f64,
    pub xi: Option<Vec<f64>>,
}

/// Solution of `∇F = 0, ∇²F·ξ = 0, ‖ξ‖ = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub x_star: Vec<f64>,
    pub t_star: f64,
    /// Unit null vector, oriented so its first nonzero component is positive.
    pub xi: Vec<f64>,
    /// Infinity norm of the three residual blocks.
    pub residual: f64,
    pub iterations: usize,
}

fn residual(g: &DVector<f64>, h: &DMatrix<f64>, xi: &DVector<f64>) -> DVector<f64> {
    let n = g.len();
    let hx = h * xi;
    let mut r = DVector::zeros(2 * n + 1);
    r.rows_mut(0, n).copy_from(g);
    r.rows_mut(n, n).copy_from(&hx);
    r[2 * n] = xi.dot(xi) - 1.0;
    r
}

fn orient(xi: &mut DVector<f64>) {
    if let Some(&first) = xi.iter().find(|v| v.abs() > 1e-12) {
        if first < 0.0 {
            *xi *= -1.0;
        }
    }
}

/// Newton iteration on the square `(2n + 1)` system in `(x, T, ξ)`.
///
/// Third derivatives come from central differences (step 1e-4) of the AD
/// Hessian. Linear solves use an SVD pseudo-inverse, so the iteration keeps
/// going (linearly) where symmetric bifurcations make the Jacobian singular
/// at the solution. Converged means residual below 1e-8 with the step
/// reduced to round-off, or residual below 1e-8 at the iteration limit.
pub fn solve_critical_point<F: ScalarField + ?Sized>(field: &F, guess: &CriticalGuess) -> Result<CriticalPoint> {
    solve_compiled(&CompiledField::new(field)?, guess)
}

pub(crate) fn solve_compiled(field: &CompiledField, guess: &CriticalGuess) -> Result<CriticalPoint> {
    let n = field.dim();
    if guess.x.len() != n {
        return Err(Error::Dimension { expected: n, got: guess.x.len() });
    }
    let mut x = DVector::from_column_slice(&guess.x);
    let mut t = guess.t;
    let mut xi = match &guess.xi {
        Some(v) if v.len() == n => DVector::from_column_slice(v),
        Some(v) => return Err(Error::Dimension { expected: n, got: v.len() }),
        None => {
            let eig = SymmetricEigen::new(field.hess(x.as_slice(), t)?);
            let i = eig.eigenvalues.iamin();
            eig.eigenvectors.column(i).into_owned()
        }
    };
    let norm = xi.norm();
    if norm == 0.0 {
        return Err(Error::Contract("initial null vector must be nonzero".into()));
    }
    xi /= norm;

    let dim = 2 * n + 1;
    let mut last_res = f64::INFINITY;
    let mut ratios = [f64::NAN; 2];
    let mut prev_step = f64::NAN;
    for iter in 0..MAX_ITER {
        let (_, grad, full, _) = field.full(x.as_slice(), t)?;
        let g = grad.rows(0, n).into_owned();
        let h = full.view((0, 0), (n, n)).into_owned();
        let r = residual(&g, &h, &xi);
        last_res = r.amax();
        if !last_res.is_finite() {
            return Err(Error::NonFinite(format!("critical-point residual at T = {t}")));
        }
        let mut j = DMatrix::zeros(dim, dim);
        j.view_mut((0, 0), (n, n)).copy_from(&h);
        j.view_mut((0, n), (n, 1)).copy_from(&full.view((0, n), (n, 1)));
        let mut probe = x.clone();
        for k in 0..=n {
            let dh = if k < n {
                probe[k] = x[k] + FD_STEP;
                let hp = field.hess(probe.as_slice(), t)?;
                probe[k] = x[k] - FD_STEP;
                let hm = field.hess(probe.as_slice(), t)?;
                probe[k] = x[k];
                (hp - hm) / (2.0 * FD_STEP)
            } else {
                let hp = field.hess(x.as_slice(), t + FD_STEP)?;
                let hm = field.hess(x.as_slice(), t - FD_STEP)?;
                (hp - hm) / (2.0 * FD_STEP)
            };
            j.view_mut((n, k), (n, 1)).copy_from(&(dh * &xi));
        }
        j.view_mut((n, n + 1), (n, n)).copy_from(&h);
        for k in 0..n {
            j[(2 * n, n + 1 + k)] = 2.0 * xi[k];
        }
        let Some(step) = pinv_solve(&j, &(-&r), 1e-300) else {
            return Err(Error::Solver(format!(
                "singular Jacobian at T = {t} (residual {last_res:e}); try a different initial guess"
            )));
        };
        if !step.iter().all(|v| v.is_finite()) {
            return Err(Error::Solver(format!("non-finite Newton step at T = {t}; try a different initial guess")));
        }
        // steady linear contraction means a singular (symmetric) root:
        // extrapolate the geometric tail of the iteration
        let size = step.amax();
        ratios = [ratios[1], size / prev_step];
        prev_step = size;
        let mut factor = 1.0;
        if ratios.iter().all(|r| (0.4..0.95).contains(r)) && (ratios[0] - ratios[1]).abs() < 0.05 {
            factor = 1.0 / (1.0 - ratios[1]);
            ratios = [f64::NAN; 2];
            prev_step = f64::NAN;
        }
        for k in 0..n {
            x[k] += factor * step[k];
        }
        t += factor * step[n];
        for k in 0..n {
            xi[k] += factor * step[n + 1 + k];
        }
        let scale = 1.0 + x.amax().max(t.abs());
        if last_res < RES_TOL && step.amax() <= STEP_TOL * scale {
            return finish(field, x, t, xi, iter + 1);
        }
    }
    let (_, grad, full, _) = field.full(x.as_slice(), t)?;
    let r = residual(&grad.rows(0, n).into_owned(), &full.view((0, 0), (n, n)).into_owned(), &xi);
    if r.amax() < RES_TOL {
        return finish(field, x, t, xi, MAX_ITER);
    }
    Err(Error::Solver(format!(
        "critical-point Newton did not converge in {MAX_ITER} iterations; last residual {:e} (previous {last_res:e})",
        r.amax()
    )))
}

fn evaluate(field: &CompiledField, x: &DVector<f64>, t: f64, xi: &DVector<f64>) -> Result<f64> {
    let n = x.len();
    let (_, grad, full, _) = field.full(x.as_slice(), t)?;
    Ok(residual(&grad.rows(0, n).into_owned(), &full.view((0, 0), (n, n)).into_owned(), xi).amax())
}

/// Normalizes and orients `ξ`, then polishes against the rounding of `T`:
/// near a symmetric bifurcation the attainable accuracy in `x` is limited by
/// the spacing of floating-point temperatures, so `x` is re-solved at the
/// few representable temperatures around `T` and the smallest residual kept.
fn finish(field: &CompiledField, x: DVector<f64>, t: f64, mut xi: DVector<f64>, iterations: usize) -> Result<CriticalPoint> {
    xi /= xi.norm();
    orient(&mut xi);
    let mut best = (evaluate(field, &x, t, &xi)?, x, t, xi.clone());
    let mut candidates = vec![t];
    let (mut up, mut down) = (t, t);
    for _ in 0..4 {
        up = next_toward(up, f64::INFINITY);
        down = next_toward(down, f64::NEG_INFINITY);
        candidates.push(up);
        candidates.push(down);
    }
    for tc in candidates {
        let Some((xc, _)) = super::stationary::newton(field, best.1.as_slice(), tc)? else { continue };
        let xc = DVector::from_vec(xc);
        let mut xic = if xi.len() == 1 {
            xi.clone()
        } else {
            let eig = SymmetricEigen::new(field.hess(xc.as_slice(), tc)?);
            eig.eigenvectors.column(eig.eigenvalues.iamin()).into_owned()
        };
        orient(&mut xic);
        let r = evaluate(field, &xc, tc, &xic)?;
        if r < best.0 && (&xc - &best.1).amax() < 1e-6 {
            best = (r, xc, tc, xic);
        }
    }
    let (r, x, t, xi) = best;
    Ok(CriticalPoint { x_star: x.as_slice().to_vec(), t_star: t, xi: xi.as_slice().to_vec(), residual: r, iterations })
}

fn next_toward(v: f64, dir: f64) -> f64 {
    if v == 0.0 {
        return if dir > 0.0 { f64::from_bits(1) } else { -f64::from_bits(1) };
    }
    let bits = v.to_bits();
    let up = (dir > v) == (v > 0.0);
    f64::from_bits(if up { bits + 1 } else { bits - 1 })
}

/// Initial guesses for a one-dimensional field: points of the curvature
/// zero-contour where `|∂F/∂x|` is locally smallest, best first.
pub fn critical_seeds<F: ScalarField + ?Sized>(
    field: &F,
    x_range: (f64, f64),
    t_range: (f64, f64),
    resolution: usize,
    max_seeds: usize,
) -> Result<Vec<CriticalGuess>> {
    let compiled = CompiledField::new(field)?;
    let lines = curvature_zero_contour(field, x_range, t_range, resolution)?;
    let mut cands: Vec<(f64, f64, f64)> = Vec::new();
    for line in &lines {
        let g: Vec<f64> = line
            .points
            .iter()
            .map(|&(x, t)| compiled.partial(&[x], t, 0).map(|(_, d)| d.abs()))
            .collect::<Result<_>>()?;
        for i in 0..g.len() {
            let left = if i > 0 { g[i - 1] } else { f64::INFINITY };
            let right = if i + 1 < g.len() { g[i + 1] } else { f64::INFINITY };
            if g[i] <= left && g[i] <= right {
                cands.push((g[i], line.points[i].0, line.points[i].1));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(cands
        .into_iter()
        .take(max_seeds)
        .map(|(_, x, t)| CriticalGuess { x: vec![x], t, xi: Some(vec![1.0]) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::testfields::*;
    use super::super::FnField;
    use super::*;
    use crate::autodiff::{Expr, Graph};

    #[test]
    fn benchmark_critical_point() {
        for guess in [(0.1, 1.8), (-0.3, 2.4), (0.02, 2.05)] {
            let cp = solve_critical_point(&pitchfork(), &CriticalGuess { x: vec![guess.0], t: guess.1, xi: None }).unwrap();
            assert!(cp.x_star[0].abs() < 1e-8, "{cp:?}");
            assert!((cp.t_star - 2.0).abs() < 1e-8, "{cp:?}");
            assert!(cp.residual < 1e-8);
            assert_eq!(cp.xi, vec![1.0]);
        }
    }

    #[test]
    fn quadratic_has_no_critical_point() {
        let err = solve_critical_point(&quadratic(), &CriticalGuess { x: vec![0.3], t: 1.0, xi: Some(vec![1.0]) });
        assert!(matches!(err, Err(Error::Solver(_))), "{err:?}");
    }

    #[test]
    fn imperfect_bifurcation_converges_quadratically() {
        // x⁴/4 + (T−1)x²/2 + 0.05x: a cusp with a regular fold solution
        let f = FnField {
            dim: 1,
            builder: |g: &mut Graph, x: &[Expr], t: Expr| {
                let x2 = g.square(x[0]);
                let x4 = g.square(x2);
                let a = g.scale(x4, 0.25);
                let tm = g.add_const(t, -1.0);
                let b0 = g.mul(tm, x2);
                let b = g.scale(b0, 0.5);
                let c = g.scale(x[0], 0.05);
                let ab = g.add(a, b);
                g.add(ab, c)
            },
        };
        let cp = solve_critical_point(&f, &CriticalGuess { x: vec![0.5], t: 0.5, xi: None }).unwrap();
        // x³ + (T−1)x + 0.05 = 0 and 3x² + T − 1 = 0 give x = (0.025)^(1/3)
        let xs = 0.025f64.cbrt();
        assert!((cp.x_star[0] - xs).abs() < 1e-9);
        assert!((cp.t_star - (1.0 - 3.0 * xs * xs)).abs() < 1e-9);
        assert!(cp.iterations < 20);
    }

    #[test]
    fn two_dimensional_null_vector() {
        // pitchfork in x₀, stiff in x₁
        let f = FnField {
            dim: 2,
            builder: |g: &mut Graph, x: &[Expr], t: Expr| {
                let x2 = g.square(x[0]);
                let x4 = g.square(x2);
                let a = g.scale(x4, 0.25);
                let tm = g.add_const(t, -1.5);
                let b0 = g.mul(tm, x2);
                let b = g.scale(b0, 0.5);
                let y2 = g.square(x[1]);
                let ab = g.add(a, b);
                g.add(ab, y2)
            },
        };
        let cp = solve_critical_point(&f, &CriticalGuess { x: vec![0.1, 0.05], t: 1.3, xi: None }).unwrap();
        assert!((cp.t_star - 1.5).abs() < 1e-8);
        assert!(cp.x_star.iter().all(|v| v.abs() < 1e-8));
        assert!((cp.xi[0] - 1.0).abs() < 1e-10 && cp.xi[1].abs() < 1e-10);
    }

    #[test]
    fn seeds_found_near_apex() {
        let seeds = critical_seeds(&pitchfork(), (-1.0, 1.0), (0.5, 3.0), 33, 3).unwrap();
        assert!(!seeds.is_empty());
        assert!(seeds[0].x[0].abs() < 0.1 && (seeds[0].t - 2.0).abs() < 0.1, "{:?}", seeds[0]);
    }
}
