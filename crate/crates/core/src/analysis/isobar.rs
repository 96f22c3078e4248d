use serde::{Deserialize, Serialize};

use super::{CompiledField, ScalarField};
use crate::error::{Error, Result};
use crate::losses::linspace;

const ROOT_TOL: f64 = 1e-10;

/// Equilibrium volume at one temperature; `v` is `None` when no root lies in the window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsobarSample {
    pub t: f64,
    pub v: Option<f64>,
    /// Every root of `∂F/∂V + p` found in the window, ascending.
    pub roots: Vec<f64>,
}

/// Safeguarded Newton on a sign-change bracket of `h(V) = ∂F/∂V + p`.
fn refine(field: &CompiledField, t: f64, p: f64, mut a: f64, mut b: f64, rest: &[f64]) -> Result<f64> {
    let mut x = vec![0.0; 1 + rest.len()];
    x[1..].copy_from_slice(rest);
    let mut eval = |v: f64| -> Result<(f64, f64)> {
        x[0] = v;
        let (_, d) = field.partial(&x, t, 0)?;
        let c = field.curvature(&x, t, 0)?;
        Ok((d + p, c))
    };
    let (mut ha, _) = eval(a)?;
    let mut v = 0.5 * (a + b);
    for _ in 0..200 {
        let (h, dh) = eval(v)?;
        if h.abs() < ROOT_TOL {
            return Ok(v);
        }
        if (h > 0.0) == (ha > 0.0) {
            a = v;
            ha = h;
        } else {
            b = v;
        }
        let newton = v - h / dh;
        v = if dh != 0.0 && newton > a.min(b) && newton < a.max(b) { newton } else { 0.5 * (a + b) };
        if (b - a).abs() < 1e-15 * (1.0 + v.abs()) {
            break;
        }
    }
    let (h, _) = eval(v)?;
    if h.abs() < 1e-8 {
        Ok(v)
    } else {
        Err(Error::Solver(format!("isobar root at T = {t} stalled with residual {h:e}")))
    }
}

/// Solves `∂F/∂V = −p` at each temperature over `v_window`, scanning
/// `scan` points for sign changes. When several roots exist the one
/// minimizing `F + pV` is returned. Further inputs, if any, are held at `rest`.
pub fn isobaric_curve<F: ScalarField + ?Sized>(
    field: &F,
    p: f64,
    temperatures: &[f64],
    v_window: (f64, f64),
    scan: usize,
    rest: &[f64],
) -> Result<Vec<IsobarSample>> {
    if field.dim() != 1 + rest.len() {
        return Err(Error::Dimension { expected: field.dim(), got: 1 + rest.len() });
    }
    if scan < 2 || !(v_window.0 < v_window.1) {
        return Err(Error::Contract("isobar scan needs a non-empty window and at least 2 points".into()));
    }
    let compiled = CompiledField::new(field)?;
    let vs = linspace(v_window.0, v_window.1, scan);
    let mut x = vec![0.0; 1 + rest.len()];
    x[1..].copy_from_slice(rest);
    let mut out = Vec::with_capacity(temperatures.len());
    for &t in temperatures {
        let mut h = Vec::with_capacity(scan);
        for &v in &vs {
            x[0] = v;
            h.push(compiled.partial(&x, t, 0)?.1 + p);
        }
        let mut roots = Vec::new();
        for i in 0..scan - 1 {
            if h[i] == 0.0 {
                roots.push(vs[i]);
            } else if (h[i] > 0.0) != (h[i + 1] > 0.0) && h[i + 1] != 0.0 {
                roots.push(refine(&compiled, t, p, vs[i], vs[i + 1], rest)?);
            }
        }
        if h[scan - 1] == 0.0 {
            roots.push(vs[scan - 1]);
        }
        let mut best: Option<(f64, f64)> = None;
        for &r in &roots {
            x[0] = r;
            let g = compiled.value(&x, t)? + p * r;
            if best.map_or(true, |(_, bg)| g < bg) {
                best = Some((r, g));
            }
        }
        out.push(IsobarSample { t, v: best.map(|b| b.0), roots });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::testfields::quadratic;
    use super::super::FnField;
    use super::*;
    use crate::autodiff::{Expr, Graph};

    #[test]
    fn linear_solve() {
        let f = FnField {
            dim: 1,
            builder: |g: &mut Graph, x: &[Expr], _t: Expr| {
                let d = g.add_const(x[0], -1.0);
                g.square(d)
            },
        };
        let p = 0.6;
        let c = isobaric_curve(&f, p, &[1.0, 2.0], (-3.0, 3.0), 50, &[]).unwrap();
        for s in &c {
            assert!((s.v.unwrap() - (1.0 - p / 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pressure_single_well() {
        let c = isobaric_curve(&quadratic(), 0.0, &[1.0], (-2.0, 3.0), 40, &[]).unwrap();
        assert!(c[0].v.unwrap().abs() < 1e-10);
        let gap = isobaric_curve(&quadratic(), 0.0, &[1.0], (1.0, 3.0), 40, &[]).unwrap();
        assert_eq!(gap[0].v, None);
    }

    #[test]
    fn equilibrium_branch_selected() {
        // tilted double well: both minima and the barrier top are roots
        let f = FnField {
            dim: 1,
            builder: |g: &mut Graph, x: &[Expr], _t: Expr| {
                let x2 = g.square(x[0]);
                let w = g.add_const(x2, -1.0);
                let w2 = g.square(w);
                let tilt = g.scale(x[0], 0.2);
                g.add(w2, tilt)
            },
        };
        let c = isobaric_curve(&f, 0.0, &[1.0], (-2.0, 2.0), 101, &[]).unwrap();
        assert_eq!(c[0].roots.len(), 3);
        let v = c[0].v.unwrap();
        assert!(v < -0.9);
        let cf = CompiledField::new(&f).unwrap();
        assert!(cf.partial(&[v], 1.0, 0).unwrap().1.abs() < 1e-8);
    }
}
