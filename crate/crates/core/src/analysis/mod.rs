//! Thermodynamic analysis of a free-energy field `F(x, T)`: derivatives,
//! stationary points, curvature zero-contours, isobars and the
//! zero-eigenvalue critical-point system.
//!
//! Fields are described once as a computation graph ([`ScalarField`]) and
//! compiled ([`CompiledField`]); every derivative afterwards is exact AD.

mod contour;
mod critical;
mod export;
mod isobar;
mod stationary;

pub use contour::{curvature_zero_contour, marching_squares, Polyline};
pub use critical::{critical_seeds, solve_critical_point, CriticalGuess, CriticalPoint};
pub use export::{contour_csv, isobar_csv, stationary_csv};
pub use isobar::{isobaric_curve, IsobarSample};
pub use stationary::{bifurcation_diagram, stationary_points, stationary_points_within, Stability, StationaryPoint};

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{Bindings, Expr, Graph};
use crate::error::{Error, Result};
use crate::zentropy::{ensemble_expr, EnsembleModel};

/// A twice-differentiable scalar `F(x, T)` with `x ∈ ℝⁿ`.
pub trait ScalarField {
    /// Number of spatial inputs `n`.
    fn dim(&self) -> usize;
    /// Records `F(x, T)` into `g`.
    fn build(&self, g: &mut Graph, x: &[Expr], t: Expr) -> Result<Expr>;
}

impl ScalarField for EnsembleModel {
    fn dim(&self) -> usize {
        self.features
    }
    fn build(&self, g: &mut Graph, x: &[Expr], t: Expr) -> Result<Expr> {
        ensemble_expr(self, g, x, t)
    }
}

impl<F: ScalarField + ?Sized> ScalarField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn build(&self, g: &mut Graph, x: &[Expr], t: Expr) -> Result<Expr> {
        (**self).build(g, x, t)
    }
}

/// Field given by a graph-building closure.
pub struct FnField<B> {
    pub dim: usize,
    pub builder: B,
}

impl<B: Fn(&mut Graph, &[Expr], Expr) -> Expr> ScalarField for FnField<B> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn build(&self, g: &mut Graph, x: &[Expr], t: Expr) -> Result<Expr> {
        Ok((self.builder)(g, x, t))
    }
}

/// `F(x, T) + p·x₀`: the Gibbs-type potential at fixed pressure, with `p`
/// already expressed in units of energy per unit of `x₀`.
pub struct WithPressure<F> {
    pub inner: F,
    pub p: f64,
}

impl<F: ScalarField> ScalarField for WithPressure<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn build(&self, g: &mut Graph, x: &[Expr], t: Expr) -> Result<Expr> {
        let f = self.inner.build(g, x, t)?;
        let pv = g.scale(x[0], self.p);
        Ok(g.add(f, pv))
    }
}

/// A field recorded once, ready for repeated evaluation and differentiation.
pub struct CompiledField {
    graph: Graph,
    x: Vec<Expr>,
    t: Expr,
    root: Expr,
}

impl CompiledField {
    pub fn new<F: ScalarField + ?Sized>(field: &F) -> Result<Self> {
        let mut graph = Graph::new();
        let x: Vec<Expr> = (0..field.dim()).map(|i| graph.variable(format!("x{i}"))).collect();
        let t = graph.variable("T");
        let root = field.build(&mut graph, &x, t)?;
        Ok(CompiledField { graph, x, t, root })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    fn bind(&self, x: &[f64], t: f64) -> Result<Bindings<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: x.len() });
        }
        let mut b: Bindings<f64> = self.x.iter().copied().zip(x.iter().copied()).collect();
        b.set(self.t, t);
        Ok(b)
    }

    pub fn value(&self, x: &[f64], t: f64) -> Result<f64> {
        self.graph.evaluate(self.root, &self.bind(x, t)?)
    }

    /// `∇ₓF` at fixed `T`.
    pub fn grad(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        let (_, g) = self.graph.gradient(self.root, &self.bind(x, t)?, &self.x)?;
        Ok(DVector::from_vec(g))
    }

    /// `∇ₓ²F` at fixed `T`.
    pub fn hess(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let r = self.graph.hessian(self.root, &self.bind(x, t)?, &self.x)?;
        Ok(r.hessian.expect("hessian requested"))
    }

    /// Value, gradient and Hessian over `(x, T)` jointly; `T` is the last coordinate.
    pub fn full(&self, x: &[f64], t: f64) -> Result<(f64, DVector<f64>, DMatrix<f64>, f64)> {
        let mut wrt = self.x.clone();
        wrt.push(self.t);
        let r = self.graph.hessian(self.root, &self.bind(x, t)?, &wrt)?;
        Ok((r.value, r.gradient, r.hessian.expect("hessian requested"), r.asymmetry))
    }

    /// `∂²F/∂x_i²`.
    pub fn curvature(&self, x: &[f64], t: f64, i: usize) -> Result<f64> {
        let b = self.bind(x, t)?;
        Ok(self.graph.hessian_column(self.root, &b, &self.x[i..=i], self.x[i])?[0])
    }

    /// `F` and `∂F/∂x_i`.
    pub fn partial(&self, x: &[f64], t: f64, i: usize) -> Result<(f64, f64)> {
        let (v, g) = self.graph.gradient(self.root, &self.bind(x, t)?, &self.x[i..=i])?;
        Ok((v, g[0]))
    }
}

/// `∇ₓF(x, T)`.
pub fn grad_f<F: ScalarField + ?Sized>(field: &F, x: &[f64], t: f64) -> Result<DVector<f64>> {
    CompiledField::new(field)?.grad(x, t)
}

/// `∇ₓ²F(x, T)`.
pub fn hess_f<F: ScalarField + ?Sized>(field: &F, x: &[f64], t: f64) -> Result<DMatrix<f64>> {
    CompiledField::new(field)?.hess(x, t)
}

#[cfg(test)]
pub(crate) mod testfields {
    use super::*;

    /// `k_B T [(x²/2 + (T−2)/2)² + ((T−2)² − 1)²/2]` built inline.
    pub fn pitchfork() -> FnField<impl Fn(&mut Graph, &[Expr], Expr) -> Expr> {
        FnField {
            dim: 1,
            builder: |g: &mut Graph, x: &[Expr], t: Expr| {
                let x2 = g.square(x[0]);
                let half = g.scale(x2, 0.5);
                let tm2 = g.add_const(t, -2.0);
                let tm2h = g.scale(tm2, 0.5);
                let a = g.add(half, tm2h);
                let a2 = g.square(a);
                let tm2sq = g.square(tm2);
                let b = g.add_const(tm2sq, -1.0);
                let b2 = g.square(b);
                let bh = g.scale(b2, 0.5);
                let s = g.add(a2, bh);
                g.mul(t, s)
            },
        }
    }

    pub fn quadratic() -> FnField<impl Fn(&mut Graph, &[Expr], Expr) -> Expr> {
        FnField {
            dim: 1,
            builder: |g: &mut Graph, x: &[Expr], _t: Expr| {
                let s = g.square(x[0]);
                g.scale(s, 0.5)
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testfields::*;
    use super::*;

    #[test]
    fn benchmark_derivatives() {
        let f = CompiledField::new(&pitchfork()).unwrap();
        for t in [0.5, 1.0, 2.0, 3.7] {
            assert_eq!(f.grad(&[0.0], t).unwrap()[0], 0.0);
        }
        assert!(f.hess(&[0.0], 2.0).unwrap()[(0, 0)].abs() < 1e-15);
        assert!((f.hess(&[1.0], 1.0).unwrap()[(0, 0)] - 2.0).abs() < 1e-14);
        for &(x, t) in &[(0.3, 1.4), (-1.2, 2.5), (0.7, 0.9)] {
            let g = f.grad(&[x], t).unwrap()[0];
            assert!((g - t * x * (x * x + t - 2.0)).abs() < 1e-13);
            let h = f.curvature(&[x], t, 0).unwrap();
            assert!((h - t * (3.0 * x * x + t - 2.0)).abs() < 1e-13);
        }
    }

    #[test]
    fn pressure_shifts_gradient() {
        let wp = WithPressure { inner: quadratic(), p: 0.4 };
        let g = grad_f(&wp, &[1.0], 1.0).unwrap();
        assert!((g[0] - 1.4).abs() < 1e-15);
        assert!((hess_f(&wp, &[1.0], 1.0).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
    }
}
