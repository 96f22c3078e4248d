use crate::analysis::ScalarField;
use crate::autodiff::{Expr, Graph, Real};
use crate::error::Result;
use crate::losses::linspace;

use super::eos::EV_PER_A3_TO_GPA;
use super::io::SampleTable;

/// Boltzmann constant in eV/K.
pub const K_B_EV: f64 = 8.617333262e-5;

/// Synthetic stand-in for a material `F(V, T)` surface (eV/atom, Å³/atom, K)
/// with an invar-like negative thermal expansion and a known critical point.
///
/// With `u = (V − V_c)/w` and `r = (T − T₀)/T_w`,
///
/// `F = E_b (u⁴/4 + r u²/2 + ε u) − p_c V − 3k_B T ln(T/300)`,
///
/// where `p_c` is [`Self::pressure_gpa`] in eV/Å³. At that pressure the
/// metastable well disappears at a fold, `u* = (ε/2)^(1/3)`, `r* = −3u*²`;
/// `T₀` is placed so this happens at [`Self::t_star`]. At zero pressure the
/// equilibrium volume shrinks on heating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticFvt {
    pub e_b: f64,
    pub v_c: f64,
    pub w: f64,
    pub t_w: f64,
    pub tilt: f64,
    pub t_star: f64,
    pub pressure_gpa: f64,
}

impl Default for SyntheticFvt {
    fn default() -> Self {
        SyntheticFvt { e_b: 0.05, v_c: 12.9, w: 0.3, t_w: 100.0, tilt: 0.1, t_star: 160.0, pressure_gpa: 6.53 }
    }
}

impl SyntheticFvt {
    fn u_star(&self) -> f64 {
        (0.5 * self.tilt).cbrt()
    }

    fn t0(&self) -> f64 {
        self.t_star + 3.0 * self.u_star().powi(2) * self.t_w
    }

    /// `(V*, T*)` of the zero-eigenvalue point at [`Self::pressure_gpa`].
    pub fn critical_point(&self) -> (f64, f64) {
        (self.v_c + self.w * self.u_star(), self.t_star)
    }

    pub fn free_energy<R: Real>(&self, v: R, t: R) -> R {
        let u = (v - R::cst(self.v_c)) * R::cst(1.0 / self.w);
        let r = (t - R::cst(self.t0())) * R::cst(1.0 / self.t_w);
        let u2 = u * u;
        let well = R::cst(self.e_b) * (R::cst(0.25) * u2 * u2 + R::cst(0.5) * r * u2 + R::cst(self.tilt) * u);
        let pv = R::cst(self.pressure_gpa / EV_PER_A3_TO_GPA) * v;
        well - pv - R::cst(3.0 * K_B_EV) * t * (t * R::cst(1.0 / 300.0)).ln()
    }

    /// Volume window used for sampling: `V_c ± 2.5w`.
    pub fn volume_range(&self) -> (f64, f64) {
        (self.v_c - 2.5 * self.w, self.v_c + 2.5 * self.w)
    }

    /// `V,T,F` samples on the tensor grid of `nv` volumes over
    /// [`Self::volume_range`] and the given temperatures.
    pub fn table(&self, nv: usize, temps: &[f64]) -> Result<SampleTable> {
        let (lo, hi) = self.volume_range();
        let vs = linspace(lo, hi, nv);
        let mut rows = Vec::with_capacity(nv * temps.len());
        for &t in temps {
            for &v in &vs {
                rows.push(vec![v, t, self.free_energy(v, t)]);
            }
        }
        SampleTable::fvt(rows)
    }
}

impl ScalarField for SyntheticFvt {
    fn dim(&self) -> usize {
        1
    }
    fn build(&self, g: &mut Graph, x: &[Expr], t: Expr) -> Result<Expr> {
        let d = g.add_const(x[0], -self.v_c);
        let u = g.scale(d, 1.0 / self.w);
        let tt = g.add_const(t, -self.t0());
        let r = g.scale(tt, 1.0 / self.t_w);
        let u2 = g.square(u);
        let u4 = g.square(u2);
        let a = g.scale(u4, 0.25);
        let ru2 = g.mul(r, u2);
        let b = g.scale(ru2, 0.5);
        let c = g.scale(u, self.tilt);
        let well = g.sum(&[a, b, c]);
        let well = g.scale(well, self.e_b);
        let pv = g.scale(x[0], -self.pressure_gpa / EV_PER_A3_TO_GPA);
        let ts = g.scale(t, 1.0 / 300.0);
        let lt = g.ln(ts);
        let tl = g.mul(t, lt);
        let ent = g.scale(tl, -3.0 * K_B_EV);
        Ok(g.sum(&[well, pv, ent]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{isobaric_curve, solve_critical_point, CriticalGuess, WithPressure};
    use crate::autodiff::Dual;

    #[test]
    fn graph_matches_direct() {
        let s = SyntheticFvt::default();
        let f = crate::analysis::CompiledField::new(&s).unwrap();
        for &(v, t) in &[(12.7, 80.0), (13.1, 240.0)] {
            assert!((f.value(&[v], t).unwrap() - s.free_energy(v, t)).abs() < 1e-13);
            let d = s.free_energy(Dual::variable(v), Dual::constant(t)).du;
            assert!((f.grad(&[v], t).unwrap()[0] - d).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_critical_point() {
        let s = SyntheticFvt::default();
        let (v_star, t_star) = s.critical_point();
        let field = WithPressure { inner: s, p: s.pressure_gpa / EV_PER_A3_TO_GPA };
        let cp = solve_critical_point(&field, &CriticalGuess { x: vec![v_star + 0.05], t: 150.0, xi: None }).unwrap();
        assert!((cp.t_star - t_star).abs() < 1e-6, "{cp:?}");
        assert!((cp.x_star[0] - v_star).abs() < 1e-6);
    }

    #[test]
    fn zero_pressure_thermal_contraction() {
        let s = SyntheticFvt::default();
        let temps = linspace(50.0, 400.0, 15);
        let iso = isobaric_curve(&s, 0.0, &temps, s.volume_range(), 200, &[]).unwrap();
        let v: Vec<f64> = iso.iter().map(|p| p.v.unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] < w[0]), "{v:?}");
    }

    #[test]
    fn table_shape() {
        let tab = SyntheticFvt::default().table(11, &[100.0, 200.0]).unwrap();
        assert_eq!(tab.len(), 22);
        assert_eq!(tab.temperature_slices().unwrap().len(), 2);
    }
}
