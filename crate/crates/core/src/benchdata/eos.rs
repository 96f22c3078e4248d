use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// eV/Å³ expressed in GPa.
pub const EV_PER_A3_TO_GPA: f64 = 160.2176634;

/// Coefficients of `E(V) = a₁ + a₂V^(−2/3) + a₃V^(−4/3) + a₄V^(−2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EosParams {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

/// Equilibrium properties of an [`EosParams`]: volume (Å³/atom), energy
/// (eV/atom), bulk modulus (GPa) and its pressure derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub v0: f64,
    pub e0: f64,
    pub b0: f64,
    pub b_prime: f64,
}

impl EosParams {
    pub fn energy(&self, v: f64) -> f64 {
        let x = v.powf(-2.0 / 3.0);
        self.a1 + x * (self.a2 + x * (self.a3 + x * self.a4))
    }

    /// `(E′, E″, E‴)` at `v`.
    pub fn derivatives(&self, v: f64) -> (f64, f64, f64) {
        let (a2, a3, a4) = (self.a2, self.a3, self.a4);
        let d1 = -2.0 / 3.0 * a2 * v.powf(-5.0 / 3.0) - 4.0 / 3.0 * a3 * v.powf(-7.0 / 3.0) - 2.0 * a4 * v.powi(-3);
        let d2 = 10.0 / 9.0 * a2 * v.powf(-8.0 / 3.0) + 28.0 / 9.0 * a3 * v.powf(-10.0 / 3.0) + 6.0 * a4 * v.powi(-4);
        let d3 = -80.0 / 27.0 * a2 * v.powf(-11.0 / 3.0) - 280.0 / 27.0 * a3 * v.powf(-13.0 / 3.0) - 24.0 * a4 * v.powi(-5);
        (d1, d2, d3)
    }

    /// Minimum of `E(V)` over `V > 0`, with `B₀ = V₀E″(V₀)` in GPa and
    /// `B′ = −(1 + V₀E‴/E″)`.
    pub fn equilibrium(&self) -> Result<Equilibrium> {
        // E′ = 0 ⇔ a₂ + 2a₃x + 3a₄x² = 0 with x = V^(−2/3)
        let (a, b, c) = (3.0 * self.a4, 2.0 * self.a3, self.a2);
        let mut xs = Vec::new();
        if a.abs() < 1e-300 {
            if b != 0.0 {
                xs.push(-c / b);
            }
        } else {
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let q = -0.5 * (b + b.signum() * disc.sqrt());
                xs.push(q / a);
                if q != 0.0 {
                    xs.push(c / q);
                }
            }
        }
        let v0 = xs
            .into_iter()
            .filter(|&x| x > 0.0 && x.is_finite())
            .map(|x| x.powf(-1.5))
            .find(|&v| self.derivatives(v).1 > 0.0)
            .ok_or_else(|| Error::Solver("equation of state has no energy minimum at positive volume".into()))?;
        let mut v = v0;
        for _ in 0..20 {
            let (d1, d2, _) = self.derivatives(v);
            let step = d1 / d2;
            v -= step;
            if step.abs() <= 1e-15 * v {
                break;
            }
        }
        let (_, d2, d3) = self.derivatives(v);
        Ok(Equilibrium {
            v0: v,
            e0: self.energy(v),
            b0: v * d2 * EV_PER_A3_TO_GPA,
            b_prime: -(1.0 + v * d3 / d2),
        })
    }

    /// Coefficients reproducing given equilibrium properties exactly.
    pub fn from_equilibrium(eq: &Equilibrium) -> Result<Self> {
        let v = eq.v0;
        if !(v > 0.0 && eq.b0 > 0.0) {
            return Err(Error::Contract("equilibrium volume and bulk modulus must be positive".into()));
        }
        let pw = |e: f64| v.powf(e);
        // rows: E(V₀) = E₀, E′(V₀) = 0, V₀E″ = B₀, V₀E‴ = −(1 + B′)E″
        let e_row = [1.0, pw(-2.0 / 3.0), pw(-4.0 / 3.0), pw(-2.0)];
        let d1_row = [0.0, -2.0 / 3.0 * pw(-5.0 / 3.0), -4.0 / 3.0 * pw(-7.0 / 3.0), -2.0 * pw(-3.0)];
        let d2_row = [0.0, 10.0 / 9.0 * pw(-8.0 / 3.0), 28.0 / 9.0 * pw(-10.0 / 3.0), 6.0 * pw(-4.0)];
        let d3_row = [0.0, -80.0 / 27.0 * pw(-11.0 / 3.0), -280.0 / 27.0 * pw(-13.0 / 3.0), -24.0 * pw(-5.0)];
        let mut m = Matrix4::zeros();
        for j in 0..4 {
            m[(0, j)] = e_row[j];
            m[(1, j)] = d1_row[j];
            m[(2, j)] = v * d2_row[j];
            m[(3, j)] = v * d3_row[j] + (1.0 + eq.b_prime) * d2_row[j];
        }
        let rhs = Vector4::new(eq.e0, 0.0, eq.b0 / EV_PER_A3_TO_GPA, 0.0);
        let a = m.lu().solve(&rhs).ok_or_else(|| Error::Solver("singular equilibrium system".into()))?;
        Ok(EosParams { a1: a[0], a2: a[1], a3: a[2], a4: a[3] })
    }
}

/// `E(V)` for `V > 0`.
pub fn eos_energy(v: f64, params: &EosParams) -> Result<f64> {
    if !(v > 0.0) {
        return Err(Error::Contract(format!("volume must be positive, got {v}")));
    }
    Ok(params.energy(v))
}

/// Linear least squares in the basis `{1, V^(−2/3), V^(−4/3), V^(−2)}`,
/// returning the coefficients and their equilibrium properties. The
/// equilibrium volume must lie within the sampled volume range.
pub fn eos_fit(points: &[(f64, f64)]) -> Result<(EosParams, Equilibrium)> {
    if points.len() < 4 {
        return Err(Error::Contract(format!("EOS fit needs at least 4 points, got {}", points.len())));
    }
    if points.iter().any(|&(v, e)| !(v > 0.0) || !e.is_finite()) {
        return Err(Error::Contract("EOS fit needs positive volumes and finite energies".into()));
    }
    let n = points.len();
    // columns rescaled to unit max so the normal equations stay well conditioned
    let vmax = points.iter().map(|p| p.0).fold(0.0, f64::max);
    let a = DMatrix::from_fn(n, 4, |i, j| (points[i].0 / vmax).powf(-2.0 * j as f64 / 3.0));
    let b = DVector::from_iterator(n, points.iter().map(|p| p.1));
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-13 * smax {
        return Err(Error::Solver("EOS design matrix is rank deficient".into()));
    }
    let c = svd.solve(&b, 0.0).map_err(|e| Error::Solver(e.to_string()))?;
    let params = EosParams {
        a1: c[0],
        a2: c[1] * vmax.powf(2.0 / 3.0),
        a3: c[2] * vmax.powf(4.0 / 3.0),
        a4: c[3] * vmax.powi(2),
    };
    let eq = params.equilibrium()?;
    let vmin = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    if eq.v0 < vmin || eq.v0 > vmax {
        return Err(Error::Solver(format!("fitted minimum V0 = {} lies outside the data range [{vmin}, {vmax}]", eq.v0)));
    }
    Ok((params, eq))
}

/// One magnetic configuration of the 12-atom Fe₃Pt supercell as tabulated:
/// degeneracy, printed equilibrium properties, and coefficients reproducing them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub index: usize,
    pub df: u32,
    pub printed: Equilibrium,
    pub eos: EosParams,
}

const TABLE_S1: [(u32, f64, f64, f64, f64); 36] = [
    (2, 13.124, 0.0000, 177.01, 3.447),
    (6, 12.901, 0.0122, 163.06, 4.260),
    (12, 12.910, 0.0160, 162.96, 4.440),
    (12, 13.002, 0.0191, 171.16, 3.501),
    (6, 13.005, 0.0202, 171.75, 3.271),
    (6, 12.929, 0.0211, 164.05, 3.740),
    (24, 12.890, 0.0281, 162.43, 3.923),
    (24, 12.947, 0.0291, 164.33, 3.159),
    (12, 12.875, 0.0372, 164.70, 4.059),
    (12, 12.868, 0.0419, 170.28, 4.144),
    (12, 12.867, 0.0422, 171.76, 3.721),
    (24, 12.840, 0.0455, 161.43, 3.772),
    (6, 12.767, 0.0457, 161.03, 4.388),
    (12, 12.859, 0.0462, 163.01, 3.224),
    (12, 12.864, 0.0467, 168.31, 4.357),
    (24, 12.801, 0.0491, 167.54, 4.154),
    (24, 12.804, 0.0493, 165.12, 4.649),
    (12, 12.765, 0.0494, 157.04, 4.507),
    (24, 12.789, 0.0505, 169.38, 4.816),
    (12, 12.833, 0.0517, 169.08, 4.029),
    (6, 12.834, 0.0521, 164.59, 3.891),
    (6, 12.747, 0.0533, 163.93, 4.670),
    (24, 12.765, 0.0551, 159.41, 4.137),
    (12, 12.724, 0.0559, 170.18, 4.298),
    (24, 12.715, 0.0586, 172.04, 4.622),
    (24, 12.779, 0.0593, 167.06, 4.309),
    (24, 12.788, 0.0596, 170.54, 4.187),
    (12, 12.727, 0.0599, 164.79, 4.109),
    (24, 12.806, 0.0623, 169.21, 4.052),
    (12, 12.703, 0.0686, 174.20, 4.283),
    (12, 12.729, 0.0712, 169.24, 4.215),
    (12, 12.740, 0.0733, 165.45, 4.122),
    (12, 12.716, 0.0877, 163.09, 3.917),
    (12, 12.754, 0.0895, 162.97, 3.933),
    (2, 12.684, 0.0899, 167.31, 4.483),
    (4, 12.681, 0.0900, 167.39, 4.735),
];

/// The 36 tabulated Fe₃Pt configurations, verbatim; row 1 is ferromagnetic.
pub fn table_s1() -> Vec<ConfigRecord> {
    TABLE_S1
        .iter()
        .enumerate()
        .map(|(i, &(df, v0, e0, b0, b_prime))| {
            let printed = Equilibrium { v0, e0, b0, b_prime };
            let eos = EosParams::from_equilibrium(&printed).expect("tabulated rows are physical");
            ConfigRecord { index: i + 1, df, printed, eos }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn direct_evaluation() {
        let one = EosParams { a1: 1.0, a2: 0.0, a3: 0.0, a4: 0.0 };
        assert_eq!(eos_energy(3.3, &one).unwrap(), 1.0);
        let p = EosParams { a1: 0.0, a2: 1.0, a3: 0.0, a4: 0.0 };
        assert!((eos_energy(8.0, &p).unwrap() - 0.25).abs() < 1e-15);
        assert!(eos_energy(0.0, &p).is_err());
        assert!(eos_energy(-1.0, &p).is_err());
    }

    #[test]
    fn derivatives_match_differences() {
        let p = EosParams::from_equilibrium(&Equilibrium { v0: 13.0, e0: -8.0, b0: 170.0, b_prime: 4.2 }).unwrap();
        let h = 1e-4;
        for v in [11.5, 13.0, 14.2] {
            let (d1, d2, d3) = p.derivatives(v);
            let fd1 = (p.energy(v + h) - p.energy(v - h)) / (2.0 * h);
            assert!(rel(d1, fd1) < 1e-6 || (d1 - fd1).abs() < 1e-9);
            let fd2 = (p.derivatives(v + h).0 - p.derivatives(v - h).0) / (2.0 * h);
            assert!(rel(d2, fd2) < 1e-7);
            let fd3 = (p.derivatives(v + h).1 - p.derivatives(v - h).1) / (2.0 * h);
            assert!(rel(d3, fd3) < 1e-6);
        }
    }

    #[test]
    fn equilibrium_round_trip() {
        let eq = Equilibrium { v0: 12.9, e0: 0.03, b0: 165.0, b_prime: 4.1 };
        let p = EosParams::from_equilibrium(&eq).unwrap();
        let back = p.equilibrium().unwrap();
        assert!(rel(back.v0, eq.v0) < 1e-12);
        assert!((back.e0 - eq.e0).abs() < 1e-12);
        assert!(rel(back.b0, eq.b0) < 1e-10);
        assert!(rel(back.b_prime, eq.b_prime) < 1e-9);
    }

    #[test]
    fn fit_recovers_coefficients() {
        let truth = EosParams::from_equilibrium(&Equilibrium { v0: 13.1, e0: -0.2, b0: 177.0, b_prime: 3.4 }).unwrap();
        let pts: Vec<(f64, f64)> = (0..8).map(|i| 12.0 + 0.3 * i as f64).map(|v| (v, truth.energy(v))).collect();
        let (fit, eq) = eos_fit(&pts).unwrap();
        for (a, b) in [(fit.a1, truth.a1), (fit.a2, truth.a2), (fit.a3, truth.a3), (fit.a4, truth.a4)] {
            assert!(rel(a, b) < 1e-8, "{a} vs {b}");
        }
        assert!(rel(eq.v0, 13.1) < 1e-8 && rel(eq.b0, 177.0) < 1e-6 && rel(eq.b_prime, 3.4) < 1e-6);
        assert!(eos_fit(&pts[..3]).is_err());
        let same: Vec<(f64, f64)> = (0..5).map(|_| (13.0, 1.0)).collect();
        assert!(eos_fit(&same).is_err());
        let far: Vec<(f64, f64)> = (0..8).map(|i| 20.0 + i as f64).map(|v| (v, truth.energy(v))).collect();
        assert!(eos_fit(&far).is_err());
    }

    #[test]
    fn tabulated_configurations() {
        let t = table_s1();
        assert_eq!(t.len(), 36);
        let r1 = t[0];
        assert_eq!((r1.index, r1.df), (1, 2));
        assert_eq!(r1.printed, Equilibrium { v0: 13.124, e0: 0.0, b0: 177.01, b_prime: 3.447 });
        assert_eq!((t[12].df, t[12].printed.v0), (6, 12.767));
        assert_eq!(t.iter().map(|r| r.df).sum::<u32>(), 500);
        assert!(t.iter().all(|r| r.printed.e0 >= t[0].printed.e0));
        for r in &t {
            let eq = r.eos.equilibrium().unwrap();
            assert!(rel(eq.v0, r.printed.v0) < 1e-10 && rel(eq.b0, r.printed.b0) < 1e-8);
        }
    }
}
