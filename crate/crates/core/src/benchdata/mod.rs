//! Benchmark models, synthetic data generators, equation-of-state tools and
//! dataset file formats.
//!
//! Random draws use ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded through
//! `SeedableRng::seed_from_u64`, so every generator is reproducible across
//! platforms for a given `u64` seed.

mod eos;
mod io;
mod synthetic;

pub use eos::{eos_energy, eos_fit, table_s1, ConfigRecord, EosParams, Equilibrium, EV_PER_A3_TO_GPA};
pub use io::{load_classification, load_fvt, load_sidecar, save_fvt, three_class_csv, FvtUnits, SampleTable};
pub use synthetic::{SyntheticFvt, K_B_EV};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::ScalarField;
use crate::autodiff::{Expr, Graph, Real};
use crate::error::Result;
use crate::losses::{linspace, LabeledSet};

const PEAKS: [[(f64, f64, f64); 2]; 3] = [
    [(2.0, 2.0, 1.0), (1.5, 6.0, 1.0)],
    [(2.5, 3.0, 1.0), (1.2, 5.5, 1.0)],
    [(2.2, 4.0, 1.0), (1.4, 6.5, 1.0)],
];

/// Unnormalized class weights `f_k(T)`: sums of two unit-width Gaussians.
pub fn three_class_weights(t: f64) -> [f64; 3] {
    PEAKS.map(|pk| pk.iter().map(|&(a, c, s)| a * (-((t - c) / s).powi(2)).exp()).sum())
}

/// Class probabilities of the three-class benchmark at temperature `t`.
pub fn three_class_probs(t: f64) -> [f64; 3] {
    let f = three_class_weights(t);
    let z: f64 = f.iter().sum();
    f.map(|v| v / z)
}

/// Temperatures at which class labels are drawn: every fourth point of a
/// 100-point grid on `[1, 8]`, starting with the first.
pub fn three_class_temperatures() -> Vec<f64> {
    linspace(1.0, 8.0, 100).into_iter().step_by(4).collect()
}

/// `samples_per_t` labels per selected temperature, drawn by inverse CDF.
pub fn gen_three_class(seed: u64, samples_per_t: usize) -> Result<LabeledSet> {
    if samples_per_t == 0 {
        return Err(crate::Error::Contract("samples_per_T must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let temps = three_class_temperatures();
    let mut t = Vec::with_capacity(temps.len() * samples_per_t);
    let mut labels = Vec::with_capacity(t.capacity());
    for &tt in &temps {
        let p = three_class_probs(tt);
        for _ in 0..samples_per_t {
            let u: f64 = rng.gen();
            let label = if u < p[0] {
                0
            } else if u < p[0] + p[1] {
                1
            } else {
                2
            };
            t.push(tt);
            labels.push(label);
        }
    }
    LabeledSet::new(t, labels, 3)
}

/// `k_B T [(x²/2 + (T−2)/2)² + ((T−2)² − 1)²/2]`.
pub fn benchmark_f_1d<R: Real>(x: R, t: R, k_b: f64) -> R {
    let half = R::cst(0.5);
    let tm2 = t - R::cst(2.0);
    let a = half * x * x + half * tm2;
    let b = tm2 * tm2 - R::one();
    R::cst(k_b) * t * (a * a + half * b * b)
}

const WELLS: [(f64, f64, f64, f64, f64); 3] = [
    (-3.0, 3.0, 3.0, -1.0, 0.0),
    (-3.0, 3.0, 3.0, 1.0, 0.0),
    (-3.0, 3.0, 3.0, 0.0, 1.5),
];

/// Three Gaussian wells `Σ A exp(−a(x₁−c₁)² − b(x₂−c₂)²)`.
pub fn benchmark_v_2d<R: Real>(x1: R, x2: R) -> R {
    let mut v = R::zero();
    for &(amp, a, b, c1, c2) in &WELLS {
        let d1 = x1 - R::cst(c1);
        let d2 = x2 - R::cst(c2);
        v += R::cst(amp) * (-(R::cst(a) * d1 * d1 + R::cst(b) * d2 * d2)).exp();
    }
    v
}

/// The one-dimensional double-well benchmark as an analysable field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Benchmark1d {
    pub k_b: f64,
}

impl Default for Benchmark1d {
    fn default() -> Self {
        Benchmark1d { k_b: 1.0 }
    }
}

impl ScalarField for Benchmark1d {
    fn dim(&self) -> usize {
        1
    }
    fn build(&self, g: &mut Graph, x: &[Expr], t: Expr) -> Result<Expr> {
        let x2 = g.square(x[0]);
        let hx = g.scale(x2, 0.5);
        let tm2 = g.add_const(t, -2.0);
        let ht = g.scale(tm2, 0.5);
        let a = g.add(hx, ht);
        let a2 = g.square(a);
        let tsq = g.square(tm2);
        let b = g.add_const(tsq, -1.0);
        let b2 = g.square(b);
        let hb = g.scale(b2, 0.5);
        let s = g.add(a2, hb);
        let kt = g.scale(t, self.k_b);
        Ok(g.mul(kt, s))
    }
}

/// The temperature-independent three-well landscape as an analysable field.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Benchmark2d;

impl ScalarField for Benchmark2d {
    fn dim(&self) -> usize {
        2
    }
    fn build(&self, g: &mut Graph, x: &[Expr], _t: Expr) -> Result<Expr> {
        let mut terms = Vec::with_capacity(WELLS.len());
        for &(amp, a, b, c1, c2) in &WELLS {
            let d1 = g.add_const(x[0], -c1);
            let d2 = g.add_const(x[1], -c2);
            let s1 = g.square(d1);
            let s2 = g.square(d2);
            let q1 = g.scale(s1, -a);
            let q2 = g.scale(s2, -b);
            let q = g.add(q1, q2);
            let e = g.exp(q);
            terms.push(g.scale(e, amp));
        }
        Ok(g.sum(&terms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{grad_f, hess_f, stationary_points, Stability};
    use crate::autodiff::Dual;

    #[test]
    fn three_class_values() {
        let p = three_class_probs(2.0);
        assert!((p[0] - 0.6757).abs() < 5e-5 && (p[1] - 0.3107).abs() < 5e-5 && (p[2] - 0.0136).abs() < 5e-5, "{p:?}");
        for (t, want) in [(2.0, 0), (3.0, 1), (4.0, 2)] {
            let p = three_class_probs(t);
            let arg = (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            assert_eq!(arg, want, "T = {t}");
        }
        for t in linspace(-2.0, 12.0, 141) {
            let p = three_class_probs(t);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn sampled_frequencies() {
        let temps = three_class_temperatures();
        assert_eq!(temps.len(), 25);
        assert_eq!(temps[0], 1.0);
        let data = gen_three_class(7, 10_000).unwrap();
        assert_eq!(data.len(), 250_000);
        let counts = data.counts_by_temperature();
        let (t, c) = counts.iter().min_by(|a, b| (a.0 - 2.0).abs().total_cmp(&(b.0 - 2.0).abs())).unwrap();
        let p = three_class_probs(*t);
        for k in 0..3 {
            assert!((c[k] as f64 / 1e4 - p[k]).abs() < 0.02);
        }
        assert_eq!(gen_three_class(7, 100).unwrap(), gen_three_class(7, 100).unwrap());
        assert_ne!(gen_three_class(7, 100).unwrap(), gen_three_class(8, 100).unwrap());
    }

    #[test]
    fn one_dimensional_benchmark() {
        assert_eq!(benchmark_f_1d(1.0f64, 1.0, 1.0), 0.0);
        assert!((benchmark_f_1d(0.0f64, 2.0, 1.0) - 1.0).abs() < 1e-15);
        let f = Benchmark1d::default();
        for &(x, t) in &[(0.3, 1.2), (-1.1, 2.7)] {
            let d = benchmark_f_1d(Dual::variable(x), Dual::constant(t), 1.0);
            assert!((grad_f(&f, &[x], t).unwrap()[0] - d.du).abs() < 1e-13);
        }
        let seeds: Vec<Vec<f64>> = linspace(-2.0, 2.0, 21).into_iter().map(|s| vec![s]).collect();
        assert_eq!(stationary_points(&f, 1.0, &seeds).unwrap().len(), 3);
        assert_eq!(stationary_points(&f, 3.0, &seeds).unwrap().len(), 1);
    }

    #[test]
    fn two_dimensional_benchmark() {
        let v = benchmark_v_2d(-1.0, 0.0);
        assert!((v + 3.0 + 3.0 * (-12.0f64).exp() + 3.0 * (-9.75f64).exp()).abs() < 1e-15);
        assert!((v + 3.0002).abs() < 1e-4);
        assert_eq!(benchmark_v_2d(0.37, 0.8), benchmark_v_2d(-0.37, 0.8));
        let seeds: Vec<Vec<f64>> = [(-1.0, 0.1), (1.1, -0.1), (0.1, 1.4), (0.0, 0.5)].iter().map(|&(a, b)| vec![a, b]).collect();
        let pts = stationary_points(&Benchmark2d, 1.0, &seeds).unwrap();
        let minima: Vec<_> = pts.iter().filter(|p| p.stability == Stability::Stable).collect();
        assert_eq!(minima.len(), 3);
        for m in minima {
            assert!(WELLS.iter().any(|w| (m.x[0] - w.3).abs() < 0.05 && (m.x[1] - w.4).abs() < 0.05));
        }
        let h = hess_f(&Benchmark2d, &[-1.0, 0.0], 1.0).unwrap();
        assert!(h[(0, 0)] > 0.0 && h[(1, 1)] > 0.0);
    }
}
