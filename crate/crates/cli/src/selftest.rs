use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zenn::analysis::{solve_critical_point, stationary_points, CompiledField, CriticalGuess, FnField, ScalarField, WithPressure};
use zenn::autodiff::{Expr, Graph};
use zenn::benchdata::{eos_energy, eos_fit, table_s1, three_class_probs, Benchmark1d, EosParams, Equilibrium, SyntheticFvt, EV_PER_A3_TO_GPA};
use zenn::losses::{cross_entropy, cross_zentropy, js_divergence, linspace, GridDensity, LabeledSet};
use zenn::zentropy::{config_energy_entropy, helmholtz_closed_form, probabilities, total_helmholtz, EnsembleModel};
use zenn::{Error, Result};

type Check = fn() -> Result<(bool, String)>;

fn softmax_neg(f: &[f64], kt: f64) -> Vec<f64> {
    let m = f.iter().map(|v| -v / kt).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|v| (-v / kt - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn benchmark_critical() -> Result<(bool, String)> {
    let cp = solve_critical_point(&Benchmark1d::default(), &CriticalGuess { x: vec![0.1], t: 1.8, xi: None })?;
    let ok = cp.x_star[0].abs() < 1e-8 && (cp.t_star - 2.0).abs() < 1e-8 && cp.residual < 1e-8;
    Ok((ok, format!("x* {:.1e}, T* {:.12}, residual {:.1e}", cp.x_star[0], cp.t_star, cp.residual)))
}

fn stationary_set() -> Result<(bool, String)> {
    let seeds: Vec<Vec<f64>> = linspace(-2.0, 2.0, 41).into_iter().map(|s| vec![s]).collect();
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for t in [1.0, 1.5, 2.5] {
        let pts = stationary_points(&Benchmark1d::default(), t, &seeds)?;
        let mut want = vec![0.0];
        if t < 2.0 {
            want.insert(0, -(2.0 - t).sqrt());
            want.push((2.0 - t).sqrt());
        }
        ok &= pts.len() == want.len();
        for (p, w) in pts.iter().zip(&want) {
            worst = worst.max((p.x[0] - w).abs());
        }
    }
    Ok((ok && worst < 1e-10, format!("max deviation from {{0, ±√(2−T)}} {worst:.1e}")))
}

fn identities() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut a, mut b, mut c, mut d) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let k = rng.gen_range(2..5);
        let (k_b, gamma) = (rng.gen_range(0.2..2.0), rng.gen_range(1.0..8.0));
        let model = EnsembleModel::new(k, 0, true, &[4], k_b, gamma, rng.gen())?;
        let n = 12;
        let set = LabeledSet::new((0..n).map(|_| rng.gen_range(0.3..4.0)).collect(), (0..n).map(|_| rng.gen_range(0..k)).collect(), k)?;
        let mut flat = model.clone();
        for net in &mut flat.s_nets {
            net.read_flat(&vec![0.0; net.param_count()]);
        }
        let mut probs = Vec::new();
        let mut soft = Vec::new();
        for &t in &set.t {
            let (e, s) = config_energy_entropy(&model, &[], t)?;
            let f: Vec<f64> = e.iter().zip(&s).map(|(e, s)| e - t * s).collect();
            probs.push(probabilities(&f, &s, t, gamma, k_b)?.0);
            let (e0, _) = config_energy_entropy(&flat, &[], t)?;
            soft.push(softmax_neg(&e0, k_b * t));
        }
        a = a.max((cross_zentropy(&set, &model)? - cross_entropy(&set, &probs)?).abs());
        d = d.max((cross_zentropy(&set, &flat)? - cross_entropy(&set, &soft)?).abs());
    }
    for _ in 0..1000 {
        let k = rng.gen_range(1..7);
        let f: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let s: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..2.0)).collect();
        let (t, k_b, gamma) = (rng.gen_range(0.2..6.0), rng.gen_range(0.1..2.0), rng.gen_range(0.5..10.0));
        let (p, log_z) = probabilities(&f, &s, t, gamma, k_b)?;
        let x = total_helmholtz(&p, &f, t, k_b)?;
        let y = helmholtz_closed_form(log_z, &p, &s, t, gamma, k_b);
        b = b.max((x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE));
        let pg = probabilities(&f, &s, t, 1e8, k_b)?.0;
        c = c.max(pg.iter().zip(softmax_neg(&f, k_b * t)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
    }
    let ok = a <= 1e-12 && b <= 1e-10 && c <= 1e-9 && d <= 1e-12;
    Ok((ok, format!("cross-zentropy {a:.0e}, closed form {b:.0e}, γ→∞ {c:.0e}, S≡const {d:.0e}")))
}

fn derivatives() -> Result<(bool, String)> {
    let model = EnsembleModel::new(3, 1, true, &[6, 6], 1.0, 5.0, 11)?;
    let joint = FnField { dim: 2, builder: |g: &mut Graph, x: &[Expr], _t: Expr| model.build(g, &x[..1], x[1]).expect("ensemble graph") };
    let field = CompiledField::new(&joint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut ge, mut he, mut asym) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let z = [rng.gen_range(-1.5..1.5), rng.gen_range(0.5..3.0)];
        let (_, g, h, a) = field.full(&z, 1.0)?;
        asym = asym.max(a);
        for i in 0..2 {
            let step = 1e-5 * (1.0 + z[i].abs());
            let (mut p, mut m) = (z, z);
            p[i] += step;
            m[i] -= step;
            let fd = (field.value(&p, 1.0)? - field.value(&m, 1.0)?) / (2.0 * step);
            ge = ge.max((g[i] - fd).abs() / fd.abs().max(1e-3));
            let col = (field.grad(&p, 1.0)? - field.grad(&m, 1.0)?) / (2.0 * step);
            for j in 0..2 {
                he = he.max((h[(j, i)] - col[j]).abs() / col[j].abs().max(1e-3));
            }
        }
    }
    Ok((ge < 1e-4 && he < 1e-4 && asym <= 1e-10, format!("gradient {ge:.0e}, Hessian {he:.0e}, asymmetry {asym:.0e}")))
}

fn divergences() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut sym, mut range_ok, mut self_zero) = (0.0f64, true, true);
    for _ in 0..200 {
        let n = rng.gen_range(2..20);
        let mut draw = || -> Vec<f64> {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let mass = 0.5 * v.iter().sum::<f64>();
            v.into_iter().map(|x| x / mass).collect()
        };
        let p = GridDensity::from_cells(draw(), 0.5)?;
        let q = GridDensity::from_cells(draw(), 0.5)?;
        let (pq, qp) = (js_divergence(&p, &q)?, js_divergence(&q, &p)?);
        sym = sym.max((pq - qp).abs());
        range_ok &= (0.0..=std::f64::consts::LN_2).contains(&pq);
        self_zero &= js_divergence(&p, &p)? == 0.0;
    }
    let example = js_divergence(&GridDensity::from_cells(vec![0.5, 0.5], 1.0)?, &GridDensity::from_cells(vec![1.0, 0.0], 1.0)?)?;
    let ok = sym <= 1e-15 && range_ok && self_zero && (example - 0.215762).abs() < 1e-6;
    Ok((ok, format!("asymmetry {sym:.0e}, example {example:.7}")))
}

fn equation_of_state() -> Result<(bool, String)> {
    let truth = Equilibrium { v0: 12.9, e0: -8.3, b0: 170.0, b_prime: 4.2 };
    let params = EosParams::from_equilibrium(&truth)?;
    let pts: Vec<(f64, f64)> = linspace(11.8, 14.0, 8).into_iter().map(|v| Ok((v, eos_energy(v, &params)?))).collect::<Result<_>>()?;
    let (_, eq) = eos_fit(&pts)?;
    let err = [(eq.v0, truth.v0), (eq.e0, truth.e0), (eq.b0, truth.b0), (eq.b_prime, truth.b_prime)]
        .iter()
        .map(|(a, b)| (a - b).abs() / b.abs())
        .fold(0.0, f64::max);
    let table = table_s1();
    let df: u32 = table.iter().map(|r| r.df).sum();
    let ok = err < 1e-6 && table.len() == 36 && table[0].printed.v0 == 13.124 && df == 500;
    Ok((ok, format!("round-trip {err:.0e}, {} rows, DF sum {df}", table.len())))
}

fn three_class() -> Result<(bool, String)> {
    let mut ok = true;
    for t in linspace(0.0, 10.0, 101) {
        let p = three_class_probs(t);
        ok &= (p.iter().sum::<f64>() - 1.0).abs() < 1e-14 && p.iter().all(|&v| v > 0.0 && v < 1.0);
    }
    for (t, k) in [(2.0, 0), (3.0, 1), (4.0, 2)] {
        let p = three_class_probs(t);
        ok &= (0..3).all(|j| j == k || p[j] < p[k]);
    }
    Ok((ok, "normalized, argmax 1,2,3 at T = 2,3,4".into()))
}

fn synthetic_surface() -> Result<(bool, String)> {
    let s = SyntheticFvt::default();
    let (v, t) = s.critical_point();
    let field = WithPressure { inner: s, p: s.pressure_gpa / EV_PER_A3_TO_GPA };
    let cp = solve_critical_point(&field, &CriticalGuess { x: vec![v + 0.05], t: t - 10.0, xi: None })?;
    let err = (cp.t_star - t).abs().max((cp.x_star[0] - v).abs());
    Ok((err < 1e-6, format!("T* {:.6} K (oracle {t}), V* {:.6}", cp.t_star, cp.x_star[0])))
}

pub fn run() -> Result<()> {
    let checks: [(&str, Check); 8] = [
        ("benchmark critical point", benchmark_critical),
        ("benchmark stationary set", stationary_set),
        ("zentropy identities", identities),
        ("AD vs finite differences", derivatives),
        ("JS divergence properties", divergences),
        ("equation of state", equation_of_state),
        ("three-class probabilities", three_class),
        ("synthetic F(V,T) oracle", synthetic_surface),
    ];
    let mut failed = 0;
    println!("{:<28} {:<6} detail", "check", "result");
    for (name, check) in checks {
        let (ok, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        if !ok {
            failed += 1;
        }
        println!("{name:<28} {:<6} {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        return Err(Error::Solver(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}
