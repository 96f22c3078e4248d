//! Combining per-configuration energies and entropies into configuration
//! probabilities, total entropy and total Helmholtz energy.
//!
//! With `F(k) = E(k) − T·S(k)` the configuration weights are
//!
//! ```text
//! p(k) = exp(a_k) / Z,   a_k = −F(k)/(k_B T) − (S(k)/(γ k_B))²
//! ```
//!
//! and the total Helmholtz energy is `Σ p F(k) + k_B T Σ p ln p`, which equals
//! `−k_B T ln Z − (T/(γ² k_B)) Σ p S(k)²`. Both forms are implemented
//! independently so each can check the other.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Expr, Graph, Real};
use crate::error::{Error, Result};
use crate::netcore::{init_params, LayerSpec, NetworkParams, Scratch};

/// Affine map from physical inputs to network inputs: `(raw − shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        InputScaling { shift: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Maps each `[lo, hi]` onto `[-1, 1]`.
    pub fn from_ranges(ranges: &[(f64, f64)]) -> Self {
        let shift = ranges.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
        let scale = ranges.iter().map(|&(lo, hi)| if hi > lo { 0.5 * (hi - lo) } else { 1.0 }).collect();
        InputScaling { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply<R: Real>(&self, raw: &[R], out: &mut Vec<R>) {
        out.clear();
        out.extend(raw.iter().zip(self.shift.iter().zip(&self.scale)).map(|(&r, (&s, &c))| (r - R::cst(s)) * R::cst(1.0 / c)));
    }
}

/// `K` paired energy/entropy networks plus the physical constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleModel {
    pub k_b: f64,
    pub gamma: f64,
    /// Number of spatial inputs (x, V, …), excluding temperature.
    pub features: usize,
    /// Whether temperature is appended as the last network input.
    pub temperature_input: bool,
    pub scaling: InputScaling,
    pub e_nets: Vec<NetworkParams>,
    pub s_nets: Vec<NetworkParams>,
}

/// Everything the ensemble produces at one input.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState<R> {
    pub t: R,
    pub e: Vec<R>,
    pub s: Vec<R>,
    pub f_cfg: Vec<R>,
    pub p: Vec<R>,
    pub log_z: R,
    pub f_total: R,
    pub s_total: R,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

impl EnsembleModel {
    /// Fresh ensemble with `k` configurations whose networks share `hidden`.
    pub fn new(
        k: usize,
        features: usize,
        temperature_input: bool,
        hidden: &[usize],
        k_b: f64,
        gamma: f64,
        seed: u64,
    ) -> Result<Self> {
        let input_dim = features + usize::from(temperature_input);
        let spec = LayerSpec::configuration(input_dim, hidden)?;
        let mut e_nets = Vec::with_capacity(k);
        let mut s_nets = Vec::with_capacity(k);
        for i in 0..k as u64 {
            e_nets.push(init_params(&spec, derive_seed(seed, 2 * i))?);
            s_nets.push(init_params(&spec, derive_seed(seed, 2 * i + 1))?);
        }
        let model = EnsembleModel {
            k_b,
            gamma,
            features,
            temperature_input,
            scaling: InputScaling::identity(input_dim),
            e_nets,
            s_nets,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_scaling(mut self, scaling: InputScaling) -> Result<Self> {
        if scaling.dim() != self.input_dim() || scaling.scale.iter().any(|&s| s == 0.0) {
            return Err(Error::Contract("input scaling does not match network inputs".into()));
        }
        self.scaling = scaling;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.e_nets.is_empty() {
            bad.push("K must be at least 1".to_string());
        }
        if self.e_nets.len() != self.s_nets.len() {
            bad.push("energy and entropy network counts differ".to_string());
        }
        if !(self.gamma > 0.0) {
            bad.push(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.k_b > 0.0) {
            bad.push(format!("k_B must be positive, got {}", self.k_b));
        }
        let dim = self.input_dim();
        if self.e_nets.iter().chain(&self.s_nets).any(|n| n.input_dim() != dim || n.output_dim() != 1) {
            bad.push(format!("every configuration network must map {dim} inputs to 1 output"));
        }
        if self.scaling.dim() != dim {
            bad.push("input scaling has the wrong dimension".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(bad.join("; ")))
        }
    }

    pub fn k(&self) -> usize {
        self.e_nets.len()
    }

    pub fn input_dim(&self) -> usize {
        self.features + usize::from(self.temperature_input)
    }

    pub fn param_count(&self) -> usize {
        self.e_nets.iter().chain(&self.s_nets).map(NetworkParams::param_count).sum()
    }

    /// Energy networks first, then entropy networks.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for n in self.e_nets.iter().chain(&self.s_nets) {
            n.write_flat(&mut out);
        }
        out
    }

    pub fn read_flat(&mut self, src: &[f64]) {
        let mut at = 0;
        for n in self.e_nets.iter_mut().chain(self.s_nets.iter_mut()) {
            at += n.read_flat(&src[at..]);
        }
    }

    /// Offset of each network's parameters in [`flat`](Self::flat), energy nets first.
    pub fn net_offsets(&self) -> Vec<usize> {
        let mut at = 0;
        self.e_nets
            .iter()
            .chain(&self.s_nets)
            .map(|n| {
                let o = at;
                at += n.param_count();
                o
            })
            .collect()
    }

    fn check(&self, x: &[impl Copy], t: f64) -> Result<()> {
        if x.len() != self.features {
            return Err(Error::Dimension { expected: self.features, got: x.len() });
        }
        if !(t > 0.0) {
            return Err(Error::Contract(format!("temperature must be positive, got {t}")));
        }
        Ok(())
    }

    /// Scaled network input for `(x, T)`.
    pub fn net_input<R: Real>(&self, x: &[R], t: R, out: &mut Vec<R>) {
        let mut raw = Vec::with_capacity(self.input_dim());
        raw.extend_from_slice(x);
        if self.temperature_input {
            raw.push(t);
        }
        self.scaling.apply(&raw, out);
    }
}

/// Raw energy outputs and softplus-rectified entropies for each configuration.
pub fn config_energy_entropy<R: Real>(model: &EnsembleModel, x: &[R], t: R) -> Result<(Vec<R>, Vec<R>)> {
    model.check(x, t.value())?;
    let mut input = Vec::new();
    model.net_input(x, t, &mut input);
    let mut trace = Vec::new();
    let mut e = Vec::with_capacity(model.k());
    let mut s = Vec::with_capacity(model.k());
    for (en, sn) in model.e_nets.iter().zip(&model.s_nets) {
        en.run(&input, &mut trace);
        e.push(*trace.last().expect("non-empty trace"));
        sn.run(&input, &mut trace);
        s.push(trace.last().expect("non-empty trace").softplus());
    }
    Ok((e, s))
}

/// Exponents `a_k` of the configuration weights.
pub fn log_weights<R: Real>(f_cfg: &[R], s: &[R], t: R, gamma: f64, k_b: f64) -> Vec<R> {
    let kt = R::cst(k_b) * t;
    let gk = R::cst(1.0 / (gamma * k_b));
    f_cfg
        .iter()
        .zip(s)
        .map(|(&f, &s)| {
            let r = s * gk;
            -(f / kt) - r * r
        })
        .collect()
}

/// Log-sum-exp with the maximum subtracted first.
pub fn log_sum_exp<R: Real>(a: &[R]) -> R {
    let (imax, _) = a
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v.value() > bv { (i, v.value()) } else { (bi, bv) });
    let m = a[imax];
    let sum = a.iter().fold(R::zero(), |acc, &v| acc + (v - m).exp());
    m + sum.ln()
}

/// Configuration probabilities and `ln Z`.
pub fn probabilities<R: Real>(f_cfg: &[R], s: &[R], t: R, gamma: f64, k_b: f64) -> Result<(Vec<R>, R)> {
    if f_cfg.is_empty() || f_cfg.len() != s.len() {
        return Err(Error::Dimension { expected: f_cfg.len().max(1), got: s.len() });
    }
    if !(t.value() > 0.0 && gamma > 0.0 && k_b > 0.0) {
        return Err(Error::Contract("T, gamma and k_B must be positive".into()));
    }
    if let Some(bad) = f_cfg.iter().chain(s).find(|v| !v.value().is_finite()) {
        return Err(Error::NonFinite(format!("configuration input {:?}", bad.value())));
    }
    let a = log_weights(f_cfg, s, t, gamma, k_b);
    let log_z = log_sum_exp(&a);
    let p = a.iter().map(|&ak| (ak - log_z).exp()).collect();
    Ok((p, log_z))
}

fn check_normalized<R: Real>(p: &[R]) -> Result<()> {
    let sum: f64 = p.iter().map(|v| v.value()).sum();
    if (sum - 1.0).abs() > 1e-9 || p.iter().any(|v| v.value() < 0.0) {
        return Err(Error::Contract(format!("probabilities must be normalized, sum = {sum}")));
    }
    Ok(())
}

fn p_ln_p<R: Real>(p: R) -> R {
    if p.value() > 0.0 {
        p * p.ln()
    } else {
        R::zero()
    }
}

/// `Σ p S(k) − k_B Σ p ln p` with `0 ln 0 = 0`.
pub fn total_entropy<R: Real>(p: &[R], s: &[R], k_b: f64) -> Result<R> {
    check_normalized(p)?;
    let mut acc = R::zero();
    for (&pk, &sk) in p.iter().zip(s) {
        acc += pk * sk - R::cst(k_b) * p_ln_p(pk);
    }
    Ok(acc)
}

/// `Σ p F(k) + k_B T Σ p ln p`.
pub fn total_helmholtz<R: Real>(p: &[R], f_cfg: &[R], t: R, k_b: f64) -> Result<R> {
    check_normalized(p)?;
    if !(t.value() > 0.0) {
        return Err(Error::Contract("temperature must be positive".into()));
    }
    let kt = R::cst(k_b) * t;
    let mut acc = R::zero();
    for (&pk, &fk) in p.iter().zip(f_cfg) {
        acc += pk * fk + kt * p_ln_p(pk);
    }
    Ok(acc)
}

/// `−k_B T ln Z − (T/(γ² k_B)) Σ p S(k)²`.
pub fn helmholtz_closed_form<R: Real>(log_z: R, p: &[R], s: &[R], t: R, gamma: f64, k_b: f64) -> R {
    let fluct = p.iter().zip(s).fold(R::zero(), |acc, (&pk, &sk)| acc + pk * sk * sk);
    -(R::cst(k_b) * t * log_z) - t * R::cst(1.0 / (gamma * gamma * k_b)) * fluct
}

/// Full state of the ensemble at `(x, T)`.
pub fn evaluate_ensemble<R: Real>(model: &EnsembleModel, x: &[R], t: R) -> Result<EnsembleState<R>> {
    let (e, s) = config_energy_entropy(model, x, t)?;
    let f_cfg: Vec<R> = e.iter().zip(&s).map(|(&e, &s)| e - t * s).collect();
    let (p, log_z) = probabilities(&f_cfg, &s, t, model.gamma, model.k_b)?;
    let f_total = total_helmholtz(&p, &f_cfg, t, model.k_b)?;
    let s_total = total_entropy(&p, &s, model.k_b)?;
    Ok(EnsembleState { t, e, s, f_cfg, p, log_z, f_total, s_total })
}

/// Total Helmholtz energy of the ensemble recorded into `g`.
///
/// The log-partition function is shifted by the first configuration's
/// exponent, so only exponent differences are exponentiated.
pub fn ensemble_expr(model: &EnsembleModel, g: &mut Graph, x: &[Expr], t: Expr) -> Result<Expr> {
    if x.len() != model.features {
        return Err(Error::Dimension { expected: model.features, got: x.len() });
    }
    let mut raw = x.to_vec();
    if model.temperature_input {
        raw.push(t);
    }
    let input: Vec<Expr> = raw
        .iter()
        .zip(model.scaling.shift.iter().zip(&model.scaling.scale))
        .map(|(&r, (&sh, &sc))| {
            let centred = g.add_const(r, -sh);
            g.scale(centred, 1.0 / sc)
        })
        .collect();
    let kt = g.scale(t, model.k_b);
    let mut f_cfg = Vec::with_capacity(model.k());
    let mut a = Vec::with_capacity(model.k());
    for (en, sn) in model.e_nets.iter().zip(&model.s_nets) {
        let e = en.forward_expr(g, &input)?[0];
        let raw_s = sn.forward_expr(g, &input)?[0];
        let s = g.softplus(raw_s);
        let ts = g.mul(t, s);
        let f = g.sub(e, ts);
        let f_over = g.div(f, kt);
        let r = g.scale(s, 1.0 / (model.gamma * model.k_b));
        let r2 = g.square(r);
        let neg = g.add(f_over, r2);
        f_cfg.push(f);
        a.push(g.neg(neg));
    }
    let a0 = a[0];
    let shifted: Vec<Expr> = a
        .iter()
        .map(|&ak| {
            let d = g.sub(ak, a0);
            g.exp(d)
        })
        .collect();
    let z = g.sum(&shifted);
    let ln_z = g.ln(z);
    let log_z = g.add(a0, ln_z);
    let mut terms = Vec::with_capacity(model.k());
    for (&ak, &f) in a.iter().zip(&f_cfg) {
        let ln_p = g.sub(ak, log_z);
        let p = g.exp(ln_p);
        let kt_lnp = g.mul(kt, ln_p);
        let inner = g.add(f, kt_lnp);
        terms.push(g.mul(p, inner));
    }
    Ok(g.sum(&terms))
}

/// Derivatives of the total Helmholtz energy with respect to the raw network
/// outputs at one input, used by the training loop.
#[derive(Clone, Debug, Default)]
pub struct HeadGrad {
    pub f_total: f64,
    pub p: Vec<f64>,
    /// `∂F/∂E(k)`.
    pub d_e: Vec<f64>,
    /// `∂F/∂s(k)` where `S(k) = softplus(s(k))`.
    pub d_s_raw: Vec<f64>,
}

/// `F_total` and its gradient with respect to `(E(k), raw S(k))`.
pub fn head_grad(e: &[f64], s_raw: &[f64], t: f64, gamma: f64, k_b: f64, out: &mut HeadGrad) {
    let k = e.len();
    let kt = k_b * t;
    let inv_g2k2 = 1.0 / (gamma * gamma * k_b * k_b);
    out.p.clear();
    out.d_e.clear();
    out.d_s_raw.clear();
    let mut s = Vec::with_capacity(k);
    let mut a = Vec::with_capacity(k);
    for i in 0..k {
        let si = s_raw[i].softplus();
        s.push(si);
        a.push(-(e[i] - t * si) / kt - si * si * inv_g2k2);
    }
    let log_z = log_sum_exp(&a);
    let mut q = 0.0;
    for i in 0..k {
        let p = (a[i] - log_z).exp();
        out.p.push(p);
        q += p * s[i] * s[i];
    }
    let c = t / (gamma * gamma * k_b);
    out.f_total = -kt * log_z - c * q;
    for i in 0..k {
        let p = out.p[i];
        let d_a = -kt * p - c * p * (s[i] * s[i] - q);
        let d_s = d_a * (1.0 / k_b - 2.0 * s[i] * inv_g2k2) - c * 2.0 * p * s[i];
        out.d_e.push(-d_a / kt);
        out.d_s_raw.push(d_s * s_raw[i].sigmoid());
    }
}

/// Forward record of the ensemble at one input, kept for a later reverse pass.
#[derive(Clone, Debug, Default)]
pub struct PointCache {
    traces: Vec<Vec<f64>>,
    e: Vec<f64>,
    s_raw: Vec<f64>,
    pub head: HeadGrad,
}

impl EnsembleModel {
    /// Runs every network at `(x, T)` and records traces and head derivatives.
    /// Returns the total Helmholtz energy.
    pub fn forward_cached(&self, x: &[f64], t: f64, cache: &mut PointCache, input: &mut Vec<f64>) -> Result<f64> {
        self.check(x, t)?;
        self.net_input(x, t, input);
        let k = self.k();
        cache.traces.resize_with(2 * k, Vec::new);
        cache.e.clear();
        cache.s_raw.clear();
        for (i, net) in self.e_nets.iter().chain(&self.s_nets).enumerate() {
            net.run(input, &mut cache.traces[i]);
            let out = *cache.traces[i].last().expect("non-empty trace");
            if i < k {
                cache.e.push(out);
            } else {
                cache.s_raw.push(out);
            }
        }
        head_grad(&cache.e, &cache.s_raw, t, self.gamma, self.k_b, &mut cache.head);
        let f = cache.head.f_total;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("F at T = {t}")));
        }
        Ok(f)
    }

    /// Adds `adj · ∂F/∂θ` for a cached point into the flat gradient `grad`.
    pub fn backward_cached(&self, cache: &PointCache, adj: f64, grad: &mut [f64], scratch: &mut Scratch<f64>) {
        let k = self.k();
        let mut at = 0;
        for (i, net) in self.e_nets.iter().chain(&self.s_nets).enumerate() {
            let n = net.param_count();
            let d = if i < k { cache.head.d_e[i] } else { cache.head.d_s_raw[i - k] };
            net.backprop(&cache.traces[i], &[adj * d], &mut grad[at..at + n], scratch);
            at += n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Bindings, Dual};
    use std::f64::consts::LN_2;

    #[test]
    fn probability_examples() {
        let (p, lz) = probabilities(&[0.7f64], &[0.4], 1.3, 5.0, 1.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15);
        let want = -0.7 / 1.3 - (0.4f64 / 5.0).powi(2);
        assert!((lz - want).abs() < 1e-15);

        let (p, _) = probabilities(&[0.0, 0.0], &[0.0, 0.0], 1.0, 5.0, 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        let (p, _) = probabilities(&[0.0, LN_2], &[0.0, 0.0], 1.0, 5.0, 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn probability_errors() {
        assert!(matches!(probabilities(&[f64::NAN], &[0.0], 1.0, 5.0, 1.0), Err(Error::NonFinite(_))));
        assert!(probabilities(&[0.0], &[0.0], 0.0, 5.0, 1.0).is_err());
        assert!(probabilities::<f64>(&[], &[], 1.0, 5.0, 1.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        let k = 4;
        let p = vec![0.25f64; k];
        let s = vec![0.0; k];
        assert!((total_entropy(&p, &s, 1.0).unwrap() - (k as f64).ln()).abs() < 1e-15);
        assert!((total_entropy(&[1.0f64, 0.0, 0.0], &[1.7, 3.0, 9.0], 1.0).unwrap() - 1.7).abs() < 1e-15);
        let v: f64 = total_entropy(&[0.5, 0.5], &[1.0, 3.0], 1.0).unwrap();
        assert!((v - (2.0 + LN_2)).abs() < 1e-15);
        assert!((v - 2.693147).abs() < 1e-6);
        assert!(matches!(total_entropy(&[0.5, 0.6], &[0.0, 0.0], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn helmholtz_examples() {
        assert_eq!(total_helmholtz(&[1.0], &[2.5], 1.0, 1.0).unwrap(), 2.5);
        let f = 0.8;
        let (p, lz) = probabilities(&[f, f], &[0.3, 0.3], 1.5, 5.0, 1.0).unwrap();
        let eq7 = total_helmholtz(&p, &[f, f], 1.5, 1.0).unwrap();
        assert!((eq7 - (f - 1.5 * LN_2)).abs() < 1e-14);
        let closed = helmholtz_closed_form(lz, &p, &[0.3, 0.3], 1.5, 5.0, 1.0);
        // the closed form carries the entropy-fluctuation shift of ln Z
        assert!((closed - eq7).abs() < 1e-14);
    }

    #[test]
    fn zero_weight_ensemble() {
        let mut m = EnsembleModel::new(2, 1, true, &[8], 1.0, 5.0, 0).unwrap();
        let zeros = vec![0.0; m.param_count()];
        m.read_flat(&zeros);
        let st = evaluate_ensemble(&m, &[0.3], 1.0).unwrap();
        assert_eq!(st.e, vec![0.0, 0.0]);
        assert!(st.s.iter().all(|&s| (s - LN_2).abs() < 1e-15));
        assert!(st.p.iter().all(|&p| (p - 0.5).abs() < 1e-15));
        let f_cfg = -LN_2;
        assert!((st.f_total - (f_cfg - LN_2)).abs() < 1e-14);
        let closed = helmholtz_closed_form(st.log_z, &st.p, &st.s, 1.0, 5.0, 1.0);
        assert!((st.f_total - closed).abs() < 1e-14);
    }

    #[test]
    fn graph_and_direct_agree() {
        let m = EnsembleModel::new(3, 1, true, &[8, 8], 1.0, 5.0, 11)
            .unwrap()
            .with_scaling(InputScaling::from_ranges(&[(-2.0, 2.0), (1.0, 3.0)]))
            .unwrap();
        let mut g = Graph::new();
        let x = g.variable("x");
        let t = g.variable("T");
        let f = ensemble_expr(&m, &mut g, &[x], t).unwrap();
        for &(xv, tv) in &[(0.3f64, 1.2f64), (-1.5, 2.7), (0.0, 2.0)] {
            let direct = evaluate_ensemble(&m, &[xv], tv).unwrap().f_total;
            let via = g.evaluate(f, &Bindings::new().with(x, xv).with(t, tv)).unwrap();
            assert!((direct - via).abs() < 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn head_grad_matches_dual_numbers() {
        let e = [0.3, -0.8, 1.1, 0.05];
        let s_raw = [-0.4, 0.9, 0.2, 2.0];
        let t = 1.7;
        let (gamma, k_b) = (5.0, 0.7);
        let mut hg = HeadGrad::default();
        head_grad(&e, &s_raw, t, gamma, k_b, &mut hg);
        let f_of = |e: &[Dual<f64>], s_raw: &[Dual<f64>]| -> Dual<f64> {
            let s: Vec<_> = s_raw.iter().map(|v| v.softplus()).collect();
            let tt = Dual::constant(t);
            let f: Vec<_> = e.iter().zip(&s).map(|(&e, &s)| e - tt * s).collect();
            let (p, _) = probabilities(&f, &s, tt, gamma, k_b).unwrap();
            total_helmholtz(&p, &f, tt, k_b).unwrap()
        };
        for i in 0..4 {
            let ed: Vec<_> = e.iter().enumerate().map(|(j, &v)| Dual::new(v, f64::from(u8::from(i == j)))).collect();
            let sd: Vec<_> = s_raw.iter().map(|&v| Dual::constant(v)).collect();
            let d = f_of(&ed, &sd);
            assert!((d.re - hg.f_total).abs() < 1e-12);
            assert!((d.du - hg.d_e[i]).abs() < 1e-12, "dE {i}");
            let ed: Vec<_> = e.iter().map(|&v| Dual::constant(v)).collect();
            let sd: Vec<_> = s_raw.iter().enumerate().map(|(j, &v)| Dual::new(v, f64::from(u8::from(i == j)))).collect();
            let d = f_of(&ed, &sd);
            assert!((d.du - hg.d_s_raw[i]).abs() < 1e-12, "dS {i}");
        }
    }

    #[test]
    fn cached_gradient_matches_finite_differences() {
        let mut m = EnsembleModel::new(3, 1, true, &[4], 1.0, 5.0, 7).unwrap();
        let (x, t) = ([0.4], 1.6);
        let mut cache = PointCache::default();
        let mut input = Vec::new();
        let mut grad = vec![0.0; m.param_count()];
        m.forward_cached(&x, t, &mut cache, &mut input).unwrap();
        m.backward_cached(&cache, 1.0, &mut grad, &mut Scratch::new());
        let theta = m.flat();
        let h = 1e-6;
        for i in (0..theta.len()).step_by(5) {
            let mut tp = theta.clone();
            tp[i] += h;
            m.read_flat(&tp);
            let fp = evaluate_ensemble(&m, &x, t).unwrap().f_total;
            tp[i] -= 2.0 * h;
            m.read_flat(&tp);
            let fm = evaluate_ensemble(&m, &x, t).unwrap().f_total;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
        m.read_flat(&theta);
    }
}
