//! Training objectives: cross-entropy, cross-zentropy, KL / Jensen–Shannon
//! divergences between grid densities, and the per-configuration convexity
//! penalty. Parameter gradients are provided alongside the values.

use std::collections::BTreeMap;

use crate::autodiff::{Dual, Real};
use crate::error::{Error, Result};
use crate::netcore::Scratch;
use crate::zentropy::{config_energy_entropy, log_sum_exp, log_weights, EnsembleModel, PointCache};

/// Additive smoothing applied to histogram densities.
pub const HISTOGRAM_EPS: f64 = 1e-12;
const CE_CLAMP: f64 = 1e-300;

/// Tensor-product grid; points are enumerated with the first axis outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub axes: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Contract("grid needs at least one axis".into()));
        }
        for (i, a) in axes.iter().enumerate() {
            if a.is_empty() || a.windows(2).any(|w| !(w[1] > w[0])) || a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("grid axis {i} must be finite and strictly increasing")));
            }
        }
        Ok(Grid { axes })
    }

    /// `n` evenly spaced points on `[lo, hi]` per axis.
    pub fn uniform(ranges: &[(f64, f64, usize)]) -> Result<Self> {
        Grid::new(ranges.iter().map(|&(lo, hi, n)| linspace(lo, hi, n)).collect())
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, mut i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.dim(), 0.0);
        for (d, a) in self.axes.iter().enumerate().rev() {
            out[d] = a[i % a.len()];
            i /= a.len();
        }
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut p = Vec::new();
        (0..self.len())
            .map(|i| {
                self.point(i, &mut p);
                p.clone()
            })
            .collect()
    }

    /// Products of per-axis trapezoid weights.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let per_axis: Vec<Vec<f64>> = self.axes.iter().map(|a| trapezoid_1d(a)).collect();
        self.combine(&per_axis)
    }

    /// Every point carries the same `cell_measure`.
    pub fn cell_weights(&self, cell_measure: f64) -> Vec<f64> {
        vec![cell_measure; self.len()]
    }

    fn combine(&self, per_axis: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![1.0; self.len()];
        let mut idx = vec![0usize; self.dim()];
        for w in out.iter_mut() {
            for (d, &i) in idx.iter().enumerate() {
                *w *= per_axis[d][i];
            }
            for d in (0..self.dim()).rev() {
                idx[d] += 1;
                if idx[d] < self.axes[d].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
        out
    }

    /// Index of the grid point nearest to `x`, or `None` if `x` lies outside.
    pub fn nearest(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for (a, &v) in self.axes.iter().zip(x) {
            let (lo, hi) = (a[0], a[a.len() - 1]);
            if !(v >= lo && v <= hi) {
                return None;
            }
            let j = a.partition_point(|&g| g < v);
            let j = if j == 0 {
                0
            } else if j == a.len() || v - a[j - 1] <= a[j] - v {
                j - 1
            } else {
                j
            };
            flat = flat * a.len() + j;
        }
        Some(flat)
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Trapezoid quadrature weights for a strictly increasing abscissa.
pub fn trapezoid_1d(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| {
            let left = if i > 0 { x[i] - x[i - 1] } else { 0.0 };
            let right = if i + 1 < n { x[i + 1] - x[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Normalized nonnegative density on a grid with explicit quadrature weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GridDensity {
    /// Checks nonnegativity and `Σ values·weights = 1` within 1e-8.
    pub fn new(grid: Grid, values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() || weights.len() != grid.len() {
            return Err(Error::Dimension { expected: grid.len(), got: values.len().min(weights.len()) });
        }
        if values.iter().chain(&weights).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Contract("density values and weights must be finite and nonnegative".into()));
        }
        let mass: f64 = values.iter().zip(&weights).map(|(v, w)| v * w).sum();
        if (mass - 1.0).abs() > 1e-8 {
            return Err(Error::Contract(format!("density integrates to {mass}, not 1")));
        }
        Ok(GridDensity { grid, values, weights })
    }

    /// Rescales `values` so the density integrates to one.
    pub fn normalized(grid: Grid, mut values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let mass: f64 = values.iter().zip(&weights).map(|(v, w)| v * w).sum();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::Contract(format!("cannot normalize density with mass {mass}")));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        GridDensity::new(grid, values, weights)
    }

    /// One-dimensional density on cells of equal measure, indexed `0, 1, …`.
    pub fn from_cells(values: Vec<f64>, cell_measure: f64) -> Result<Self> {
        let grid = Grid::new(vec![(0..values.len()).map(|i| i as f64).collect()])?;
        let weights = grid.cell_weights(cell_measure);
        GridDensity::new(grid, values, weights)
    }

    /// Histogram of samples binned to the nearest grid point with additive
    /// smoothing `eps`, normalized under trapezoid weights. Samples outside
    /// the grid are ignored.
    pub fn from_samples(grid: Grid, samples: &[Vec<f64>], eps: f64) -> Result<Self> {
        let weights = grid.trapezoid_weights();
        let mut counts = vec![0.0; grid.len()];
        let mut used = 0usize;
        for s in samples {
            if s.len() != grid.dim() {
                return Err(Error::Dimension { expected: grid.dim(), got: s.len() });
            }
            if let Some(i) = grid.nearest(s) {
                counts[i] += 1.0;
                used += 1;
            }
        }
        if used == 0 {
            return Err(Error::Contract("no samples fall inside the grid".into()));
        }
        let values = counts.iter().zip(&weights).map(|(&c, &w)| (c / used as f64 + eps) / w).collect();
        GridDensity::normalized(grid, values, weights)
    }

    fn same_support(&self, other: &GridDensity) -> Result<()> {
        if self.grid != other.grid || self.weights != other.weights {
            return Err(Error::Contract("densities live on different grids".into()));
        }
        Ok(())
    }
}

/// Samples with temperature inputs and class labels (one-hot implicit).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub t: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn new(t: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if t.is_empty() || t.len() != labels.len() {
            return Err(Error::Contract("labeled set needs M ≥ 1 matching inputs and labels".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(LabeledSet { t, labels, classes })
    }

    /// Builds from one-hot rows; each must contain exactly one 1 and zeros elsewhere.
    pub fn from_one_hot(t: Vec<f64>, y: &[Vec<f64>]) -> Result<Self> {
        let classes = y.first().map_or(0, Vec::len);
        let mut labels = Vec::with_capacity(y.len());
        for (j, row) in y.iter().enumerate() {
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
            if row.len() != classes || ones.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract(format!("row {j} is not one-hot")));
            }
            labels.push(ones[0]);
        }
        LabeledSet::new(t, labels, classes)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Label counts per distinct temperature, in increasing temperature order.
    pub fn counts_by_temperature(&self) -> Vec<(f64, Vec<usize>)> {
        let mut map: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (&t, &l) in self.t.iter().zip(&self.labels) {
            // positive temperatures order like their bit patterns
            map.entry(t.to_bits()).or_insert_with(|| vec![0; self.classes])[l] += 1;
        }
        map.into_iter().map(|(b, c)| (f64::from_bits(b), c)).collect()
    }
}

/// Mean of `⟨y_j, −ln p_j⟩`.
pub fn cross_entropy(labels: &LabeledSet, probs: &[Vec<f64>]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension { expected: labels.len(), got: probs.len() });
    }
    let mut acc = 0.0;
    for (j, (row, &y)) in probs.iter().zip(&labels.labels).enumerate() {
        if row.len() != labels.classes {
            return Err(Error::Dimension { expected: labels.classes, got: row.len() });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Contract(format!("probability row {j} sums to {sum}")));
        }
        acc -= row[y].max(CE_CLAMP).ln();
    }
    Ok(acc / labels.len() as f64)
}

fn check_classifier(labels: &LabeledSet, model: &EnsembleModel) -> Result<()> {
    if model.features != 0 || !model.temperature_input {
        return Err(Error::Contract("classifier ensembles take temperature as their only input".into()));
    }
    if model.k() != labels.classes {
        return Err(Error::Contract(format!("model has K = {} but labels have {} classes", model.k(), labels.classes)));
    }
    if labels.t.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Contract("temperatures must be positive".into()));
    }
    Ok(())
}

/// Mean over samples of the bracket `(E − T S)/(k_B T) + (S/(γ k_B))² + ln Z`
/// at the true class.
pub fn cross_zentropy(labels: &LabeledSet, model: &EnsembleModel) -> Result<f64> {
    check_classifier(labels, model)?;
    let (g, kb) = (model.gamma, model.k_b);
    let mut acc = 0.0;
    for (&t, &y) in labels.t.iter().zip(&labels.labels) {
        let (e, s) = config_energy_entropy(model, &[], t)?;
        let mut z = 0.0;
        for (&ek, &sk) in e.iter().zip(&s) {
            z += (-(ek - t * sk) / (kb * t) - (sk / (g * kb)).powi(2)).exp();
        }
        acc += (e[y] - t * s[y]) / (kb * t) + (s[y] / (g * kb)).powi(2) + z.ln();
    }
    Ok(acc / labels.len() as f64)
}

/// Cross-zentropy and its gradient in [`EnsembleModel::flat`] order.
/// Samples sharing a temperature are evaluated once.
pub fn cross_zentropy_grad(labels: &LabeledSet, model: &EnsembleModel) -> Result<(f64, Vec<f64>)> {
    check_classifier(labels, model)?;
    let mut grad = vec![0.0; model.param_count()];
    let loss = cross_zentropy_counts_grad(&labels.counts_by_temperature(), model, &mut grad)?;
    Ok((loss, grad))
}

/// Cross-zentropy from per-temperature label counts (as produced by
/// [`LabeledSet::counts_by_temperature`]); adds the gradient into `grad`.
pub fn cross_zentropy_counts_grad(counts: &[(f64, Vec<usize>)], model: &EnsembleModel, grad: &mut [f64]) -> Result<f64> {
    let k = model.k();
    if model.features != 0 || !model.temperature_input {
        return Err(Error::Contract("classifier ensembles take temperature as their only input".into()));
    }
    if counts.iter().any(|(t, c)| c.len() != k || !(*t > 0.0)) {
        return Err(Error::Contract(format!("counts must have K = {k} classes at positive temperatures")));
    }
    let total: usize = counts.iter().map(|(_, c)| c.iter().sum::<usize>()).sum();
    if total == 0 {
        return Err(Error::Contract("no samples".into()));
    }
    let (g, kb) = (model.gamma, model.k_b);
    let inv_m = 1.0 / total as f64;
    let mut loss = 0.0;
    let mut input = Vec::new();
    let mut traces = vec![Vec::new(); 2 * k];
    let mut scratch = Scratch::new();
    let offsets = model.net_offsets();
    for (t, counts) in counts {
        let t = *t;
        model.net_input(&[], t, &mut input);
        for (net, tr) in model.e_nets.iter().chain(&model.s_nets).zip(traces.iter_mut()) {
            net.run(&input, tr);
        }
        let e: Vec<f64> = traces[..k].iter().map(|tr| tr[tr.len() - 1]).collect();
        let s_raw: Vec<f64> = traces[k..].iter().map(|tr| tr[tr.len() - 1]).collect();
        let s: Vec<f64> = s_raw.iter().map(|v| v.softplus()).collect();
        let f: Vec<f64> = e.iter().zip(&s).map(|(e, s)| e - t * s).collect();
        let a = log_weights(&f, &s, t, g, kb);
        let log_z = log_sum_exp(&a);
        if !log_z.is_finite() {
            return Err(Error::NonFinite(format!("ln Z at T = {t}")));
        }
        let n: f64 = counts.iter().sum::<usize>() as f64;
        for i in 0..k {
            let p = (a[i] - log_z).exp();
            let c = counts[i] as f64;
            loss += c * (log_z - a[i]);
            // d/da_i of Σ_y c_y (ln Z − a_y)
            let d_a = (n * p - c) * inv_m;
            let d_e = -d_a / (kb * t);
            let d_s = d_a * (1.0 / kb - 2.0 * s[i] / (g * g * kb * kb)) * s_raw[i].sigmoid();
            let (oe, os) = (offsets[i], offsets[k + i]);
            let (ne, ns) = (model.e_nets[i].param_count(), model.s_nets[i].param_count());
            model.e_nets[i].backprop(&traces[i], &[d_e], &mut grad[oe..oe + ne], &mut scratch);
            model.s_nets[i].backprop(&traces[k + i], &[d_s], &mut grad[os..os + ns], &mut scratch);
        }
    }
    Ok(loss * inv_m)
}

/// `Σ w (P ln P − P ln M)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &GridDensity, m: &GridDensity) -> Result<f64> {
    p.same_support(m)?;
    let mut acc = 0.0;
    for ((&pv, &mv), &w) in p.values.iter().zip(&m.values).zip(&p.weights) {
        if pv > 0.0 && w > 0.0 {
            if !(mv > 0.0) {
                return Err(Error::Contract("KL support violation: M vanishes where P does not".into()));
            }
            acc += w * pv * (pv / mv).ln();
        }
    }
    Ok(acc)
}

fn midpoint(p: &GridDensity, q: &GridDensity) -> GridDensity {
    GridDensity {
        grid: p.grid.clone(),
        values: p.values.iter().zip(&q.values).map(|(a, b)| 0.5 * (a + b)).collect(),
        weights: p.weights.clone(),
    }
}

/// `½ KL(P‖M) + ½ KL(Q‖M)` with `M = (P + Q)/2`.
pub fn js_divergence(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    p.same_support(q)?;
    let m = midpoint(p, q);
    Ok(0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?)
}

/// Jensen–Shannon divergence and its derivative with respect to each value of `Q`.
pub fn js_with_adjoint(p: &GridDensity, q: &GridDensity) -> Result<(f64, Vec<f64>)> {
    let js = js_divergence(p, q)?;
    let adj = q
        .values
        .iter()
        .zip(&p.values)
        .zip(&q.weights)
        .map(|((&qv, &pv), &w)| if qv > 0.0 { 0.5 * w * (2.0 * qv / (pv + qv)).ln() } else { 0.0 })
        .collect();
    Ok((js, adj))
}

/// Density `∝ exp(−F/(k_B T))` normalized under trapezoid weights.
pub fn boltzmann_density(grid: &Grid, f: &[f64], kt: f64) -> Result<GridDensity> {
    if f.len() != grid.len() {
        return Err(Error::Dimension { expected: grid.len(), got: f.len() });
    }
    if let Some(bad) = f.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("F = {bad} on the density grid")));
    }
    let weights = grid.trapezoid_weights();
    let u: Vec<f64> = f.iter().map(|&f| -f / kt).collect();
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = u.iter().map(|&u| (u - m).exp()).collect();
    GridDensity::normalized(grid.clone(), values, weights)
}

/// Pulls a value-space adjoint `∂L/∂Q` back to `∂L/∂F` for a Boltzmann density.
pub fn boltzmann_adjoint(q: &GridDensity, d_q: &[f64], kt: f64) -> Vec<f64> {
    let dot: f64 = d_q.iter().zip(&q.values).map(|(g, q)| g * q).sum();
    d_q.iter()
        .zip(&q.values)
        .zip(&q.weights)
        .map(|((&g, &qv), &w)| -(g * qv - w * qv * dot) / kt)
        .collect()
}

/// Model density over `grid` at temperature `t`.
pub fn model_density(model: &EnsembleModel, grid: &Grid, t: f64) -> Result<GridDensity> {
    if !(t > 0.0) {
        return Err(Error::Contract("temperature must be positive".into()));
    }
    if grid.dim() != model.features {
        return Err(Error::Dimension { expected: model.features, got: grid.dim() });
    }
    let mut cache = PointCache::default();
    let mut input = Vec::new();
    let mut x = Vec::new();
    let f = (0..grid.len())
        .map(|i| {
            grid.point(i, &mut x);
            model.forward_cached(&x, t, &mut cache, &mut input)
        })
        .collect::<Result<Vec<_>>>()?;
    boltzmann_density(grid, &f, model.k_b * t)
}

/// Reusable buffers for [`js_loss_grad`].
#[derive(Default)]
pub struct JsWork {
    caches: Vec<PointCache>,
    input: Vec<f64>,
    x: Vec<f64>,
    scratch: Scratch<f64>,
}

/// JS divergence between data `p` and the model density at `t`; adds its
/// parameter gradient times `weight` into `grad`.
pub fn js_loss_grad(
    p: &GridDensity,
    model: &EnsembleModel,
    t: f64,
    weight: f64,
    grad: &mut [f64],
    work: &mut JsWork,
) -> Result<f64> {
    let grid = &p.grid;
    work.caches.resize_with(grid.len(), PointCache::default);
    let mut f = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        grid.point(i, &mut work.x);
        f.push(model.forward_cached(&work.x, t, &mut work.caches[i], &mut work.input)?);
    }
    let kt = model.k_b * t;
    let q = boltzmann_density(grid, &f, kt)?;
    let (js, d_q) = js_with_adjoint(p, &q)?;
    let d_f = boltzmann_adjoint(&q, &d_q, kt);
    for (cache, &d) in work.caches.iter().zip(&d_f) {
        if d != 0.0 {
            model.backward_cached(cache, weight * d, grad, &mut work.scratch);
        }
    }
    Ok(js)
}

/// `λ Σ_k ∫ ReLU(−c_k(V)) dV` for sampled curvatures `c_k` on `v_grid`,
/// integrated with the trapezoid rule.
pub fn convexity_penalty_from_curvature(curvature: &[Vec<f64>], v_grid: &[f64], lambda: f64) -> Result<f64> {
    if v_grid.len() < 3 {
        return Err(Error::Contract("convexity grid needs at least 3 points".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Contract("lambda must be nonnegative".into()));
    }
    let w = trapezoid_1d(v_grid);
    let mut acc = 0.0;
    for c in curvature {
        if c.len() != v_grid.len() {
            return Err(Error::Dimension { expected: v_grid.len(), got: c.len() });
        }
        acc += c.iter().zip(&w).map(|(&c, &w)| w * (-c).max(0.0)).sum::<f64>();
    }
    Ok(lambda * acc)
}

/// `∂²F(k)/∂V²` for every configuration at `(V, T)`; `V` is the first feature.
pub fn configuration_curvatures(model: &EnsembleModel, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let mut xs: Vec<Dual<Dual<f64>>> = x.iter().map(|&v| Dual::constant(Dual::constant(v))).collect();
    xs[0] = Dual::seed(x[0], 1.0, 1.0);
    let tt = Dual::constant(Dual::constant(t));
    let (e, s) = config_energy_entropy(model, &xs, tt)?;
    Ok(e.iter().zip(&s).map(|(&e, &s)| (e - tt * s).parts().3).collect())
}

/// Convexity penalty of the configuration energies along `V` at temperature `t`.
/// Further features, if any, are held at `rest`.
pub fn convexity_penalty(model: &EnsembleModel, v_grid: &[f64], rest: &[f64], t: f64, lambda: f64) -> Result<f64> {
    let mut curv = vec![Vec::with_capacity(v_grid.len()); model.k()];
    let mut x = Vec::with_capacity(1 + rest.len());
    for &v in v_grid {
        x.clear();
        x.push(v);
        x.extend_from_slice(rest);
        for (c, ck) in configuration_curvatures(model, &x, t)?.into_iter().zip(curv.iter_mut()) {
            ck.push(c);
        }
    }
    convexity_penalty_from_curvature(&curv, v_grid, lambda)
}

type H = Dual<Dual<f64>>;

/// Reusable buffers for [`convexity_penalty_grad`].
#[derive(Default)]
pub struct ConvexWork {
    input: Vec<H>,
    trace_e: Vec<H>,
    trace_s: Vec<H>,
    grad_e: Vec<H>,
    grad_s: Vec<H>,
    scratch: Scratch<H>,
}

/// Convexity penalty along `V` at temperature `t`; adds its parameter
/// gradient into `grad`.
pub fn convexity_penalty_grad(
    model: &EnsembleModel,
    v_grid: &[f64],
    rest: &[f64],
    t: f64,
    lambda: f64,
    grad: &mut [f64],
    work: &mut ConvexWork,
) -> Result<f64> {
    if v_grid.len() < 3 {
        return Err(Error::Contract("convexity grid needs at least 3 points".into()));
    }
    let w = trapezoid_1d(v_grid);
    let offsets = model.net_offsets();
    let k = model.k();
    let tt = Dual::constant(Dual::constant(t));
    let mut total = 0.0;
    let mut x: Vec<H> = Vec::with_capacity(1 + rest.len());
    for (&v, &wv) in v_grid.iter().zip(&w) {
        x.clear();
        x.push(Dual::seed(v, 1.0, 1.0));
        x.extend(rest.iter().map(|&r| Dual::constant(Dual::constant(r))));
        model.net_input(&x, tt, &mut work.input);
        for i in 0..k {
            let (en, sn) = (&model.e_nets[i], &model.s_nets[i]);
            en.run(&work.input, &mut work.trace_e);
            sn.run(&work.input, &mut work.trace_s);
            let (_, _, _, e2) = work.trace_e[work.trace_e.len() - 1].parts();
            let (s0, s1, _, s2) = work.trace_s[work.trace_s.len() - 1].parts();
            let sig = s0.sigmoid();
            let sp1 = sig;
            let sp2 = sig * (1.0 - sig);
            let sp3 = sp2 * (1.0 - 2.0 * sig);
            let f2 = e2 - t * (sp1 * s2 + sp2 * s1 * s1);
            if f2 >= 0.0 {
                continue;
            }
            total -= wv * f2;
            let scale = -lambda * wv;
            // parameter derivatives of (o, o', o'') are the (re, du.re, du.du) parts
            let unit = [Dual::constant(Dual::constant(1.0))];
            work.grad_e.clear();
            work.grad_e.resize(en.param_count(), H::default());
            en.backprop(&work.trace_e, &unit, &mut work.grad_e, &mut work.scratch);
            let oe = offsets[i];
            for (g, d) in grad[oe..oe + en.param_count()].iter_mut().zip(&work.grad_e) {
                *g += scale * d.parts().3;
            }
            work.grad_s.clear();
            work.grad_s.resize(sn.param_count(), H::default());
            sn.backprop(&work.trace_s, &unit, &mut work.grad_s, &mut work.scratch);
            let os = offsets[k + i];
            for (g, d) in grad[os..os + sn.param_count()].iter_mut().zip(&work.grad_s) {
                let (d0, d1, _, d2) = d.parts();
                let ds2 = sp2 * d0 * s2 + sp1 * d2 + sp3 * d0 * s1 * s1 + 2.0 * sp2 * s1 * d1;
                *g -= scale * t * ds2;
            }
        }
    }
    Ok(lambda * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Bindings, Graph};
    use std::f64::consts::LN_2;

    fn ls(t: Vec<f64>, labels: Vec<usize>, c: usize) -> LabeledSet {
        LabeledSet::new(t, labels, c).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let set = ls(vec![1.0, 2.0], vec![0, 1], 2);
        assert_eq!(cross_entropy(&set, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0.0);
        let u = cross_entropy(&set, &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!((u - LN_2).abs() < 1e-15);
        let one = ls(vec![1.0], vec![0], 2);
        let v = cross_entropy(&one, &[vec![0.75, 0.25]]).unwrap();
        assert!((v - 0.287682).abs() < 1e-6);
        assert!(cross_entropy(&one, &[vec![0.75, 0.2]]).is_err());
        // exact zero at the true class is clamped, not infinite
        assert!(cross_entropy(&one, &[vec![0.0, 1.0]]).unwrap().is_finite());
    }

    #[test]
    fn one_hot_validation() {
        assert!(LabeledSet::from_one_hot(vec![1.0], &[vec![0.0, 1.0]]).is_ok());
        assert!(LabeledSet::from_one_hot(vec![1.0], &[vec![1.0, 1.0]]).is_err());
        assert!(LabeledSet::from_one_hot(vec![1.0], &[vec![0.0, 0.0]]).is_err());
        assert!(LabeledSet::new(vec![], vec![], 2).is_err());
    }

    fn zero_classifier(k: usize) -> EnsembleModel {
        let mut m = EnsembleModel::new(k, 0, true, &[8], 1.0, 5.0, 3).unwrap();
        let z = vec![0.0; m.param_count()];
        m.read_flat(&z);
        m
    }

    #[test]
    fn cross_zentropy_equal_logits() {
        let m = zero_classifier(2);
        let set = ls(vec![1.0, 3.0, 2.0], vec![0, 1, 1], 2);
        assert!((cross_zentropy(&set, &m).unwrap() - LN_2).abs() < 1e-14);
    }

    #[test]
    fn cross_zentropy_matches_cross_entropy() {
        let m = EnsembleModel::new(3, 0, true, &[8], 1.0, 5.0, 21).unwrap();
        let set = ls(vec![1.0, 1.5, 2.5, 4.0, 4.0], vec![0, 2, 1, 1, 0], 3);
        let probs: Vec<Vec<f64>> =
            set.t.iter().map(|&t| crate::zentropy::evaluate_ensemble(&m, &[], t).unwrap().p).collect();
        let ce = cross_entropy(&set, &probs).unwrap();
        let cz = cross_zentropy(&set, &m).unwrap();
        assert!((ce - cz).abs() < 1e-12);
        let (cz2, _) = cross_zentropy_grad(&set, &m).unwrap();
        assert!((cz2 - cz).abs() < 1e-12);
    }

    #[test]
    fn cross_zentropy_gradient_fd() {
        let mut m = EnsembleModel::new(3, 0, true, &[8], 1.0, 5.0, 5).unwrap();
        let set = ls(vec![1.0, 2.0, 2.0, 3.5], vec![0, 1, 2, 2], 3);
        let (_, g) = cross_zentropy_grad(&set, &m).unwrap();
        let th = m.flat();
        let h = 1e-5;
        for i in 0..th.len() {
            let mut tp = th.clone();
            tp[i] += h;
            m.read_flat(&tp);
            let lp = cross_zentropy(&set, &m).unwrap();
            tp[i] -= 2.0 * h;
            m.read_flat(&tp);
            let lm = cross_zentropy(&set, &m).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: {fd} {}", g[i]);
        }
    }

    #[test]
    fn kl_examples() {
        let p = GridDensity::from_cells(vec![1.0, 0.0], 1.0).unwrap();
        let m = GridDensity::from_cells(vec![0.75, 0.25], 1.0).unwrap();
        assert!((kl_divergence(&p, &m).unwrap() - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((kl_divergence(&p, &m).unwrap() - 0.287682).abs() < 1e-6);
        assert_eq!(kl_divergence(&m, &m).unwrap(), 0.0);
        assert!(kl_divergence(&m, &p).is_err());
        let other = GridDensity::from_cells(vec![1.0 / 3.0; 3], 1.0).unwrap();
        assert!(kl_divergence(&p, &other).is_err());
    }

    #[test]
    fn js_examples() {
        let p = GridDensity::from_cells(vec![0.5, 0.5], 1.0).unwrap();
        let q = GridDensity::from_cells(vec![1.0, 0.0], 1.0).unwrap();
        assert!((js_divergence(&p, &q).unwrap() - 0.215762).abs() < 1e-6);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let r = GridDensity::from_cells(vec![0.0, 1.0], 1.0).unwrap();
        assert!((js_divergence(&q, &r).unwrap() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn gaussian_density_normalization() {
        let grid = Grid::uniform(&[(-10.0, 10.0, 2001)]).unwrap();
        let f: Vec<f64> = grid.axes[0].iter().map(|x| 0.5 * x * x).collect();
        let d = boltzmann_density(&grid, &f, 1.0).unwrap();
        let z: f64 = f.iter().zip(&d.weights).map(|(f, w)| w * (-f).exp()).sum();
        assert!((z - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-4);
        let mid = d.values[1000];
        assert!((mid - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-4);
        let flat = boltzmann_density(&grid, &vec![3.0; 2001], 1.0).unwrap();
        assert!(flat.values.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15));
        let shifted: Vec<f64> = f.iter().map(|v| v + 17.0).collect();
        let d2 = boltzmann_density(&grid, &shifted, 1.0).unwrap();
        assert!(d.values.iter().zip(&d2.values).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(boltzmann_density(&grid, &vec![f64::NAN; 2001], 1.0).is_err());
    }

    #[test]
    fn deeper_well_has_higher_density() {
        let grid = Grid::uniform(&[(-3.0, 3.0, 601)]).unwrap();
        let f: Vec<f64> = grid.axes[0].iter().map(|&x| (x * x - 1.0).powi(2) + 0.3 * x).collect();
        let d = boltzmann_density(&grid, &f, 1.0).unwrap();
        let left = d.values[..300].iter().copied().fold(0.0, f64::max);
        let right = d.values[301..].iter().copied().fold(0.0, f64::max);
        assert!(left > right);
    }

    #[test]
    fn histogram_density() {
        let grid = Grid::uniform(&[(0.0, 1.0, 3)]).unwrap();
        let samples = vec![vec![0.0], vec![0.1], vec![0.6], vec![2.0]];
        let d = GridDensity::from_samples(grid, &samples, HISTOGRAM_EPS).unwrap();
        assert!(d.values.iter().all(|&v| v > 0.0));
        let mass: f64 = d.values.iter().zip(&d.weights).map(|(v, w)| v * w).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn convexity_examples() {
        let mut g = Graph::new();
        let v = g.variable("V");
        let sq = g.square(v);
        let f = g.neg(sq);
        let vg = linspace(0.0, 1.0, 11);
        let curv: Vec<f64> =
            vg.iter().map(|&x| g.hessian(f, &Bindings::new().with(v, x), &[v]).unwrap().hessian.unwrap()[(0, 0)]).collect();
        let one = convexity_penalty_from_curvature(&[curv.clone()], &vg, 1.0).unwrap();
        assert!((one - 2.0).abs() < 1e-12);
        let two = convexity_penalty_from_curvature(&[curv.clone()], &vg, 2.0).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
        let convex: Vec<f64> = curv.iter().map(|c| -c).collect();
        assert_eq!(convexity_penalty_from_curvature(&[convex], &vg, 1.0).unwrap(), 0.0);
        assert!(convexity_penalty_from_curvature(&[vec![0.0; 2]], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn curvature_matches_graph() {
        let m = EnsembleModel::new(2, 1, true, &[8, 8], 1.0, 5.0, 9).unwrap();
        let mut g = Graph::new();
        let vx = g.variable("V");
        let tx = g.variable("T");
        let input = [vx, tx];
        let curv = configuration_curvatures(&m, &[0.7], 1.3).unwrap();
        for i in 0..2 {
            let e = m.e_nets[i].forward_expr(&mut g, &input).unwrap()[0];
            let sr = m.s_nets[i].forward_expr(&mut g, &input).unwrap()[0];
            let s = g.softplus(sr);
            let ts = g.mul(tx, s);
            let f = g.sub(e, ts);
            let h = g.hessian(f, &Bindings::new().with(vx, 0.7).with(tx, 1.3), &[vx]).unwrap();
            assert!((h.hessian.unwrap()[(0, 0)] - curv[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn js_and_convexity_gradients_fd() {
        let mut m = EnsembleModel::new(2, 1, true, &[6], 1.0, 5.0, 13).unwrap();
        let grid = Grid::uniform(&[(-2.0, 2.0, 21)]).unwrap();
        let f: Vec<f64> = grid.axes[0].iter().map(|&x| (x * x - 1.0).powi(2)).collect();
        let p = boltzmann_density(&grid, &f, 1.5).unwrap();
        let vg = linspace(-2.0, 2.0, 21);
        let loss = |m: &EnsembleModel| {
            let q = model_density(m, &grid, 1.5).unwrap();
            js_divergence(&p, &q).unwrap() + convexity_penalty(m, &vg, &[], 1.5, 0.3).unwrap()
        };
        let mut grad = vec![0.0; m.param_count()];
        let js = js_loss_grad(&p, &m, 1.5, 1.0, &mut grad, &mut JsWork::default()).unwrap();
        let pen = convexity_penalty_grad(&m, &vg, &[], 1.5, 0.3, &mut grad, &mut ConvexWork::default()).unwrap();
        assert!(pen > 0.0);
        assert!((js + pen - loss(&m)).abs() < 1e-12);
        let th = m.flat();
        let h = 1e-5;
        for i in 0..th.len() {
            let mut tp = th.clone();
            tp[i] += h;
            m.read_flat(&tp);
            let lp = loss(&m);
            tp[i] -= 2.0 * h;
            m.read_flat(&tp);
            let lm = loss(&m);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: {fd} {}", grad[i]);
        }
    }
}
