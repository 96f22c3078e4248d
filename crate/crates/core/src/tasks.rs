//! End-to-end experiments: training data, objectives, presets and the
//! metrics the benchmarks are judged by.

use serde::{Deserialize, Serialize};

use crate::analysis::ScalarField;
use crate::autodiff::{Expr, Graph, Real};
use crate::benchdata::{benchmark_f_1d, benchmark_v_2d, three_class_probs, SampleTable, K_B_EV};
use crate::error::{Error, Result};
use crate::losses::{
    boltzmann_adjoint, boltzmann_density, convexity_penalty_grad, cross_zentropy_counts_grad, js_loss_grad,
    js_with_adjoint, linspace, ConvexWork, Grid, GridDensity, JsWork, LabeledSet,
};
use crate::netcore::{baseline_dnn, LayerSpec, NetworkParams, Scratch};
use crate::train::{select_k, train, KChoice, Objective, TrainConfig, TrainReport};
use crate::zentropy::{evaluate_ensemble, EnsembleModel, InputScaling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Landscape1d,
    Landscape2d,
    Fe3pt,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(vec![format!("unknown task `{s}` (classify, landscape1d, landscape2d, fe3pt)")]))
    }
}

/// Architecture and physical constants of an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub k_b: f64,
    pub gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![8], k_b: 1.0, gamma: 5.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(1..=2).contains(&self.hidden.len()) || self.hidden.contains(&0) {
            bad.push(format!("model.hidden must list one or two positive widths, got {:?}", self.hidden));
        }
        if !(self.k_b > 0.0 && self.k_b.is_finite()) {
            bad.push(format!("model.k_B must be positive, got {}", self.k_b));
        }
        if !(self.gamma > 0.0) {
            bad.push(format!("model.gamma must be positive, got {}", self.gamma));
        }
        bad
    }
}

/// Reference settings per task.
pub fn preset(task: Task) -> (ModelConfig, TrainConfig) {
    let base = TrainConfig::default();
    match task {
        Task::Classify => (ModelConfig::default(), TrainConfig { k: KChoice::Fixed(3), ..base }),
        Task::Landscape1d => (ModelConfig { hidden: vec![8, 8], ..ModelConfig::default() }, TrainConfig { k: KChoice::Fixed(6), ..base }),
        Task::Landscape2d => (
            ModelConfig { hidden: vec![8, 8], ..ModelConfig::default() },
            TrainConfig { k: KChoice::AUTO, k_max: 8, ..base },
        ),
        Task::Fe3pt => (
            ModelConfig { hidden: vec![8], k_b: 0.1, gamma: 5.0 },
            TrainConfig { k: KChoice::Fixed(12), lambda: 1e-4, epochs: 30_000, ..base },
        ),
    }
}

/// Temperature range of the three-class data, `[1, 8]`.
pub const CLASSIFY_T_RANGE: (f64, f64) = (1.0, 8.0);

// ---------------------------------------------------------------------------
// classification

/// Cross-zentropy over samples pre-grouped by temperature.
pub struct ClassifyObjective {
    counts: Vec<(f64, Vec<usize>)>,
}

impl ClassifyObjective {
    pub fn new(data: &LabeledSet) -> Self {
        ClassifyObjective { counts: data.counts_by_temperature() }
    }
}

impl Objective<EnsembleModel> for ClassifyObjective {
    fn loss_grad(&mut self, model: &EnsembleModel, grad: &mut [f64]) -> Result<f64> {
        cross_zentropy_counts_grad(&self.counts, model, grad)
    }
}

/// Classifier ensemble: temperature is the only input, one configuration per class.
pub fn classifier_model(classes: usize, cfg: &ModelConfig, seed: u64) -> Result<EnsembleModel> {
    EnsembleModel::new(classes, 0, true, &cfg.hidden, cfg.k_b, cfg.gamma, seed)?
        .with_scaling(InputScaling::from_ranges(&[CLASSIFY_T_RANGE]))
}

pub fn fit_classifier(data: &LabeledSet, cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainReport<EnsembleModel>> {
    let mut obj = ClassifyObjective::new(data);
    match train_cfg.k {
        KChoice::Fixed(k) if k != data.classes => {
            Err(Error::Config(vec![format!("classification needs K = number of classes ({}), got {k}", data.classes)]))
        }
        _ => train(classifier_model(data.classes, cfg, train_cfg.seed)?, &mut obj, train_cfg),
    }
}

/// Class probabilities of a classifier ensemble at temperature `t`.
pub fn ensemble_probs(model: &EnsembleModel, t: f64) -> Result<Vec<f64>> {
    Ok(evaluate_ensemble(model, &[], t)?.p)
}

/// Baseline classifier `T ↦ softmax(net(T))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnnClassifier {
    pub net: NetworkParams,
    pub scaling: InputScaling,
}

impl DnnClassifier {
    /// `1 → width × depth → classes`.
    pub fn new(classes: usize, width: usize, depth: usize, seed: u64) -> Result<Self> {
        Ok(DnnClassifier {
            net: baseline_dnn(&LayerSpec::dnn(1, width, depth, classes), seed)?,
            scaling: InputScaling::from_ranges(&[CLASSIFY_T_RANGE]),
        })
    }

    pub fn probs(&self, t: f64) -> Result<Vec<f64>> {
        let mut x = Vec::new();
        self.scaling.apply(&[t], &mut x);
        Ok(softmax(&self.net.forward(&x)?))
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl crate::train::Trainable for DnnClassifier {
    fn param_count(&self) -> usize {
        self.net.param_count()
    }
    fn flat_params(&self) -> Vec<f64> {
        self.net.flat()
    }
    fn set_flat_params(&mut self, src: &[f64]) {
        self.net.read_flat(src);
    }
}

/// Softmax cross-entropy of the baseline classifier.
pub struct DnnClassifyObjective {
    counts: Vec<(f64, Vec<usize>)>,
    trace: Vec<f64>,
    scratch: Scratch<f64>,
}

impl DnnClassifyObjective {
    pub fn new(data: &LabeledSet) -> Self {
        DnnClassifyObjective { counts: data.counts_by_temperature(), trace: Vec::new(), scratch: Scratch::new() }
    }
}

impl Objective<DnnClassifier> for DnnClassifyObjective {
    fn loss_grad(&mut self, model: &DnnClassifier, grad: &mut [f64]) -> Result<f64> {
        let total: usize = self.counts.iter().map(|(_, c)| c.iter().sum::<usize>()).sum();
        let inv_m = 1.0 / total as f64;
        let mut loss = 0.0;
        let mut x = Vec::new();
        let c_out = model.net.output_dim();
        for (t, counts) in &self.counts {
            model.scaling.apply(&[*t], &mut x);
            model.net.run(&x, &mut self.trace);
            let z = &self.trace[self.trace.len() - c_out..];
            let p = softmax(z);
            let n: f64 = counts.iter().sum::<usize>() as f64;
            let mut adj = vec![0.0; c_out];
            for i in 0..c_out {
                loss -= counts[i] as f64 * p[i].max(1e-300).ln();
                adj[i] = (n * p[i] - counts[i] as f64) * inv_m;
            }
            model.net.backprop(&self.trace, &adj, grad, &mut self.scratch);
        }
        Ok(loss * inv_m)
    }
}

/// Baseline with as many hidden neurons as a classifier ensemble of
/// `classes` configurations: `classes · 2 · width` split into layers of `width`.
pub fn fit_dnn_classifier(data: &LabeledSet, cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainReport<DnnClassifier>> {
    let width = cfg.hidden[0];
    let depth = 2 * data.classes * cfg.hidden.iter().sum::<usize>() / width;
    let model = DnnClassifier::new(data.classes, width, depth, train_cfg.seed)?;
    train(model, &mut DnnClassifyObjective::new(data), train_cfg)
}

/// Largest `|p̂_k(T) − p_k(T)|` against the analytic three-class law over `temps`.
pub fn max_probability_error(probs: impl Fn(f64) -> Result<Vec<f64>>, temps: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &t in temps {
        let p = probs(t)?;
        let q = three_class_probs(t);
        for k in 0..3 {
            worst = worst.max((p[k] - q[k]).abs());
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// density fitting

/// One temperature slice of density data.
#[derive(Clone, Debug, PartialEq)]
pub struct DensitySlice {
    pub t: f64,
    pub density: GridDensity,
}

/// Convexity constraint along the first feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Convexity {
    pub v_grid: Vec<f64>,
    pub rest: Vec<f64>,
    pub lambda: f64,
}

/// Mean Jensen–Shannon divergence over the slices, plus the mean convexity
/// penalty over the same temperatures when enabled.
pub struct DensityObjective {
    pub slices: Vec<DensitySlice>,
    pub convexity: Option<Convexity>,
    js_work: JsWork,
    cv_work: ConvexWork,
    cv_grad: Vec<f64>,
}

impl DensityObjective {
    pub fn new(slices: Vec<DensitySlice>, convexity: Option<Convexity>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Contract("density fitting needs at least one slice".into()));
        }
        Ok(DensityObjective { slices, convexity, js_work: JsWork::default(), cv_work: ConvexWork::default(), cv_grad: Vec::new() })
    }
}

impl Objective<EnsembleModel> for DensityObjective {
    fn loss_grad(&mut self, model: &EnsembleModel, grad: &mut [f64]) -> Result<f64> {
        let w = 1.0 / self.slices.len() as f64;
        let mut loss = 0.0;
        for s in &self.slices {
            loss += w * js_loss_grad(&s.density, model, s.t, w, grad, &mut self.js_work)?;
            if let Some(c) = &self.convexity {
                if c.lambda > 0.0 {
                    self.cv_grad.clear();
                    self.cv_grad.resize(grad.len(), 0.0);
                    let pen = convexity_penalty_grad(model, &c.v_grid, &c.rest, s.t, c.lambda, &mut self.cv_grad, &mut self.cv_work)?;
                    loss += w * pen;
                    grad.iter_mut().zip(&self.cv_grad).for_each(|(a, b)| *a += w * b);
                }
            }
        }
        Ok(loss)
    }
}

/// Boltzmann densities `exp(−F/(k_B T))` of a known field on `grid` at each temperature.
pub fn field_slices(grid: &Grid, temps: &[f64], k_b: f64, f: impl Fn(&[f64], f64) -> f64) -> Result<Vec<DensitySlice>> {
    let mut x = Vec::new();
    temps
        .iter()
        .map(|&t| {
            let vals: Vec<f64> = (0..grid.len())
                .map(|i| {
                    grid.point(i, &mut x);
                    f(&x, t)
                })
                .collect();
            Ok(DensitySlice { t, density: boltzmann_density(grid, &vals, k_b * t)? })
        })
        .collect()
}

/// Density data of the one-dimensional benchmark on `x ∈ [−2, 2]`.
pub fn landscape1d_slices(nx: usize, temps: &[f64], k_b: f64) -> Result<Vec<DensitySlice>> {
    let grid = Grid::uniform(&[(-2.0, 2.0, nx)])?;
    field_slices(&grid, temps, k_b, |x, t| benchmark_f_1d(x[0], t, k_b))
}

/// Density data of the three-well landscape on `[−2, 2] × [−1.5, 2.5]`.
pub fn landscape2d_slices(n: usize, t: f64, k_b: f64) -> Result<Vec<DensitySlice>> {
    let grid = Grid::uniform(&[LANDSCAPE2D_X1, LANDSCAPE2D_X2].map(|(lo, hi)| (lo, hi, n)))?;
    field_slices(&grid, &[t], k_b, |x, _| benchmark_v_2d(x[0], x[1]))
}

pub const LANDSCAPE2D_X1: (f64, f64) = (-2.0, 2.0);
pub const LANDSCAPE2D_X2: (f64, f64) = (-1.5, 2.5);

/// Unit conversion between a physical `F(V, T)` and model units:
/// `T_model = T/t_scale`, `F_model = F/f_scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub t_scale: f64,
    pub f_scale: f64,
}

impl Units {
    /// Energy scale making `k_B(model)·T_model·f_scale = k_B(eV/K)·T`, so
    /// model densities equal physical Boltzmann densities.
    pub fn matched(t_scale: f64, k_b_model: f64) -> Self {
        Units { t_scale, f_scale: K_B_EV * t_scale / k_b_model }
    }
}

/// Density slices (in model temperature units) from a `V,T,F` table in eV and K.
pub fn fvt_slices(table: &SampleTable, units: &Units) -> Result<Vec<DensitySlice>> {
    let mut out = Vec::new();
    for (t, grid, f) in table.temperature_slices()? {
        if !(t > 0.0) {
            return Err(Error::Contract(format!("temperature {t} in F(V,T) data is not positive")));
        }
        if grid.len() < 3 {
            return Err(Error::Contract(format!("slice T = {t} has fewer than 3 volumes")));
        }
        out.push(DensitySlice { t: t / units.t_scale, density: boltzmann_density(&grid, &f, K_B_EV * t)? });
    }
    Ok(out)
}

/// Ensemble for density data: features from the slices' grid, temperature
/// as an extra input when the data has more than one temperature. Inputs
/// are scaled from the data ranges onto `[−1, 1]`.
pub fn density_model(slices: &[DensitySlice], k: usize, cfg: &ModelConfig, seed: u64) -> Result<EnsembleModel> {
    let grid = &slices[0].density.grid;
    let mut ranges: Vec<(f64, f64)> = grid.axes.iter().map(|a| (a[0], a[a.len() - 1])).collect();
    let t_lo = slices.iter().map(|s| s.t).fold(f64::INFINITY, f64::min);
    let t_hi = slices.iter().map(|s| s.t).fold(f64::NEG_INFINITY, f64::max);
    let with_t = t_hi > t_lo;
    if with_t {
        ranges.push((t_lo, t_hi));
    }
    EnsembleModel::new(k, grid.dim(), with_t, &cfg.hidden, cfg.k_b, cfg.gamma, seed)?.with_scaling(InputScaling::from_ranges(&ranges))
}

/// Trains an ensemble on density slices; `K = "auto"` runs [`select_k`] up to `K_max`.
pub fn fit_density(
    slices: &[DensitySlice],
    convexity: Option<Convexity>,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(TrainReport<EnsembleModel>, Vec<f64>)> {
    match train_cfg.k {
        KChoice::Fixed(k) => {
            let mut obj = DensityObjective::new(slices.to_vec(), convexity)?;
            let r = train(density_model(slices, k, cfg, train_cfg.seed)?, &mut obj, train_cfg)?;
            let loss = r.final_loss();
            Ok((r, vec![loss]))
        }
        KChoice::Auto(_) => {
            let (k, reports) = select_k(
                |k| Ok((density_model(slices, k, cfg, train_cfg.seed)?, DensityObjective::new(slices.to_vec(), convexity.clone())?)),
                train_cfg,
            )?;
            let losses = reports.iter().map(|r| r.final_loss()).collect();
            let chosen = reports.into_iter().nth(k - 1).expect("selected K was trained");
            Ok((chosen, losses))
        }
    }
}

/// Physical view of an ensemble trained in model units: `F = f_scale·F_model(x, T/t_scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledField<'a> {
    pub model: &'a EnsembleModel,
    pub units: Units,
}

impl ScalarField for ScaledField<'_> {
    fn dim(&self) -> usize {
        self.model.features
    }
    fn build(&self, g: &mut Graph, x: &[Expr], t: Expr) -> Result<Expr> {
        let tau = g.scale(t, 1.0 / self.units.t_scale);
        let f = self.model.build(g, x, tau)?;
        Ok(g.scale(f, self.units.f_scale))
    }
}

/// Total Helmholtz energy of an ensemble at `(x, t)`.
pub fn ensemble_f(model: &EnsembleModel, x: &[f64], t: f64) -> Result<f64> {
    Ok(evaluate_ensemble(model, x, t)?.f_total)
}

/// Root-mean-square difference after removing the mean offset, which
/// density data cannot determine.
pub fn offset_rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let shift = pred.iter().zip(truth).map(|(p, q)| p - q).sum::<f64>() / n;
    (pred.iter().zip(truth).map(|(p, q)| (p - q - shift).powi(2)).sum::<f64>() / n).sqrt()
}

/// Baseline density model `F = net(x, T)` (a single network, no ensemble).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnnField {
    pub net: NetworkParams,
    pub scaling: InputScaling,
    pub k_b: f64,
    pub temperature_input: bool,
}

impl DnnField {
    /// `inputs → width × depth → 1` with inputs scaled from the slice ranges.
    pub fn for_slices(slices: &[DensitySlice], width: usize, depth: usize, k_b: f64, seed: u64) -> Result<Self> {
        let probe = density_model(slices, 1, &ModelConfig { hidden: vec![1], k_b, gamma: 1.0 }, seed)?;
        Ok(DnnField {
            net: baseline_dnn(&LayerSpec::dnn(probe.input_dim(), width, depth, 1), seed)?,
            scaling: probe.scaling,
            k_b,
            temperature_input: probe.temperature_input,
        })
    }

    pub fn value<R: Real>(&self, x: &[R], t: R) -> Result<R> {
        let mut raw = x.to_vec();
        if self.temperature_input {
            raw.push(t);
        }
        let mut input = Vec::new();
        self.scaling.apply(&raw, &mut input);
        self.net.forward_scalar(&input)
    }
}

impl crate::train::Trainable for DnnField {
    fn param_count(&self) -> usize {
        self.net.param_count()
    }
    fn flat_params(&self) -> Vec<f64> {
        self.net.flat()
    }
    fn set_flat_params(&mut self, src: &[f64]) {
        self.net.read_flat(src);
    }
}

impl ScalarField for DnnField {
    fn dim(&self) -> usize {
        self.scaling.dim() - usize::from(self.temperature_input)
    }
    fn build(&self, g: &mut Graph, x: &[Expr], t: Expr) -> Result<Expr> {
        let mut raw = x.to_vec();
        if self.temperature_input {
            raw.push(t);
        }
        let input: Vec<Expr> = raw
            .iter()
            .zip(self.scaling.shift.iter().zip(&self.scaling.scale))
            .map(|(&r, (&s, &c))| {
                let d = g.add_const(r, -s);
                g.scale(d, 1.0 / c)
            })
            .collect();
        Ok(self.net.forward_expr(g, &input)?[0])
    }
}

/// Mean JS divergence of the baseline density model over the slices.
pub struct DnnDensityObjective {
    slices: Vec<DensitySlice>,
    traces: Vec<Vec<f64>>,
    scratch: Scratch<f64>,
}

impl DnnDensityObjective {
    pub fn new(slices: Vec<DensitySlice>) -> Self {
        DnnDensityObjective { slices, traces: Vec::new(), scratch: Scratch::new() }
    }
}

impl Objective<DnnField> for DnnDensityObjective {
    fn loss_grad(&mut self, model: &DnnField, grad: &mut [f64]) -> Result<f64> {
        let w = 1.0 / self.slices.len() as f64;
        let mut loss = 0.0;
        let mut x = Vec::new();
        let mut raw = Vec::new();
        let mut input = Vec::new();
        for s in &self.slices {
            let grid = &s.density.grid;
            self.traces.resize_with(grid.len(), Vec::new);
            let mut f = Vec::with_capacity(grid.len());
            for i in 0..grid.len() {
                grid.point(i, &mut x);
                raw.clear();
                raw.extend_from_slice(&x);
                if model.temperature_input {
                    raw.push(s.t);
                }
                model.scaling.apply(&raw, &mut input);
                model.net.run(&input, &mut self.traces[i]);
                f.push(*self.traces[i].last().expect("non-empty trace"));
            }
            let kt = model.k_b * s.t;
            let q = boltzmann_density(grid, &f, kt)?;
            let (js, d_q) = js_with_adjoint(&s.density, &q)?;
            let d_f = boltzmann_adjoint(&q, &d_q, kt);
            for (tr, &d) in self.traces.iter().zip(&d_f) {
                model.net.backprop(tr, &[w * d], grad, &mut self.scratch);
            }
            loss += w * js;
        }
        Ok(loss)
    }
}

/// Baseline density model with as many hidden neurons as a `K`-configuration
/// ensemble, in layers of the first hidden width.
pub fn fit_dnn_density(slices: &[DensitySlice], k: usize, cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainReport<DnnField>> {
    let width = cfg.hidden[0];
    let depth = (2 * k * cfg.hidden.iter().sum::<usize>() / width).max(1);
    let model = DnnField::for_slices(slices, width, depth, cfg.k_b, train_cfg.seed)?;
    train(model, &mut DnnDensityObjective::new(slices.to_vec()), train_cfg)
}

/// Held-out evaluation grid for the two-dimensional landscape.
pub fn landscape2d_eval_grid(n: usize) -> Vec<(f64, f64)> {
    let xs = linspace(LANDSCAPE2D_X1.0, LANDSCAPE2D_X1.1, n);
    let ys = linspace(LANDSCAPE2D_X2.0, LANDSCAPE2D_X2.1, n);
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cross_zentropy;
    use crate::benchdata::gen_three_class;

    #[test]
    fn presets_follow_reference_settings() {
        let (m, t) = preset(Task::Classify);
        assert_eq!((m.k_b, m.gamma, t.k), (1.0, 5.0, KChoice::Fixed(3)));
        let (m, t) = preset(Task::Fe3pt);
        assert_eq!((m.k_b, m.gamma, t.lambda, t.epochs, t.k), (0.1, 5.0, 1e-4, 30_000, KChoice::Fixed(12)));
        assert_eq!(preset(Task::Landscape1d).1.k, KChoice::Fixed(6));
        assert_eq!("fe3pt".parse::<Task>().unwrap(), Task::Fe3pt);
        assert!("nope".parse::<Task>().is_err());
    }

    #[test]
    fn classify_objective_matches_direct_loss() {
        let data = gen_three_class(3, 50).unwrap();
        let model = classifier_model(3, &ModelConfig::default(), 1).unwrap();
        let mut g = vec![0.0; model.param_count()];
        let l = ClassifyObjective::new(&data).loss_grad(&model, &mut g).unwrap();
        assert!((l - cross_zentropy(&data, &model).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dnn_classifier_gradient() {
        let data = gen_three_class(4, 20).unwrap();
        let mut model = DnnClassifier::new(3, 4, 2, 9).unwrap();
        let mut obj = DnnClassifyObjective::new(&data);
        let n = model.net.param_count();
        let mut g = vec![0.0; n];
        obj.loss_grad(&model, &mut g).unwrap();
        let theta = model.net.flat();
        for i in (0..n).step_by(5) {
            let mut th = theta.clone();
            let h = 1e-6;
            th[i] += h;
            model.net.read_flat(&th);
            let lp = obj.loss_grad(&model, &mut vec![0.0; n]).unwrap();
            th[i] -= 2.0 * h;
            model.net.read_flat(&th);
            let lm = obj.loss_grad(&model, &mut vec![0.0; n]).unwrap();
            assert!(((lp - lm) / (2.0 * h) - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()));
        }
    }

    #[test]
    fn density_objective_gradient() {
        let slices = landscape1d_slices(9, &[1.0, 2.5], 1.0).unwrap();
        let cfg = ModelConfig { hidden: vec![3], ..ModelConfig::default() };
        let mut model = density_model(&slices, 2, &cfg, 5).unwrap();
        let conv = Convexity { v_grid: linspace(-2.0, 2.0, 5), rest: vec![], lambda: 0.3 };
        let mut obj = DensityObjective::new(slices, Some(conv)).unwrap();
        let n = model.param_count();
        let mut g = vec![0.0; n];
        obj.loss_grad(&model, &mut g).unwrap();
        let theta = model.flat();
        for i in 0..n {
            let mut th = theta.clone();
            let h = 1e-6;
            th[i] += h;
            model.read_flat(&th);
            let lp = obj.loss_grad(&model, &mut vec![0.0; n]).unwrap();
            th[i] -= 2.0 * h;
            model.read_flat(&th);
            let lm = obj.loss_grad(&model, &mut vec![0.0; n]).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn dnn_density_gradient() {
        let slices = landscape1d_slices(9, &[1.0, 2.5], 1.0).unwrap();
        let mut model = DnnField::for_slices(&slices, 4, 2, 1.0, 3).unwrap();
        let mut obj = DnnDensityObjective::new(slices);
        let n = model.net.param_count();
        let mut g = vec![0.0; n];
        obj.loss_grad(&model, &mut g).unwrap();
        let theta = model.net.flat();
        for i in 0..n {
            let mut th = theta.clone();
            let h = 1e-6;
            th[i] += h;
            model.net.read_flat(&th);
            let lp = obj.loss_grad(&model, &mut vec![0.0; n]).unwrap();
            th[i] -= 2.0 * h;
            model.net.read_flat(&th);
            let lm = obj.loss_grad(&model, &mut vec![0.0; n]).unwrap();
            assert!(((lp - lm) / (2.0 * h) - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()));
        }
        let c = crate::analysis::CompiledField::new(&model).unwrap();
        assert!((c.value(&[0.3], 1.7).unwrap() - model.value(&[0.3], 1.7).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn scaled_field_converts_units() {
        let slices = landscape1d_slices(9, &[1.0, 2.0], 0.1).unwrap();
        let model = density_model(&slices, 2, &ModelConfig { k_b: 0.1, ..ModelConfig::default() }, 1).unwrap();
        let u = Units::matched(100.0, 0.1);
        let sf = ScaledField { model: &model, units: u };
        let c = crate::analysis::CompiledField::new(&sf).unwrap();
        let want = u.f_scale * ensemble_f(&model, &[0.2], 1.5).unwrap();
        assert!((c.value(&[0.2], 150.0).unwrap() - want).abs() < 1e-14);
        assert!((u.f_scale * 0.1 - K_B_EV * 100.0).abs() < 1e-18);
    }

    #[test]
    fn offset_rmse_ignores_constant() {
        assert!(offset_rmse(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]) < 1e-15);
        assert!((offset_rmse(&[1.0, -1.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
