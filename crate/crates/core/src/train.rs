//! Full-batch Adam training and configuration-count selection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::NetworkParams;
use crate::zentropy::EnsembleModel;

/// Number of configurations: fixed, or chosen by [`select_k`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KChoice {
    Fixed(usize),
    Auto(AutoK),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoK {
    #[serde(rename = "auto")]
    Auto,
}

impl KChoice {
    pub const AUTO: KChoice = KChoice::Auto(AutoK::Auto);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Convexity penalty weight.
    pub lambda: f64,
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: KChoice,
    #[serde(rename = "K_max")]
    pub k_max: usize,
    pub convergence_rel_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 20_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 0.0,
            seed: 0,
            k: KChoice::Fixed(3),
            k_max: 12,
            convergence_rel_tol: 0.01,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, or `Ok` when none are.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs < 1 {
            bad.push("epochs must be at least 1".to_string());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                bad.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            bad.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.lambda >= 0.0) {
            bad.push(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if self.k == KChoice::Fixed(0) {
            bad.push("K must be at least 1".to_string());
        }
        if self.k_max < 1 {
            bad.push("K_max must be at least 1".to_string());
        }
        if !(self.convergence_rel_tol > 0.0) {
            bad.push(format!("convergence_rel_tol must be positive, got {}", self.convergence_rel_tol));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update; `state.step` is incremented first.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Dimension { expected: params.len(), got: grads.len() });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training {
            epoch: state.step as usize,
            detail: format!("non-finite gradient {} at parameter {i}", grads[i]),
        });
    }
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    let lr = config.learning_rate;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let step = lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + config.adam_eps);
        debug_assert!(step.abs() <= lr / (1.0 - b1) + 1e-12);
        params[i] -= step;
    }
    Ok(())
}

/// A model whose parameters can be flattened for the optimizer.
pub trait Trainable: Clone {
    fn param_count(&self) -> usize;
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, src: &[f64]);
    /// Configuration count reported in [`TrainReport`].
    fn configurations(&self) -> usize {
        1
    }
}

impl Trainable for EnsembleModel {
    fn param_count(&self) -> usize {
        EnsembleModel::param_count(self)
    }
    fn flat_params(&self) -> Vec<f64> {
        self.flat()
    }
    fn set_flat_params(&mut self, src: &[f64]) {
        self.read_flat(src)
    }
    fn configurations(&self) -> usize {
        self.k()
    }
}

impl Trainable for NetworkParams {
    fn param_count(&self) -> usize {
        NetworkParams::param_count(self)
    }
    fn flat_params(&self) -> Vec<f64> {
        self.flat()
    }
    fn set_flat_params(&mut self, src: &[f64]) {
        self.read_flat(src);
    }
}

/// Differentiable training loss.
pub trait Objective<M> {
    /// Loss at `model`; writes `∂loss/∂θ` into the zeroed `grad`.
    fn loss_grad(&mut self, model: &M, grad: &mut [f64]) -> Result<f64>;
}

impl<M, F> Objective<M> for F
where
    F: FnMut(&M, &mut [f64]) -> Result<f64>,
{
    fn loss_grad(&mut self, model: &M, grad: &mut [f64]) -> Result<f64> {
        self(model, grad)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport<M> {
    /// Loss at the start of each epoch, before that epoch's update.
    pub loss_history: Vec<f64>,
    pub model: M,
    pub selected_k: usize,
    pub wall_time: f64,
}

impl<M> TrainReport<M> {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("at least one epoch")
    }

    /// `epoch,loss` rows with a header.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, l) in self.loss_history.iter().enumerate() {
            out.push_str(&format!("{i},{l:.16e}\n"));
        }
        out
    }
}

/// Full-batch Adam for `config.epochs` epochs.
pub fn train<M: Trainable, O: Objective<M>>(mut model: M, objective: &mut O, config: &TrainConfig) -> Result<TrainReport<M>> {
    config.validate()?;
    let start = Instant::now();
    let n = model.param_count();
    let mut theta = model.flat_params();
    let mut grad = vec![0.0; n];
    let mut adam = AdamState::new(n);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = objective.loss_grad(&model, &mut grad)?;
        if !loss.is_finite() {
            let worst = grad
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map_or(0, |(i, _)| i);
            return Err(Error::Training {
                epoch,
                detail: format!("loss = {loss}; largest gradient at parameter {worst}"),
            });
        }
        history.push(loss);
        adam_step(&mut theta, &grad, &mut adam, config).map_err(|e| match e {
            Error::Training { detail, .. } => Error::Training { epoch, detail },
            other => other,
        })?;
        model.set_flat_params(&theta);
    }
    Ok(TrainReport {
        loss_history: history,
        selected_k: model.configurations(),
        model,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Trains `K = 1, 2, …` and returns the smallest `K` for which going to
/// `K + 1` improves the final loss by less than `convergence_rel_tol`
/// (relative), together with every trial's report.
pub fn select_k<M, O, B>(mut build: B, config: &TrainConfig) -> Result<(usize, Vec<TrainReport<M>>)>
where
    M: Trainable,
    O: Objective<M>,
    B: FnMut(usize) -> Result<(M, O)>,
{
    config.validate()?;
    let mut reports: Vec<TrainReport<M>> = Vec::new();
    for k in 1..=config.k_max {
        let (model, mut obj) = build(k)?;
        let report = train(model, &mut obj, config)?;
        if let Some(prev) = reports.last() {
            let (a, b) = (prev.final_loss(), report.final_loss());
            let gain = (a - b) / a.abs().max(f64::MIN_POSITIVE);
            reports.push(report);
            if gain < config.convergence_rel_tol {
                return Ok((k - 1, reports));
            }
        } else {
            reports.push(report);
        }
    }
    Ok((config.k_max, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug)]
    struct Vector(Vec<f64>);

    impl Trainable for Vector {
        fn param_count(&self) -> usize {
            self.0.len()
        }
        fn flat_params(&self) -> Vec<f64> {
            self.0.clone()
        }
        fn set_flat_params(&mut self, src: &[f64]) {
            self.0.copy_from_slice(src);
        }
    }

    fn quadratic(target: Vec<f64>) -> impl FnMut(&Vector, &mut [f64]) -> Result<f64> {
        move |m: &Vector, g: &mut [f64]| {
            let mut l = 0.0;
            for i in 0..target.len() {
                let d = m.0[i] - target[i];
                l += d * d;
                g[i] = 2.0 * d;
            }
            Ok(l)
        }
    }

    #[test]
    fn adam_zero_gradient() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState { m: vec![0.5, -0.5], v: vec![0.2, 0.2], step: 3 };
        let before = st.clone();
        adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert!(st.m.iter().zip(&before.m).all(|(a, b)| (a - 0.9 * b).abs() < 1e-15));
        assert!(st.v.iter().zip(&before.v).all(|(a, b)| (a - 0.999 * b).abs() < 1e-15));
        let mut q = vec![1.0, -2.0];
        let mut fresh = AdamState::new(2);
        adam_step(&mut q, &[0.0, 0.0], &mut fresh, &cfg).unwrap();
        assert_eq!(q, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step() {
        let cfg = TrainConfig::default();
        for g in [3.0, -0.25, 1e-3] {
            let mut p = vec![0.0];
            let mut st = AdamState::new(1);
            adam_step(&mut p, &[g], &mut st, &cfg).unwrap();
            let want = -cfg.learning_rate * g / (g.abs() + cfg.adam_eps);
            assert!((p[0] - want).abs() < 1e-15);
        }
        let mut st = AdamState::new(1);
        let err = adam_step(&mut [0.0], &[f64::NAN], &mut st, &cfg).unwrap_err();
        assert!(matches!(err, Error::Training { .. }));
    }

    #[test]
    fn quadratic_converges() {
        let target = vec![0.3, -1.2, 0.8, 0.05];
        let cfg = TrainConfig { epochs: 2000, ..TrainConfig::default() };
        let report = train(Vector(vec![0.0; 4]), &mut quadratic(target.clone()), &cfg).unwrap();
        let mut g = vec![0.0; 4];
        let final_loss = quadratic(target)(&report.model, &mut g).unwrap();
        assert!(final_loss < 1e-6, "{final_loss}");
        assert_eq!(report.loss_history.len(), 2000);
        assert!(report.final_loss() <= report.loss_history[0]);
    }

    #[test]
    fn epochs_zero_rejected() {
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let err = train(Vector(vec![0.0]), &mut quadratic(vec![1.0]), &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn config_lists_all_violations() {
        let cfg = TrainConfig { epochs: 0, learning_rate: -1.0, adam_beta1: 1.0, ..TrainConfig::default() };
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { epochs: 300, ..TrainConfig::default() };
        let a = train(Vector(vec![0.1, 0.2]), &mut quadratic(vec![1.0, -1.0]), &cfg).unwrap();
        let b = train(Vector(vec![0.1, 0.2]), &mut quadratic(vec![1.0, -1.0]), &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.model.0, b.model.0);
    }

    #[test]
    fn nan_loss_aborts_with_epoch() {
        let cfg = TrainConfig { epochs: 10, ..TrainConfig::default() };
        let mut calls = 0;
        let mut obj = |_: &Vector, _: &mut [f64]| {
            calls += 1;
            Ok(if calls > 4 { f64::NAN } else { 1.0 })
        };
        match train(Vector(vec![0.0]), &mut obj, &cfg) {
            Err(Error::Training { epoch, .. }) => assert_eq!(epoch, 4),
            other => panic!("{:?}", other.map(|r| r.loss_history)),
        }
    }

    #[test]
    fn k_choice_serde() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"K": "auto", "K_max": 5}"#).unwrap();
        assert_eq!(cfg.k, KChoice::AUTO);
        let cfg: TrainConfig = serde_json::from_str(r#"{"K": 6}"#).unwrap();
        assert_eq!(cfg.k, KChoice::Fixed(6));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 6}"#).is_err());
    }

    #[test]
    fn select_k_stops_when_saturated() {
        // loss floor reached from K = 2 on
        let cfg = TrainConfig { epochs: 50, k_max: 6, ..TrainConfig::default() };
        let (k, reports) = select_k(
            |k| {
                let floor = if k == 1 { 1.0 } else { 0.5 };
                Ok((Vector(vec![0.0]), move |m: &Vector, g: &mut [f64]| {
                    g[0] = 2.0 * m.0[0];
                    Ok(floor + m.0[0] * m.0[0])
                }))
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(k, 2);
        assert_eq!(reports.len(), 3);
    }
}
