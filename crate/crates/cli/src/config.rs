//! Experiment configuration files.
//!
//! A config is one JSON object:
//!
//! ```json
//! {
//!   "task": "landscape1d",
//!   "model": { "hidden": [8, 8], "k_b": 1.0, "gamma": 5.0 },
//!   "train": { "K": 6, "epochs": 20000, "seed": 0 },
//!   "data": { "grid": [31, 6], "t_range": [1.0, 3.0] },
//!   "analysis": { "resolution": 41 }
//! }
//! ```
//!
//! Only `task` is required. `model` and `train` are merged key by key over
//! the task preset; `data` and `analysis` fall back to per-task defaults.
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use zenn::analysis::CriticalGuess;
use zenn::tasks::{preset, ModelConfig, Task};
use zenn::train::TrainConfig;
use zenn::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: Task,
    #[serde(default)]
    model: Map<String, Value>,
    #[serde(default)]
    train: Map<String, Value>,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    analysis: AnalysisConfig,
}

/// Where training data comes from. Unset fields take per-task defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Data file: `y1,y2,y3,T` for classify, `V,T,F` for fe3pt.
    pub path: Option<PathBuf>,
    /// Generator seed.
    pub seed: Option<u64>,
    /// Labels drawn per temperature (classify).
    pub samples_per_t: Option<usize>,
    /// Grid points per axis: `[nx, nT]` (landscape1d, fe3pt synthetic) or `[n]` (landscape2d).
    pub grid: Option<Vec<usize>>,
    /// Training temperature window (landscape1d, fe3pt synthetic).
    pub t_range: Option<(f64, f64)>,
    /// Single training temperature (landscape2d).
    pub temperature: Option<f64>,
    /// Temperature unit of the model, in K (fe3pt).
    pub t_scale: Option<f64>,
    /// Volumes on which the convexity penalty is evaluated (fe3pt).
    pub convexity_points: Option<usize>,
}

/// What `analyze` computes. Unset fields take per-task defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub x_range: Option<(f64, f64)>,
    pub t_range: Option<(f64, f64)>,
    /// Points per axis of the curvature contour grid.
    pub resolution: Option<usize>,
    /// Temperatures in the bifurcation diagram or on each isobar.
    pub temperatures: Option<usize>,
    /// Newton seeds per temperature for stationary points.
    pub seeds_per_t: Option<usize>,
    /// Isobars to trace, in GPa.
    pub pressures_gpa: Option<Vec<f64>>,
    /// Pressure for the critical point, in GPa.
    pub critical_pressure_gpa: Option<f64>,
    /// Explicit starting points; seeds are taken from the curvature contour otherwise.
    pub critical_guesses: Option<Vec<CriticalGuess>>,
    pub max_seeds: Option<usize>,
    /// Points per axis of the prediction-error grid.
    pub error_grid: Option<usize>,
}

/// A validated experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
}

fn merge(base: Value, over: Map<String, Value>) -> Value {
    let mut obj = match base {
        Value::Object(o) => o,
        _ => Map::new(),
    };
    obj.extend(over);
    Value::Object(obj)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let (model, train) = preset(raw.task);
        let model: ModelConfig = serde_json::from_value(merge(serde_json::to_value(model)?, raw.model))
            .map_err(|e| Error::Config(vec![format!("model: {e}")]))?;
        let train: TrainConfig = serde_json::from_value(merge(serde_json::to_value(train)?, raw.train))
            .map_err(|e| Error::Config(vec![format!("train: {e}")]))?;
        Ok(ExperimentConfig { task: raw.task, model, train, data: raw.data, analysis: raw.analysis })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        Self::from_json(&text)
    }

    /// Every violated constraint at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = self.model.validate();
        if let Err(Error::Config(v)) = self.train.validate() {
            bad.extend(v);
        }
        let d = &self.data;
        let a = &self.analysis;
        let grid_len = match self.task {
            Task::Landscape2d => 1,
            _ => 2,
        };
        if let Some(g) = &d.grid {
            if self.task == Task::Classify {
                bad.push("data.grid does not apply to classify".into());
            } else if g.len() != grid_len || g.iter().any(|&n| n < 3) {
                bad.push(format!("data.grid must list {grid_len} sizes of at least 3, got {g:?}"));
            }
        }
        if d.path.is_some() && !matches!(self.task, Task::Classify | Task::Fe3pt) {
            bad.push("data.path is only read for classify and fe3pt".into());
        }
        if d.samples_per_t == Some(0) {
            bad.push("data.samples_per_t must be positive".into());
        }
        for (name, r) in [("data.t_range", d.t_range), ("analysis.x_range", a.x_range), ("analysis.t_range", a.t_range)] {
            if let Some((lo, hi)) = r {
                if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                    bad.push(format!("{name} must be an increasing finite pair, got [{lo}, {hi}]"));
                }
            }
        }
        if let Some((lo, _)) = d.t_range {
            if lo <= 0.0 {
                bad.push("data.t_range must be positive".into());
            }
        }
        if matches!(d.temperature, Some(t) if !(t > 0.0)) {
            bad.push("data.temperature must be positive".into());
        }
        if matches!(d.t_scale, Some(t) if !(t > 0.0)) {
            bad.push("data.t_scale must be positive".into());
        }
        if matches!(d.convexity_points, Some(n) if n < 3) {
            bad.push("data.convexity_points must be at least 3".into());
        }
        if matches!(a.resolution, Some(n) if n < 16) {
            bad.push("analysis.resolution must be at least 16".into());
        }
        if matches!(a.temperatures, Some(n) if n < 2) {
            bad.push("analysis.temperatures must be at least 2".into());
        }
        if matches!(a.seeds_per_t, Some(0)) || matches!(a.max_seeds, Some(0)) {
            bad.push("analysis seed counts must be positive".into());
        }
        if matches!(a.error_grid, Some(n) if n < 2) {
            bad.push("analysis.error_grid must be at least 2".into());
        }
        if (a.pressures_gpa.is_some() || a.critical_pressure_gpa.is_some()) && self.task != Task::Fe3pt {
            bad.push("pressures only apply to fe3pt".into());
        }
        if let Some(gs) = &a.critical_guesses {
            let dim = if self.task == Task::Landscape2d { 2 } else { 1 };
            if gs.iter().any(|g| g.x.len() != dim) {
                bad.push(format!("analysis.critical_guesses need {dim} coordinates each"));
            }
        }
        if self.task == Task::Classify {
            if let zenn::train::KChoice::Fixed(k) = self.train.k {
                if k != 3 && d.path.is_none() {
                    bad.push(format!("classify needs K = 3 for the three-class data, got {k}"));
                }
            } else {
                bad.push("classify needs a fixed K".into());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_merge_over_preset() {
        let c = ExperimentConfig::from_json(r#"{"task":"fe3pt","train":{"epochs":5}}"#).unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.lambda, 1e-4);
        assert_eq!(c.model.k_b, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            r#"{"task":"classify","bogus":1}"#,
            r#"{"task":"classify","train":{"epoch":1}}"#,
            r#"{"task":"classify","model":{"width":3}}"#,
            r#"{"task":"classify","data":{"seeds":1}}"#,
            r#"{"task":"nope"}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn validation_lists_every_field() {
        let c = ExperimentConfig::from_json(
            r#"{"task":"landscape1d","model":{"gamma":-1},"train":{"epochs":0},"data":{"grid":[2]},"analysis":{"resolution":4}}"#,
        )
        .unwrap();
        match c.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 4, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }
}
