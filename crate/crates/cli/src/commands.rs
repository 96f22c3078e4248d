use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use zenn::analysis::{
    bifurcation_diagram, contour_csv, critical_seeds, curvature_zero_contour, isobar_csv, isobaric_curve, solve_critical_point,
    stationary_csv, stationary_points_within, CompiledField, CriticalGuess, CriticalPoint, ScalarField, WithPressure,
};
use zenn::autodiff::{Expr, Graph};
use zenn::benchdata::{
    benchmark_f_1d, benchmark_v_2d, eos_fit, gen_three_class, load_classification, load_fvt, load_sidecar, save_fvt,
    three_class_csv, three_class_probs, FvtUnits, SampleTable, SyntheticFvt, EV_PER_A3_TO_GPA,
};
use zenn::losses::{linspace, LabeledSet};
use zenn::tasks::{
    ensemble_probs, fit_classifier, fit_density, fit_dnn_classifier, fit_dnn_density, fvt_slices, landscape1d_slices,
    landscape2d_slices, Convexity, DensitySlice, DnnClassifier, DnnField, Task, Units, CLASSIFY_T_RANGE, LANDSCAPE2D_X1,
    LANDSCAPE2D_X2,
};
use zenn::train::{KChoice, TrainReport};
use zenn::zentropy::EnsembleModel;
use zenn::{Error, Result};

use crate::config::ExperimentConfig;

const LANDSCAPE1D_X: (f64, f64) = (-2.0, 2.0);
const LANDSCAPE1D_T: (f64, f64) = (1.0, 3.0);
const FE3PT_T: (f64, f64) = (50.0, 400.0);
const FE3PT_CRITICAL_GPA: f64 = 6.53;

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn parse_grid(text: &str, dims: usize) -> Result<Vec<usize>> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(vec![format!("--grid must look like 201x61, got `{text}`")]))?;
    if parts.len() != dims || parts.iter().any(|&n| n < 2) {
        return Err(Error::Config(vec![format!("--grid needs {dims} sizes of at least 2, got `{text}`")]));
    }
    Ok(parts)
}

// ---------------------------------------------------------------------------
// gen

pub fn gen(task: Task, seed: u64, out: Option<&Path>, grid: Option<&str>, samples_per_t: usize) -> Result<()> {
    let out = out.map_or_else(|| PathBuf::from(format!("{}.csv", task_name(task))), Path::to_path_buf);
    let side = out.with_extension("json");
    let rows = match task {
        Task::Classify => {
            if grid.is_some() {
                return Err(Error::Config(vec!["--grid does not apply to classify".into()]));
            }
            if samples_per_t == 0 {
                return Err(Error::Config(vec!["--samples-per-t must be positive".into()]));
            }
            let data = gen_three_class(seed, samples_per_t)?;
            write(&out, &three_class_csv(&data))?;
            write_json(&side, &json!({ "task": "classify", "seed": seed, "samples_per_T": samples_per_t, "rng": "ChaCha8", "rows": data.len() }))?;
            data.len()
        }
        Task::Landscape1d => {
            let g = parse_grid(grid.unwrap_or("201x61"), 2)?;
            let mut s = String::from("x,T,F\n");
            for t in linspace(LANDSCAPE1D_T.0, LANDSCAPE1D_T.1, g[1]) {
                for x in linspace(LANDSCAPE1D_X.0, LANDSCAPE1D_X.1, g[0]) {
                    let _ = writeln!(s, "{x:.16e},{t:.16e},{:.16e}", benchmark_f_1d(x, t, 1.0));
                }
            }
            write(&out, &s)?;
            write_json(&side, &json!({ "task": "landscape1d", "grid": g, "x_range": LANDSCAPE1D_X, "t_range": LANDSCAPE1D_T, "k_b": 1.0 }))?;
            g[0] * g[1]
        }
        Task::Landscape2d => {
            let g = parse_grid(grid.unwrap_or("100x100"), 2)?;
            let mut s = String::from("x1,x2,V\n");
            for x2 in linspace(LANDSCAPE2D_X2.0, LANDSCAPE2D_X2.1, g[1]) {
                for x1 in linspace(LANDSCAPE2D_X1.0, LANDSCAPE2D_X1.1, g[0]) {
                    let _ = writeln!(s, "{x1:.16e},{x2:.16e},{:.16e}", benchmark_v_2d(x1, x2));
                }
            }
            write(&out, &s)?;
            write_json(&side, &json!({ "task": "landscape2d", "grid": g, "x1_range": LANDSCAPE2D_X1, "x2_range": LANDSCAPE2D_X2 }))?;
            g[0] * g[1]
        }
        Task::Fe3pt => {
            let g = parse_grid(grid.unwrap_or("31x8"), 2)?;
            let source = SyntheticFvt::default();
            let table = source.table(g[0], &linspace(FE3PT_T.0, FE3PT_T.1, g[1]))?;
            let units = FvtUnits { volume_unit: "A^3/atom".into(), normalized_to: None, pressure_gpa: Some(source.pressure_gpa) };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
            }
            save_fvt(&out, &table, Some(&units))?;
            table.len()
        }
    };
    let bytes = fs::read(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    println!("rows {rows}");
    println!("sha256 {}", sha256_hex(&bytes));
    println!("wrote {} and {}", out.display(), side.display());
    Ok(())
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Classify => "classify",
        Task::Landscape1d => "landscape1d",
        Task::Landscape2d => "landscape2d",
        Task::Fe3pt => "fe3pt",
    }
}

// ---------------------------------------------------------------------------
// data

enum Prepared {
    Classify(LabeledSet),
    Density(DensityData),
}

struct DensityData {
    slices: Vec<DensitySlice>,
    convexity: Option<Convexity>,
    units: Option<Units>,
    x_ranges: Vec<(f64, f64)>,
    t_range: (f64, f64),
    /// Reference `F` per slice, in physical units, on the slice grid.
    reference: Vec<Vec<f64>>,
    /// Physical temperature per slice.
    temps: Vec<f64>,
    pressure_gpa: Option<f64>,
}

fn reference_for(slices: &[DensitySlice], f: impl Fn(&[f64], f64) -> f64) -> Vec<Vec<f64>> {
    let mut x = Vec::new();
    slices
        .iter()
        .map(|s| {
            let g = &s.density.grid;
            (0..g.len())
                .map(|i| {
                    g.point(i, &mut x);
                    f(&x, s.t)
                })
                .collect()
        })
        .collect()
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = &cfg.data;
    match cfg.task {
        Task::Classify => {
            let data = match &d.path {
                Some(p) => load_classification(p)?,
                None => gen_three_class(d.seed.unwrap_or(0), d.samples_per_t.unwrap_or(10_000))?,
            };
            Ok(Prepared::Classify(data))
        }
        Task::Landscape1d => {
            let g = d.grid.clone().unwrap_or_else(|| vec![31, 6]);
            let t_range = d.t_range.unwrap_or(LANDSCAPE1D_T);
            let temps = linspace(t_range.0, t_range.1, g[1]);
            let k_b = cfg.model.k_b;
            let slices = landscape1d_slices(g[0], &temps, k_b)?;
            let reference = reference_for(&slices, |x, t| benchmark_f_1d(x[0], t, k_b));
            Ok(Prepared::Density(DensityData {
                slices,
                convexity: None,
                units: None,
                x_ranges: vec![LANDSCAPE1D_X],
                t_range,
                reference,
                temps,
                pressure_gpa: None,
            }))
        }
        Task::Landscape2d => {
            let g = d.grid.clone().unwrap_or_else(|| vec![21]);
            let t = d.temperature.unwrap_or(1.0);
            let slices = landscape2d_slices(g[0], t, cfg.model.k_b)?;
            let reference = reference_for(&slices, |x, _| benchmark_v_2d(x[0], x[1]));
            Ok(Prepared::Density(DensityData {
                slices,
                convexity: None,
                units: None,
                x_ranges: vec![LANDSCAPE2D_X1, LANDSCAPE2D_X2],
                t_range: (t, t),
                reference,
                temps: vec![t],
                pressure_gpa: None,
            }))
        }
        Task::Fe3pt => {
            let (table, pressure_gpa): (SampleTable, Option<f64>) = match &d.path {
                Some(p) => (load_fvt(p)?, load_sidecar(p)?.and_then(|u| u.pressure_gpa)),
                None => {
                    let g = d.grid.clone().unwrap_or_else(|| vec![31, 8]);
                    let (lo, hi) = d.t_range.unwrap_or(FE3PT_T);
                    let source = SyntheticFvt::default();
                    (source.table(g[0], &linspace(lo, hi, g[1]))?, Some(source.pressure_gpa))
                }
            };
            if table.is_empty() {
                return Err(Error::Format { path: d.path.clone().unwrap_or_default(), msg: "F(V,T) table has no rows".into() });
            }
            let units = Units::matched(d.t_scale.unwrap_or(100.0), cfg.model.k_b);
            let slices = fvt_slices(&table, &units)?;
            let raw = table.temperature_slices()?;
            let v_lo = raw.iter().map(|s| s.1.axes[0][0]).fold(f64::NEG_INFINITY, f64::max);
            let v_hi = raw.iter().map(|s| *s.1.axes[0].last().expect("three volumes")).fold(f64::INFINITY, f64::min);
            if !(v_lo < v_hi) || raw.iter().any(|s| s.1.axes[0] != raw[0].1.axes[0]) {
                return Err(Error::Format {
                    path: d.path.clone().unwrap_or_default(),
                    msg: "every temperature must share one volume grid".into(),
                });
            }
            let temps: Vec<f64> = raw.iter().map(|s| s.0).collect();
            let convexity = Convexity {
                v_grid: linspace(v_lo, v_hi, d.convexity_points.unwrap_or(11)),
                rest: vec![],
                lambda: cfg.train.lambda,
            };
            Ok(Prepared::Density(DensityData {
                slices,
                convexity: Some(convexity),
                units: Some(units),
                x_ranges: vec![(v_lo, v_hi)],
                t_range: (temps[0], temps[temps.len() - 1]),
                reference: raw.into_iter().map(|s| s.2).collect(),
                temps,
                pressure_gpa,
            }))
        }
    }
}

// ---------------------------------------------------------------------------
// saved models

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fitted {
    Ensemble { model: EnsembleModel },
    DnnClassifier { model: DnnClassifier },
    DnnField { model: DnnField },
}

/// Everything `analyze` needs: the trained model, how it was produced and
/// the physical domain of its data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedModel {
    pub config: ExperimentConfig,
    pub units: Option<Units>,
    pub x_ranges: Vec<(f64, f64)>,
    pub t_range: (f64, f64),
    pub pressure_gpa: Option<f64>,
    pub fitted: Fitted,
}

/// A model field in physical units: `F = f_scale·F_model(x, T/t_scale)`.
struct Physical<'a> {
    inner: &'a dyn ScalarField,
    units: Option<Units>,
}

impl ScalarField for Physical<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn build(&self, g: &mut Graph, x: &[Expr], t: Expr) -> Result<Expr> {
        match self.units {
            Some(u) => {
                let tau = g.scale(t, 1.0 / u.t_scale);
                let f = self.inner.build(g, x, tau)?;
                Ok(g.scale(f, u.f_scale))
            }
            None => self.inner.build(g, x, t),
        }
    }
}

impl SavedModel {
    fn field(&self) -> Option<Physical<'_>> {
        let inner: &dyn ScalarField = match &self.fitted {
            Fitted::Ensemble { model } if self.config.task != Task::Classify => model,
            Fitted::DnnField { model } => model,
            _ => return None,
        };
        Some(Physical { inner, units: self.units })
    }

    fn probs(&self, t: f64) -> Result<Vec<f64>> {
        match &self.fitted {
            Fitted::Ensemble { model } => ensemble_probs(model, t),
            Fitted::DnnClassifier { model } => model.probs(t),
            Fitted::DnnField { .. } => Err(Error::Contract("density model has no class probabilities".into())),
        }
    }
}

// ---------------------------------------------------------------------------
// train

pub struct Overrides {
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub learning_rate: Option<f64>,
}

fn per_slice_rmse(field: &CompiledField, data: &DensityData) -> Result<Vec<f64>> {
    let mut x = Vec::new();
    data.slices
        .iter()
        .zip(&data.reference)
        .zip(&data.temps)
        .map(|((s, truth), &t)| {
            let g = &s.density.grid;
            let pred: Vec<f64> = (0..g.len())
                .map(|i| {
                    g.point(i, &mut x);
                    field.value(&x, t)
                })
                .collect::<Result<_>>()?;
            Ok(zenn::tasks::offset_rmse(&pred, truth))
        })
        .collect()
}

pub fn train(config_path: &Path, out: &Path, overrides: &Overrides, baseline: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(e) = overrides.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = overrides.seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = overrides.learning_rate {
        cfg.train.learning_rate = lr;
    }
    cfg.validate()?;
    let data = prepare(&cfg)?;
    let start = Instant::now();
    let (saved, loss_csv, metrics) = match data {
        Prepared::Classify(set) => {
            let (fitted, report_loss, csv, epochs) = if baseline {
                let r = fit_dnn_classifier(&set, &cfg.model, &cfg.train)?;
                (Fitted::DnnClassifier { model: r.model.clone() }, r.final_loss(), r.loss_csv(), r.loss_history.len())
            } else {
                let r = fit_classifier(&set, &cfg.model, &cfg.train)?;
                (Fitted::Ensemble { model: r.model.clone() }, r.final_loss(), r.loss_csv(), r.loss_history.len())
            };
            let saved = SavedModel {
                config: cfg.clone(),
                units: None,
                x_ranges: vec![],
                t_range: CLASSIFY_T_RANGE,
                pressure_gpa: None,
                fitted,
            };
            let mut hits = vec![0usize; set.classes];
            let mut totals = vec![0usize; set.classes];
            for (t, counts) in set.counts_by_temperature() {
                let p = saved.probs(t)?;
                let arg = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
                for (k, &c) in counts.iter().enumerate() {
                    totals[k] += c;
                    if k == arg {
                        hits[k] += c;
                    }
                }
            }
            let accuracy: Vec<f64> = hits.iter().zip(&totals).map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 }).collect();
            let mut metrics = json!({
                "task": "classify",
                "model": if baseline { "dnn" } else { "zenn" },
                "final_loss": report_loss,
                "epochs": epochs,
                "per_class_accuracy": accuracy,
            });
            if set.classes == 3 {
                let temps: Vec<f64> = set.counts_by_temperature().into_iter().map(|c| c.0).collect();
                metrics["max_probability_error"] = json!(zenn::tasks::max_probability_error(|t| saved.probs(t), &temps)?);
            }
            (saved, csv, metrics)
        }
        Prepared::Density(d) => {
            let (fitted, losses_by_k, selected_k, report_loss, csv, epochs) = if baseline {
                let k = match cfg.train.k {
                    KChoice::Fixed(k) => k,
                    KChoice::Auto(_) => cfg.train.k_max,
                };
                let r = fit_dnn_density(&d.slices, k, &cfg.model, &cfg.train)?;
                (Fitted::DnnField { model: r.model.clone() }, vec![r.final_loss()], None, r.final_loss(), r.loss_csv(), r.loss_history.len())
            } else {
                let (r, losses): (TrainReport<EnsembleModel>, Vec<f64>) = fit_density(&d.slices, d.convexity.clone(), &cfg.model, &cfg.train)?;
                (Fitted::Ensemble { model: r.model.clone() }, losses, Some(r.selected_k), r.final_loss(), r.loss_csv(), r.loss_history.len())
            };
            let saved = SavedModel {
                config: cfg.clone(),
                units: d.units,
                x_ranges: d.x_ranges.clone(),
                t_range: d.t_range,
                pressure_gpa: d.pressure_gpa,
                fitted,
            };
            let field = CompiledField::new(&saved.field().expect("density model"))?;
            let rmse = per_slice_rmse(&field, &d)?;
            let overall = (rmse.iter().map(|r| r * r).sum::<f64>() / rmse.len() as f64).sqrt();
            let metrics = json!({
                "task": task_name(cfg.task),
                "model": if baseline { "dnn" } else { "zenn" },
                "final_loss": report_loss,
                "epochs": epochs,
                "selected_k": selected_k,
                "final_loss_by_k": losses_by_k,
                "rmse": overall,
                "rmse_by_temperature": d.temps.iter().zip(&rmse).map(|(t, r)| json!({ "T": t, "rmse": r })).collect::<Vec<_>>(),
            });
            (saved, csv, metrics)
        }
    };
    write_json(&out.join("model.json"), &saved)?;
    write(&out.join("loss.csv"), &loss_csv)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    println!("final loss {:.16e}", metrics["final_loss"].as_f64().unwrap_or(f64::NAN));
    println!("wrote {}/{{model.json,loss.csv,metrics.json}}", out.display());
    eprintln!("trained in {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Serialize)]
struct Item {
    name: String,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

struct Batch {
    out: PathBuf,
    items: Vec<Item>,
}

impl Batch {
    /// Runs one artifact; failures are recorded and do not stop the batch.
    fn run(&mut self, name: &str, f: impl FnOnce() -> Result<String>) {
        let result = f().and_then(|text| write(&self.out.join(name), &text));
        match result {
            Ok(()) => {
                println!("ok     {name}");
                self.items.push(Item { name: name.into(), ok: true, error: None });
            }
            Err(e) => {
                println!("failed {name}: {e}");
                self.items.push(Item { name: name.into(), ok: false, error: Some(e.to_string()) });
            }
        }
    }
}

#[derive(Serialize)]
struct Attempt {
    guess: CriticalGuess,
    #[serde(skip_serializing_if = "Option::is_none")]
    solution: Option<CriticalPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn critical_report<F: ScalarField + ?Sized>(
    field: &F,
    guesses: Vec<CriticalGuess>,
    x_ranges: &[(f64, f64)],
    t_range: (f64, f64),
    pressure_gpa: Option<f64>,
) -> Result<String> {
    let attempts: Vec<Attempt> = guesses
        .into_iter()
        .map(|g| match solve_critical_point(field, &g) {
            Ok(cp) => Attempt { guess: g, solution: Some(cp), error: None },
            Err(e) => Attempt { guess: g, solution: None, error: Some(e.to_string()) },
        })
        .collect();
    let inside = |cp: &CriticalPoint| {
        cp.x_star.iter().zip(x_ranges).all(|(v, &(lo, hi))| *v >= lo && *v <= hi) && cp.t_star >= t_range.0 && cp.t_star <= t_range.1
    };
    let best = attempts.iter().filter_map(|a| a.solution.as_ref()).find(|cp| inside(cp)).cloned();
    let text = serde_json::to_string_pretty(&json!({
        "pressure_GPa": pressure_gpa,
        "domain": { "x": x_ranges, "T": t_range },
        "critical_point": best,
        "attempts": attempts,
    }))? + "\n";
    if best.is_none() {
        return Err(Error::Solver(format!("no critical point inside the domain from {} guesses", attempts.len())));
    }
    Ok(text)
}

fn error_grid(field: &CompiledField, xs: &[f64], ys: &[f64], header: &str, fixed_t: Option<f64>, truth: impl Fn(f64, f64) -> f64) -> Result<String> {
    // One offset per row of constant `y`: density data cannot fix F(T) + c(T).
    let mut out = String::from(header);
    let mut rows = Vec::new();
    for &y in ys {
        let mut row = Vec::with_capacity(xs.len());
        for &x in xs {
            let pred = match fixed_t {
                Some(t) => field.value(&[x, y], t)?,
                None => field.value(&[x], y)?,
            };
            row.push((x, pred, truth(x, y)));
        }
        let shift = row.iter().map(|r| r.1 - r.2).sum::<f64>() / row.len() as f64;
        if fixed_t.is_some() {
            rows.push((y, row, 0.0));
        } else {
            rows.push((y, row, shift));
        }
    }
    if fixed_t.is_some() {
        let all: Vec<f64> = rows.iter().flat_map(|r| r.1.iter().map(|v| v.1 - v.2)).collect();
        let shift = all.iter().sum::<f64>() / all.len() as f64;
        rows.iter_mut().for_each(|r| r.2 = shift);
    }
    for (y, row, shift) in rows {
        for (x, pred, truth) in row {
            let _ = writeln!(out, "{x:.16e},{y:.16e},{pred:.16e},{truth:.16e},{:.16e}", (pred - truth - shift).abs());
        }
    }
    Ok(out)
}

fn grid_summary(csv: &str) -> (f64, f64) {
    let errs: Vec<f64> = csv.lines().skip(1).filter_map(|l| l.rsplit(',').next()?.parse().ok()).collect();
    let max = errs.iter().copied().fold(0.0, f64::max);
    let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len().max(1) as f64).sqrt();
    (max, rms)
}

pub fn analyze(model_path: &Path, config_path: Option<&Path>, out: &Path) -> Result<()> {
    let text = fs::read_to_string(model_path).map_err(|e| Error::Io { path: model_path.into(), source: e })?;
    let saved: SavedModel = serde_json::from_str(&text).map_err(|e| Error::Format { path: model_path.into(), msg: e.to_string() })?;
    let a = match config_path {
        Some(p) => {
            let c = ExperimentConfig::load(p)?;
            if c.task != saved.config.task {
                return Err(Error::Config(vec![format!("config is for {:?} but the model is for {:?}", c.task, saved.config.task)]));
            }
            c.validate()?;
            c.analysis
        }
        None => saved.config.analysis.clone(),
    };
    let mut batch = Batch { out: out.to_path_buf(), items: Vec::new() };
    let mut metrics = serde_json::Map::new();
    let task = saved.config.task;
    match task {
        Task::Classify => {
            let t_range = a.t_range.unwrap_or(CLASSIFY_T_RANGE);
            let temps = linspace(t_range.0, t_range.1, a.temperatures.unwrap_or(141));
            let classes = saved.probs(temps[0])?.len();
            batch.run("probabilities.csv", || {
                let mut s = String::from("T");
                for k in 1..=classes {
                    let _ = write!(s, ",p{k}");
                }
                if classes == 3 {
                    s.push_str(",p1_true,p2_true,p3_true");
                }
                s.push('\n');
                for &t in &temps {
                    let _ = write!(s, "{t:.16e}");
                    for p in saved.probs(t)? {
                        let _ = write!(s, ",{p:.16e}");
                    }
                    if classes == 3 {
                        for q in three_class_probs(t) {
                            let _ = write!(s, ",{q:.16e}");
                        }
                    }
                    s.push('\n');
                }
                Ok(s)
            });
            if classes == 3 {
                let train_t = linspace(CLASSIFY_T_RANGE.0, CLASSIFY_T_RANGE.1, 141);
                let gen_t = linspace(6.0, 8.0, 41);
                if let (Ok(e1), Ok(e2)) = (
                    zenn::tasks::max_probability_error(|t| saved.probs(t), &train_t),
                    zenn::tasks::max_probability_error(|t| saved.probs(t), &gen_t),
                ) {
                    metrics.insert("max_probability_error_1_8".into(), json!(e1));
                    metrics.insert("max_probability_error_6_8".into(), json!(e2));
                }
            }
        }
        Task::Landscape1d | Task::Fe3pt => {
            let field = saved.field().ok_or_else(|| Error::Contract("model has no free-energy field".into()))?;
            let x_range = a.x_range.unwrap_or(saved.x_ranges[0]);
            let t_range = a.t_range.unwrap_or(saved.t_range);
            let resolution = a.resolution.unwrap_or(41);
            let temps = linspace(t_range.0, t_range.1, a.temperatures.unwrap_or(41));
            let seeds_per_t = a.seeds_per_t.unwrap_or(41);
            let max_seeds = a.max_seeds.unwrap_or(5);
            let p_crit = if task == Task::Fe3pt { Some(a.critical_pressure_gpa.or(saved.pressure_gpa).unwrap_or(FE3PT_CRITICAL_GPA)) } else { None };
            let gibbs = WithPressure { inner: &field, p: p_crit.unwrap_or(0.0) / EV_PER_A3_TO_GPA };
            batch.run("bifurcation.csv", || Ok(stationary_csv(&bifurcation_diagram(&gibbs, x_range, &temps, seeds_per_t)?)));
            batch.run("contour.csv", || Ok(contour_csv(&curvature_zero_contour(&gibbs, x_range, t_range, resolution)?)));
            batch.run("critical.json", || {
                let guesses = match &a.critical_guesses {
                    Some(g) => g.clone(),
                    None => critical_seeds(&gibbs, x_range, t_range, resolution, max_seeds)?,
                };
                critical_report(&gibbs, guesses, &[x_range], t_range, p_crit)
            });
            if task == Task::Fe3pt {
                for p in a.pressures_gpa.clone().unwrap_or_else(|| vec![0.0, p_crit.unwrap_or(FE3PT_CRITICAL_GPA)]) {
                    batch.run(&format!("isobar_{p}GPa.csv"), || {
                        Ok(isobar_csv(&isobaric_curve(&field, p / EV_PER_A3_TO_GPA, &temps, x_range, 200, &[])?))
                    });
                }
            } else {
                let n = a.error_grid.unwrap_or(100);
                let compiled = CompiledField::new(&field)?;
                let k_b = saved.config.model.k_b;
                let mut grid_csv = None;
                batch.run("error_grid.csv", || {
                    let s = error_grid(&compiled, &linspace(x_range.0, x_range.1, n), &linspace(t_range.0, t_range.1, n), "x,T,F,F_true,error\n", None, |x, t| {
                        benchmark_f_1d(x, t, k_b)
                    })?;
                    grid_csv = Some(s.clone());
                    Ok(s)
                });
                if let Some(s) = grid_csv {
                    let (max, rms) = grid_summary(&s);
                    metrics.insert("max_error".into(), json!(max));
                    metrics.insert("rmse".into(), json!(rms));
                }
            }
        }
        Task::Landscape2d => {
            let field = saved.field().ok_or_else(|| Error::Contract("model has no free-energy field".into()))?;
            let compiled = CompiledField::new(&field)?;
            let t = saved.t_range.0;
            let (b1, b2) = (saved.x_ranges[0], saved.x_ranges[1]);
            let per_axis = a.seeds_per_t.unwrap_or(7);
            batch.run("stationary.csv", || {
                let mut seeds = Vec::new();
                for x1 in linspace(b1.0 + 0.05 * (b1.1 - b1.0), b1.1 - 0.05 * (b1.1 - b1.0), per_axis) {
                    for x2 in linspace(b2.0 + 0.05 * (b2.1 - b2.0), b2.1 - 0.05 * (b2.1 - b2.0), per_axis) {
                        seeds.push(vec![x1, x2]);
                    }
                }
                let pts = stationary_points_within(&compiled, t, &seeds, Some(&[b1, b2]))?;
                Ok(stationary_csv(&pts.into_iter().map(|p| (t, p)).collect::<Vec<_>>()))
            });
            let n = a.error_grid.unwrap_or(100);
            let mut grid_csv = None;
            batch.run("error_grid.csv", || {
                let s = error_grid(&compiled, &linspace(b1.0, b1.1, n), &linspace(b2.0, b2.1, n), "x1,x2,F,V_true,error\n", Some(t), benchmark_v_2d)?;
                grid_csv = Some(s.clone());
                Ok(s)
            });
            if let Some(s) = grid_csv {
                let (max, rms) = grid_summary(&s);
                metrics.insert("max_error".into(), json!(max));
                metrics.insert("rmse".into(), json!(rms));
            }
            if let Some(guesses) = a.critical_guesses.clone() {
                batch.run("critical.json", || critical_report(&field, guesses, &[b1, b2], (t, t), None));
            }
        }
    }
    let failed = batch.items.iter().filter(|i| !i.ok).count();
    write_json(&out.join("summary.json"), &json!({ "task": task_name(task), "items": batch.items, "metrics": metrics }))?;
    println!("wrote {}/summary.json", out.display());
    if failed > 0 {
        return Err(Error::Solver(format!("{failed} analysis item(s) failed; see summary.json")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eosfit

pub fn eosfit(input: &Path, out: Option<&Path>) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(input).map_err(|e| csv_error(input, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| csv_error(input, e))?.iter().map(str::to_string).collect();
    if header != ["V", "E"] {
        return Err(Error::Format { path: input.into(), msg: format!("expected header `V,E`, found `{}`", header.join(",")) });
    }
    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(input, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse = |c: &str| c.parse::<f64>().map_err(|_| Error::Parse { path: input.into(), line, msg: format!("`{c}` is not a number") });
        points.push((parse(&rec[0])?, parse(&rec[1])?));
    }
    if points.len() < 4 {
        return Err(Error::Format { path: input.into(), msg: format!("need at least 4 rows to fit, found {}", points.len()) });
    }
    let (params, eq) = eos_fit(&points)?;
    let rms = (points.iter().map(|&(v, e)| (params.energy(v) - e).powi(2)).sum::<f64>() / points.len() as f64).sqrt();
    let text = serde_json::to_string_pretty(&json!({ "params": params, "equilibrium": eq, "points": points.len(), "rms_residual": rms }))? + "\n";
    print!("{text}");
    if let Some(p) = out {
        write(p, &text)?;
    }
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    match (e.into_kind(), line) {
        (csv::ErrorKind::Io(io), _) => Error::Io { path: path.into(), source: io },
        (kind, Some(line)) => Error::Parse { path: path.into(), line, msg: format!("{kind:?}") },
        (kind, None) => Error::Format { path: path.into(), msg: format!("{kind:?}") },
    }
}
