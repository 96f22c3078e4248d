use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Grid, LabeledSet};

/// Rectangular numeric table with named columns; the first `inputs` columns
/// are inputs, the rest targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTable {
    pub names: Vec<String>,
    pub inputs: usize,
    pub rows: Vec<Vec<f64>>,
}

impl SampleTable {
    pub fn new(names: Vec<String>, inputs: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Contract("column names must be unique".into()));
        }
        if inputs > names.len() {
            return Err(Error::Contract("more input columns than columns".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != names.len()) {
            return Err(Error::Contract(format!("row {i} has {} cells, expected {}", rows[i].len(), names.len())));
        }
        Ok(SampleTable { names, inputs, rows })
    }

    pub fn fvt(rows: Vec<Vec<f64>>) -> Result<Self> {
        SampleTable::new(vec!["V".into(), "T".into(), "F".into()], 2, rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[i]).collect()
    }

    /// Groups a `V,T,F` table into temperature slices, each on one common
    /// ascending volume grid, returned as `(T, grid, F)` in increasing `T`.
    pub fn temperature_slices(&self) -> Result<Vec<(f64, Grid, Vec<f64>)>> {
        let mut rows: Vec<&Vec<f64>> = self.rows.iter().collect();
        rows.sort_by(|a, b| a[1].total_cmp(&b[1]).then(a[0].total_cmp(&b[0])));
        let mut out: Vec<(f64, Grid, Vec<f64>)> = Vec::new();
        let mut i = 0;
        while i < rows.len() {
            let t = rows[i][1];
            let j = rows[i..].iter().position(|r| r[1] != t).map_or(rows.len(), |k| i + k);
            let v: Vec<f64> = rows[i..j].iter().map(|r| r[0]).collect();
            let f: Vec<f64> = rows[i..j].iter().map(|r| r[2]).collect();
            out.push((t, Grid::new(vec![v])?, f));
            i = j;
        }
        Ok(out)
    }
}

/// Units declared next to an `F(V,T)` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvtUnits {
    pub volume_unit: String,
    /// Reference the volume is normalized to, when it is not absolute.
    pub normalized_to: Option<String>,
    pub pressure_gpa: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarFile {
    volume_unit: String,
    normalized_to: Option<String>,
    #[serde(rename = "pressure_GPa")]
    pressure_gpa: Option<f64>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `V,T,F` rows with 17 significant digits and, when given, the
/// units sidecar next to it (same stem, `.json`).
pub fn save_fvt(path: &Path, table: &SampleTable, units: Option<&FvtUnits>) -> Result<()> {
    if table.names != ["V", "T", "F"] {
        return Err(Error::Contract("F(V,T) tables must have columns V,T,F".into()));
    }
    let mut s = String::from("V,T,F\n");
    for r in &table.rows {
        s.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", r[0], r[1], r[2]));
    }
    write(path, &s)?;
    if let Some(u) = units {
        let side = SidecarFile {
            volume_unit: u.volume_unit.clone(),
            normalized_to: u.normalized_to.clone(),
            pressure_gpa: u.pressure_gpa,
        };
        write(&sidecar_path(path), &(serde_json::to_string_pretty(&side)? + "\n"))?;
    }
    Ok(())
}

/// Reads a `V,T,F` CSV. A header-only file gives an empty table.
pub fn load_fvt(path: &Path) -> Result<SampleTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    if header != ["V", "T", "F"] {
        return Err(Error::Format { path: path.into(), msg: format!("expected header `V,T,F`, found `{}`", header.join(",")) });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row = rec
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| Error::Parse { path: path.into(), line, msg: format!("`{c}` is not a number") }))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    SampleTable::fvt(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    match (e.into_kind(), line) {
        (csv::ErrorKind::Io(io), _) => Error::io(path, io),
        (kind, Some(line)) => Error::Parse { path: path.into(), line, msg: format!("{kind:?}") },
        (kind, None) => Error::Format { path: path.into(), msg: format!("{kind:?}") },
    }
}

/// The units sidecar for `path`, if one exists.
pub fn load_sidecar(path: &Path) -> Result<Option<FvtUnits>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let f: SidecarFile = serde_json::from_str(&text)?;
    Ok(Some(FvtUnits { volume_unit: f.volume_unit, normalized_to: f.normalized_to, pressure_gpa: f.pressure_gpa }))
}

/// Classification samples as `y1,y2,y3,T` rows: one-hot label then temperature.
pub fn three_class_csv(data: &LabeledSet) -> String {
    let mut s = String::with_capacity(data.len() * 32);
    s.push_str("y1,y2,y3,T\n");
    for (&t, &l) in data.t.iter().zip(&data.labels) {
        let mut y = [0u8; 3];
        y[l] = 1;
        s.push_str(&format!("{},{},{},{:.16e}\n", y[0], y[1], y[2], t));
    }
    s
}

/// Reads `y1,…,yC,T` one-hot classification rows written by [`three_class_csv`].
pub fn load_classification(path: &Path) -> Result<LabeledSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    let classes = header.len().saturating_sub(1);
    let expected: Vec<String> = (1..=classes).map(|k| format!("y{k}")).chain(["T".to_string()]).collect();
    if classes < 2 || header != expected {
        return Err(Error::Format { path: path.into(), msg: format!("expected header `y1,…,yC,T`, found `{}`", header.join(",")) });
    }
    let mut t = Vec::new();
    let mut y = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row = rec
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| Error::Parse { path: path.into(), line, msg: format!("`{c}` is not a number") }))
            .collect::<Result<Vec<f64>>>()?;
        let hot: Vec<usize> = (0..classes).filter(|&k| row[k] == 1.0).collect();
        if hot.len() != 1 || row[..classes].iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Parse { path: path.into(), line, msg: "label is not one-hot".into() });
        }
        t.push(row[classes]);
        y.push(hot[0]);
    }
    LabeledSet::new(t, y, classes)
}
