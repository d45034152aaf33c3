//! Per-view keypoint CSV tables and the ensemble prediction directory layout.
//!
//! A table has a leading `frame` column followed by `<kp>_x`, `<kp>_y` pairs
//! and any number of extra numeric columns (`<kp>_likelihood`,
//! `<kp>_postvar_x`, ...). Empty cells and `nan` are missing values. Columns
//! whose values are not numeric (such as `video` or `provenance`) are kept as
//! text.
//!
//! Ensemble predictions are laid out as `<dir>/<model>/<view>.csv`, one
//! subdirectory per ensemble member.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::EnsembleSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Text(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointTable {
    pub frames: Vec<i64>,
    names: Vec<String>,
    columns: Vec<Column>,
    lookup: HashMap<String, usize>,
}

/// Formats a float with 17 significant digits (exact `f64` round trip).
pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn parse_cell(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() {
        return Some(f64::NAN);
    }
    s.parse::<f64>().ok()
}

impl KeypointTable {
    pub fn new(frames: Vec<i64>) -> Self {
        KeypointTable { frames, names: Vec::new(), columns: Vec::new(), lookup: HashMap::new() }
    }

    pub fn n_rows(&self) -> usize {
        self.frames.len()
    }

    pub fn push_numeric(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        self.push(name.into(), Column::Numeric(values))
    }

    pub fn push_text(&mut self, name: impl Into<String>, values: Vec<String>) -> Result<()> {
        self.push(name.into(), Column::Text(values))
    }

    fn push(&mut self, name: String, col: Column) -> Result<()> {
        let len = match &col {
            Column::Numeric(v) => v.len(),
            Column::Text(v) => v.len(),
        };
        if len != self.frames.len() {
            return Err(Error::ShapeMismatch(format!("column {name} has {len} rows, table has {}", self.frames.len())));
        }
        if name == "frame" || self.lookup.contains_key(&name) {
            return Err(Error::Data(format!("duplicate column {name}")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.columns.push(col);
        Ok(())
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    pub fn numeric(&self, name: &str) -> Option<&[f64]> {
        match self.lookup.get(name).map(|&i| &self.columns[i]) {
            Some(Column::Numeric(v)) => Some(v),
            _ => None,
        }
    }

    pub fn text(&self, name: &str) -> Option<&[String]> {
        match self.lookup.get(name).map(|&i| &self.columns[i]) {
            Some(Column::Text(v)) => Some(v),
            _ => None,
        }
    }

    pub fn require(&self, name: &str, path: &Path) -> Result<&[f64]> {
        self.numeric(name)
            .ok_or_else(|| Error::Data(format!("{}: missing numeric column {name}", path.display())))
    }

    /// Keypoint names in column order: every `P` with numeric `P_x` and `P_y`
    /// columns, excluding `<kp>_postvar` companions of a known keypoint.
    pub fn keypoints(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in &self.names {
            if let Some(prefix) = name.strip_suffix("_x") {
                if self.numeric(name).is_some() && self.numeric(&format!("{prefix}_y")).is_some() {
                    out.push(prefix.to_string());
                }
            }
        }
        let all = out.clone();
        out.retain(|p| !p.strip_suffix("_postvar").is_some_and(|base| all.iter().any(|k| k == base)));
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
        if headers.get(0) != Some("frame") {
            return Err(Error::Data(format!("{}: first column must be `frame`", path.display())));
        }
        let ncol = headers.len() - 1;
        let mut frames = Vec::new();
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); ncol];
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let frame = rec.get(0).unwrap_or("").trim();
            let frame: i64 = frame
                .parse()
                .or_else(|_| frame.parse::<f64>().map(|f| f as i64).map_err(|_| ()))
                .map_err(|_| Error::Data(format!("{}: bad frame id {frame:?}", path.display())))?;
            frames.push(frame);
            for (j, col) in raw.iter_mut().enumerate() {
                col.push(rec.get(j + 1).unwrap_or("").to_string());
            }
        }
        let mut table = KeypointTable::new(frames);
        for (j, values) in raw.into_iter().enumerate() {
            let name = headers.get(j + 1).unwrap_or("").to_string();
            let parsed: Option<Vec<f64>> = values.iter().map(|s| parse_cell(s)).collect();
            match parsed {
                Some(v) => table.push_numeric(name, v)?,
                None if name.ends_with("_x") || name.ends_with("_y") || name.ends_with("_likelihood") => {
                    return Err(Error::Data(format!("{}: non-numeric value in column {name}", path.display())));
                }
                None => table.push_text(name, values)?,
            }
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut header = vec!["frame".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        let mut row = Vec::with_capacity(header.len());
        for (r, frame) in self.frames.iter().enumerate() {
            row.clear();
            row.push(frame.to_string());
            for col in &self.columns {
                row.push(match col {
                    Column::Numeric(v) => format_f64(v[r]),
                    Column::Text(v) => v[r].clone(),
                });
            }
            w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn sorted_entries(dir: &Path, want_dir: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let keep = if want_dir { path.is_dir() } else { path.is_file() && path.extension().is_some_and(|e| e == "csv") };
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads `<dir>/<view>.csv` for every view, sorted by view name.
pub fn read_model_dir(dir: &Path) -> Result<Vec<(String, KeypointTable)>> {
    let files = sorted_entries(dir, false)?;
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no view CSV files", dir.display())));
    }
    files.iter().map(|p| Ok((stem(p), KeypointTable::read(p)?))).collect()
}

/// Reads an ensemble directory `<dir>/<model>/<view>.csv` into one series per
/// keypoint. Views are sorted by name; every file must share the same frames.
pub fn read_ensemble_dir(dir: &Path) -> Result<Vec<EnsembleSeries>> {
    let model_dirs = sorted_entries(dir, true)?;
    if model_dirs.is_empty() {
        return Err(Error::Data(format!("{}: no model subdirectories", dir.display())));
    }
    let models: Vec<Vec<(String, KeypointTable)>> =
        model_dirs.iter().map(|d| read_model_dir(d)).collect::<Result<_>>()?;
    let views: Vec<String> = models[0].iter().map(|(v, _)| v.clone()).collect();
    let frames = models[0][0].1.frames.clone();
    let keypoints = models[0][0].1.keypoints();
    if keypoints.is_empty() {
        return Err(Error::Data(format!("{}: no keypoint columns", dir.display())));
    }
    for (mdir, tables) in model_dirs.iter().zip(&models) {
        let names: Vec<&String> = tables.iter().map(|(v, _)| v).collect();
        if names.iter().map(|s| s.as_str()).ne(views.iter().map(|s| s.as_str())) {
            return Err(Error::Data(format!("{}: views {names:?} differ from {views:?}", mdir.display())));
        }
        for (view, table) in tables {
            if table.frames != frames {
                return Err(Error::Data(format!("{}/{view}.csv: frame column differs", mdir.display())));
            }
            for kp in &keypoints {
                let path = mdir.join(format!("{view}.csv"));
                table.require(&format!("{kp}_x"), &path)?;
                table.require(&format!("{kp}_y"), &path)?;
            }
        }
    }
    let n_models = models.len();
    keypoints
        .iter()
        .map(|kp| {
            let cols: Vec<Vec<(&[f64], &[f64])>> = models
                .iter()
                .map(|tables| {
                    tables
                        .iter()
                        .map(|(_, t)| (t.numeric(&format!("{kp}_x")).unwrap(), t.numeric(&format!("{kp}_y")).unwrap()))
                        .collect()
                })
                .collect();
            EnsembleSeries::from_fn(kp.clone(), views.clone(), frames.clone(), n_models, |t, c, m| {
                let (xs, ys) = cols[m][c / 2];
                if c % 2 == 0 {
                    xs[t]
                } else {
                    ys[t]
                }
            })
        })
        .collect()
}
