//! Target-domain samples and the plain-text interchange formats.
//!
//! Dataset files:
//!
//! ```text
//! d=2,classes=3,n=2,labeled=true
//! id,x0,x1,label
//! s0,0.5,-1.25,2
//! s1,1,0,0
//! ```
//!
//! Prediction files:
//!
//! ```text
//! id,p0,p1,p2
//! s0,2.0000000000000000e-1,...
//! ```
//!
//! Floats are written with 17 significant digits so a write/read cycle is
//! lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::prob::{check_simplex, check_unique, PredictionMatrix};

/// Row sums within this distance of 1 are renormalized on load; anything
/// further off is rejected.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Unlabeled (or evaluation-labeled) target samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    features: Vec<f64>,
    dim: usize,
    classes: usize,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        ids: Vec<String>,
        features: Vec<f64>,
        dim: usize,
        classes: usize,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(Error::invalid("dataset needs d >= 1 and at least 2 classes"));
        }
        if ids.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if features.len() != ids.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                ids.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        if let Some(l) = &labels {
            if l.len() != ids.len() {
                return Err(Error::invalid("label column does not match sample count"));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= classes) {
                return Err(Error::invalid(format!("label {bad} is outside [0, {classes})")));
            }
        }
        check_unique(&ids)?;
        Ok(Self {
            ids,
            features,
            dim,
            classes,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Same samples with the label column dropped.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Features of the listed samples, concatenated in order.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.sample(i));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "d={},classes={},n={},labeled={}\nid",
            self.dim,
            self.classes,
            self.len(),
            self.labels.is_some()
        );
        for j in 0..self.dim {
            let _ = write!(s, ",x{j}");
        }
        if self.labels.is_some() {
            s.push_str(",label");
        }
        s.push('\n');
        for i in 0..self.len() {
            s.push_str(&self.ids[i]);
            for v in self.sample(i) {
                let _ = write!(s, ",{v:.16e}");
            }
            if let Some(l) = &self.labels {
                let _ = write!(s, ",{}", l[i]);
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_file(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty dataset file"))?;
        let (mut dim, mut classes, mut n, mut labeled) = (None, None, None, None);
        for kv in header.split(',') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::parse(path, 1, format!("bad header field `{kv}`")))?;
            let num = || {
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::parse(path, 1, format!("{k}: {e}")))
            };
            match k.trim() {
                "d" => dim = Some(num()?),
                "classes" => classes = Some(num()?),
                "n" => n = Some(num()?),
                "labeled" => {
                    labeled = Some(
                        v.trim()
                            .parse::<bool>()
                            .map_err(|e| Error::parse(path, 1, format!("labeled: {e}")))?,
                    )
                }
                other => return Err(Error::parse(path, 1, format!("unknown header field `{other}`"))),
            }
        }
        let (Some(dim), Some(classes), Some(n)) = (dim, classes, n) else {
            return Err(Error::parse(path, 1, "header must give d, classes and n"));
        };
        let labeled = labeled.unwrap_or(false);
        let (_, columns) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 2, "missing column header"))?;
        let width = 1 + dim + usize::from(labeled);
        if columns.split(',').count() != width || !columns.starts_with("id,") {
            return Err(Error::parse(path, 2, format!("expected {width} columns starting with `id`")));
        }

        let mut ids = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * dim);
        let mut labels = labeled.then(|| Vec::with_capacity(n));
        let mut seen = std::collections::HashSet::with_capacity(n);
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != width {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected {width} columns, found {}", cells.len()),
                ));
            }
            let id = cells[0].trim();
            if id.is_empty() {
                return Err(Error::parse(path, lineno, "empty sample id"));
            }
            if !seen.insert(id.to_string()) {
                return Err(Error::parse(path, lineno, format!("duplicate sample id `{id}`")));
            }
            ids.push(id.to_string());
            for cell in &cells[1..=dim] {
                let v = parse_float(cell, path, lineno)?;
                features.push(v);
            }
            if let Some(l) = labels.as_mut() {
                let y = cells[dim + 1]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::parse(path, lineno, format!("label: {e}")))?;
                if y >= classes {
                    return Err(Error::parse(path, lineno, format!("label {y} is outside [0, {classes})")));
                }
                l.push(y);
            }
        }
        if ids.len() != n {
            return Err(Error::parse(
                path,
                1,
                format!("header promises {n} samples, file holds {}", ids.len()),
            ));
        }
        Dataset::new(ids, features, dim, classes, labels)
    }
}

fn parse_float(cell: &str, path: &Path, line: usize) -> Result<f64> {
    let v = cell
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::parse(path, line, format!("`{cell}`: {e}")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value `{cell}`")));
    }
    Ok(v)
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn predictions_to_csv(m: &PredictionMatrix) -> String {
    let mut s = String::from("id");
    for j in 0..m.classes() {
        let _ = write!(s, ",p{j}");
    }
    s.push('\n');
    for (id, row) in m.ids().iter().zip(m.rows()) {
        s.push_str(id);
        for v in row {
            let _ = write!(s, ",{v:.16e}");
        }
        s.push('\n');
    }
    s
}

pub fn save_predictions(m: &PredictionMatrix, path: &Path) -> Result<()> {
    write_file(path, &predictions_to_csv(m))
}

pub fn load_predictions(path: &Path, expected_classes: Option<usize>) -> Result<PredictionMatrix> {
    parse_predictions(&read_file(path)?, path, expected_classes)
}

pub fn parse_predictions(
    text: &str,
    path: &Path,
    expected_classes: Option<usize>,
) -> Result<PredictionMatrix> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty prediction file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"id") {
        return Err(Error::parse(path, 1, "header must start with `id`"));
    }
    let classes = cols.len() - 1;
    if cols[1..].iter().enumerate().any(|(j, c)| *c != format!("p{j}")) {
        return Err(Error::parse(path, 1, "header must read `id,p0,...,p{C-1}`"));
    }
    if classes < 2 {
        return Err(Error::parse(path, 1, "need at least 2 class columns"));
    }
    if let Some(c) = expected_classes {
        if c != classes {
            return Err(Error::parse(path, 1, format!("expected {c} classes, file has {classes}")));
        }
    }
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != classes + 1 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {} columns, found {}", classes + 1, cells.len()),
            ));
        }
        let id = cells[0].trim();
        if id.is_empty() {
            return Err(Error::parse(path, lineno, "empty sample id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::parse(path, lineno, format!("duplicate sample id `{id}`")));
        }
        let mut row = cells[1..]
            .iter()
            .map(|c| parse_float(c, path, lineno))
            .collect::<Result<Vec<f64>>>()?;
        if row.iter().any(|&v| v < 0.0) {
            return Err(Error::parse(path, lineno, "negative probability"));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::parse(path, lineno, format!("row sums to {sum}, not 1")));
        }
        if check_simplex(&row).is_err() {
            row.iter_mut().for_each(|v| *v /= sum);
        }
        ids.push(id.to_string());
        data.extend(row);
    }
    if ids.is_empty() {
        return Err(Error::parse(path, 1, "no prediction rows"));
    }
    PredictionMatrix::new(ids, data, classes)
}
