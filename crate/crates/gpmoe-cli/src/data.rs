//! Dataset container, CSV ingestion, and output normalization.
//!
//! CSV layout: the first D columns are inputs, the last column is the
//! output; a header row is detected and skipped. Rows with non-numeric
//! fields are rejected individually and reported with their line numbers.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if dim == 0 || x.len() != y.len() * dim {
            return Err(CliError::input("dataset buffers do not agree with the input dimension"));
        }
        Ok(Self { dim, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Contiguous sub-range [start, end) as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            dim: self.dim,
            x: self.x[start * self.dim..end * self.dim].to_vec(),
            y: self.y[start..end].to_vec(),
        }
    }

    /// Split into `n` contiguous blocks with sizes as even as the length
    /// allows (earlier blocks take the remainder).
    pub fn blocks(&self, n: usize) -> Vec<Dataset> {
        let n = n.clamp(1, self.len().max(1));
        let base = self.len() / n;
        let extra = self.len() % n;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        for i in 0..n {
            let size = base + usize::from(i < extra);
            out.push(self.slice(start, start + size));
            start += size;
        }
        out
    }

    /// True when the first input coordinate never decreases.
    pub fn is_time_ordered(&self) -> bool {
        self.y.len() < 2
            || (1..self.len()).all(|i| self.x[i * self.dim] >= self.x[(i - 1) * self.dim])
    }
}

/// Zero-mean/unit-variance transform of the output column (population
/// standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub sd: f64,
}

impl Normalization {
    pub fn fit(y: &[f64]) -> Result<Self> {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var <= 0.0 {
            return Err(CliError::input("cannot normalize an output column with zero variance"));
        }
        Ok(Self { mean, sd: var.sqrt() })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Parse a CSV file into a dataset. Returns the dataset, the normalization
/// parameters when `normalize` is set (already applied to the outputs), and
/// the 1-based line numbers of rejected rows.
pub fn ingest_csv(path: &Path, normalize: bool) -> Result<(Dataset, Option<Normalization>, Vec<usize>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rejected: Vec<usize> = Vec::new();
    let mut ncols: Option<usize> = None;
    let mut first_content_line = true;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse::<f64>().ok()).collect();
        match parsed {
            Some(vals) => {
                if let Some(n) = ncols {
                    if vals.len() != n {
                        rejected.push(lineno + 1);
                    } else {
                        rows.push(vals);
                    }
                } else {
                    ncols = Some(vals.len());
                    rows.push(vals);
                }
            }
            // The first non-numeric content line is a header; later ones
            // are bad rows.
            None if first_content_line => {}
            None => rejected.push(lineno + 1),
        }
        first_content_line = false;
    }
    let ncols = ncols.ok_or_else(|| CliError::input(format!("{}: no numeric rows found", path.display())))?;
    if ncols < 2 {
        return Err(CliError::input(format!(
            "{}: need at least two columns (inputs then output), found {ncols}",
            path.display()
        )));
    }
    if !rejected.is_empty() {
        let mut list = String::new();
        for (i, ln) in rejected.iter().take(12).enumerate() {
            if i > 0 {
                list.push_str(", ");
            }
            let _ = write!(list, "{ln}");
        }
        eprintln!(
            "warning: {}: rejected {} non-numeric/misshapen row(s) at line(s) {list}{}",
            path.display(),
            rejected.len(),
            if rejected.len() > 12 { ", …" } else { "" }
        );
    }
    let dim = ncols - 1;
    let mut x = Vec::with_capacity(rows.len() * dim);
    let mut y = Vec::with_capacity(rows.len());
    for row in &rows {
        x.extend_from_slice(&row[..dim]);
        y.push(row[dim]);
    }
    let norm = if normalize {
        let n = Normalization::fit(&y)?;
        for v in &mut y {
            *v = n.apply(*v);
        }
        Some(n)
    } else {
        None
    };
    Ok((Dataset::new(dim, x, y)?, norm, rejected))
}

/// Write a dataset as CSV with an `x0,...,y` header.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    for d in 0..data.dim {
        let _ = write!(out, "x{d},");
    }
    out.push_str("y\n");
    for i in 0..data.len() {
        for d in 0..data.dim {
            let _ = write!(out, "{},", data.x[i * data.dim + d]);
        }
        let _ = writeln!(out, "{}", data.y[i]);
    }
    crate::model_io::atomic_write(path, out.as_bytes())
}
