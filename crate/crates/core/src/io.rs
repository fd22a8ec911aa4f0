//! Reading panels from CSV and writing fits, truths and tables.
//!
//! Time positions in documents are 1-based segment ends, the last point `n`
//! being implicit.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{bic_q, mbic_k};
use crate::simgen::SimConfig;
use crate::types::{
    FactorParams, ModelFit, Noise, NoiseMode, SegmentMeans, Segmentation, SeriesMatrix, SimTruth,
};

pub const SCHEMA_VERSION: u32 = 1;

pub const LOADINGS_NOTE: &str =
    "loadings are identified only up to an orthogonal rotation B -> BR; only BB' is unique";

/// Read a numeric CSV (rows = time, columns = series).
///
/// A first row in which no cell parses as a number is taken as a header.
pub fn ingest_csv(path: &Path) -> Result<SeriesMatrix> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_csv(file)
}

pub fn parse_csv<R: Read>(reader: R) -> Result<SeriesMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 1;
        if i == 0 && record.iter().all(|c| c.parse::<f64>().is_err()) {
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Data(format!(
                "line {line}: expected {expected} columns, found {}",
                record.len()
            )));
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(j, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Data(format!(
                    "line {line}, column {}: '{cell}' is not a finite number",
                    j + 1
                ))),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(Error::Data(format!("need at least 2 data rows, found {}", rows.len())));
    }
    SeriesMatrix::from_rows(&rows)
}

/// Write a panel as CSV with a `s1,…,sM` header.
pub fn write_series_csv(path: &Path, y: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((1..=y.ncols()).map(|m| format!("s{m}")))?;
    for t in 0..y.nrows() {
        w.write_record(y.row(t).iter().map(|v| format!("{v:.17e}")))?;
    }
    w.flush()?;
    Ok(())
}

fn matrix_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect()
}

fn rows_matrix(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Data(format!("{what}: rows must have {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// JSON form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub schema_version: u32,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub q: usize,
    pub noise_mode: NoiseMode,
    pub breakpoints: Vec<Vec<usize>>,
    pub means: Vec<Vec<f64>>,
    /// `M × Q`, row-major.
    pub loadings: Vec<Vec<f64>>,
    pub loadings_note: String,
    pub noise_variances: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub loglik: f64,
    pub bic: f64,
    pub mbic: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitDocument {
    pub fn from_fit(y: &SeriesMatrix, fit: &ModelFit) -> Result<Self> {
        let f = &fit.factor;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            n: fit.segmentation.n(),
            m: fit.segmentation.m(),
            k: fit.k(),
            q: fit.q(),
            noise_mode: f.noise().mode(),
            breakpoints: fit.segmentation.all_breakpoints().to_vec(),
            means: fit.means.all().to_vec(),
            loadings: matrix_rows(f.loadings()),
            loadings_note: LOADINGS_NOTE.to_string(),
            noise_variances: f.psi().iter().copied().collect(),
            sigma: matrix_rows(&fit.sigma()),
            loglik: fit.loglik,
            bic: bic_q(y, fit)?,
            mbic: mbic_k(y, fit)?,
            iterations: fit.iterations,
            converged: fit.converged,
        })
    }

    pub fn segmentation(&self) -> Result<Segmentation> {
        Segmentation::new(self.n, self.breakpoints.clone())
    }

    pub fn factor(&self) -> Result<FactorParams> {
        let b = rows_matrix(&self.loadings, self.q, "loadings")?;
        if b.nrows() != self.m {
            return Err(Error::Data(format!("loadings must have {} rows", self.m)));
        }
        let noise = match self.noise_mode {
            NoiseMode::Homoscedastic => {
                let first = self.noise_variances.first().copied().unwrap_or(f64::NAN);
                if self.noise_variances.iter().any(|v| *v != first) {
                    return Err(Error::Data("homoscedastic fit with unequal noise variances".into()));
                }
                Noise::Homoscedastic(first)
            }
            NoiseMode::Heteroscedastic => Noise::Heteroscedastic(self.noise_variances.clone()),
        };
        FactorParams::new(b, noise)
    }

    /// Rebuild the model (the log-likelihood trace is not stored).
    pub fn to_fit(&self) -> Result<ModelFit> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!("unsupported schema_version {}", self.schema_version)));
        }
        let segmentation = self.segmentation()?;
        let means = SegmentMeans::new(self.means.clone());
        means.check_conforms(&segmentation)?;
        Ok(ModelFit {
            segmentation,
            means,
            factor: self.factor()?,
            loglik: self.loglik,
            iterations: self.iterations,
            converged: self.converged,
            loglik_trace: Vec::new(),
        })
    }
}

/// JSON form of a simulated ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDocument {
    pub schema_version: u32,
    pub config: SimConfig,
    pub replicate: u64,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub breakpoints: Vec<Vec<usize>>,
    pub means: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl TruthDocument {
    pub fn new(config: &SimConfig, replicate: u64, truth: &SimTruth) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config: *config,
            replicate,
            n: truth.segmentation.n(),
            m: truth.segmentation.m(),
            k: truth.segmentation.total_segments(),
            breakpoints: truth.segmentation.all_breakpoints().to_vec(),
            means: truth.means.all().to_vec(),
            sigma: matrix_rows(&truth.sigma),
        }
    }

    pub fn to_truth(&self) -> Result<SimTruth> {
        let segmentation = Segmentation::new(self.n, self.breakpoints.clone())?;
        let means = SegmentMeans::new(self.means.clone());
        let mean_matrix = crate::types::expand_means(&segmentation, &means)?;
        let sigma = rows_matrix(&self.sigma, self.m, "sigma")?;
        if sigma.nrows() != self.m {
            return Err(Error::Data(format!("sigma must be {0}x{0}", self.m)));
        }
        Ok(SimTruth { segmentation, means, sigma, mean_matrix })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Serialize rows to CSV with a header taken from the field names.
pub fn write_csv_rows<T: Serialize, W: Write>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
