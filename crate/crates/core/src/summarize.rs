//! Per-unit Gaussian summaries `(Z_i, S_i²)` and their CSV ingestion.
//!
//! A unit is either supplied directly as a `(z, s2)` pair or summarized
//! from replicate measurements through an ordinary least squares contrast
//! against a shared design matrix.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::DegreesOfFreedom;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryPair {
    pub id: String,
    /// Effect estimate.
    pub z: f64,
    /// Squared standard error of `z`.
    pub s2: f64,
}

impl SummaryPair {
    pub fn new(id: impl Into<String>, z: f64, s2: f64) -> Result<Self> {
        if !z.is_finite() {
            return Err(Error::Input(format!("z must be finite, got {z}")));
        }
        if !(s2 > 0.0) || !s2.is_finite() {
            return Err(Error::Input(format!("s2 must be positive and finite, got {s2}")));
        }
        Ok(Self { id: id.into(), z, s2 })
    }
}

/// An ordered collection of summaries sharing one residual degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryDataset {
    pairs: Vec<SummaryPair>,
    nu: DegreesOfFreedom,
}

impl SummaryDataset {
    pub fn new(pairs: Vec<SummaryPair>, nu: DegreesOfFreedom) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Input(format!("duplicate id {:?} at position {}", p.id, i + 1)));
            }
            if !(p.s2 > 0.0) || !p.z.is_finite() {
                return Err(Error::Input(format!("invalid summary for id {:?}", p.id)));
            }
        }
        Ok(Self { pairs, nu })
    }

    /// Builds a dataset from bare vectors, naming units `1..=n`.
    pub fn from_vectors(z: &[f64], s2: &[f64], nu: DegreesOfFreedom) -> Result<Self> {
        if z.len() != s2.len() {
            return Err(Error::Dimension(format!("{} z values but {} s2 values", z.len(), s2.len())));
        }
        let pairs = z
            .iter()
            .zip(s2)
            .enumerate()
            .map(|(i, (&z, &s2))| SummaryPair::new((i + 1).to_string(), z, s2))
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs, nu)
    }

    pub fn pairs(&self) -> &[SummaryPair] {
        &self.pairs
    }

    pub fn nu(&self) -> DegreesOfFreedom {
        self.nu
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn z_values(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.z).collect()
    }

    pub fn s2_values(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.s2).collect()
    }

    /// Concatenates two datasets with the same degrees of freedom.
    pub fn concat(&self, other: &SummaryDataset) -> Result<Self> {
        if self.nu != other.nu {
            return Err(Error::Input("cannot concatenate datasets with different df".into()));
        }
        let mut pairs = self.pairs.clone();
        pairs.extend(other.pairs.iter().cloned());
        Self::new(pairs, self.nu)
    }
}

/// Result of summarizing one unit against a design and contrast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastSummary {
    pub z: f64,
    pub s2: f64,
    pub nu: f64,
}

/// Precomputed least-squares machinery for a fixed design and contrast.
///
/// The thin QR factorization `X = QR` gives `β̂ = R⁻¹Qᵀy` and
/// `cᵀ(XᵀX)⁻¹c = ‖R⁻ᵀc‖²`, so every unit costs one projection.
#[derive(Debug, Clone)]
pub struct ContrastFit {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    contrast: DVector<f64>,
    scale: f64,
    k: usize,
    p: usize,
}

impl ContrastFit {
    pub fn new(design: &DMatrix<f64>, contrast: &[f64]) -> Result<Self> {
        let (k, p) = design.shape();
        if k <= p {
            return Err(Error::Input(format!(
                "need more samples than covariates, got K={k} and p={p}"
            )));
        }
        if contrast.len() != p {
            return Err(Error::Dimension(format!(
                "contrast has length {} but design has {p} columns",
                contrast.len()
            )));
        }
        let qr = design.clone().qr();
        let r = qr.r();
        let q = qr.q();
        let max_diag = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
        let min_diag = (0..p).map(|j| r[(j, j)].abs()).fold(f64::INFINITY, f64::min);
        if !(min_diag > max_diag * 1e-10) {
            return Err(Error::RankDeficient(format!(
                "R diagonal spans [{min_diag:e}, {max_diag:e}]"
            )));
        }
        let contrast = DVector::from_column_slice(contrast);
        let w = r
            .transpose()
            .solve_lower_triangular(&contrast)
            .ok_or_else(|| Error::RankDeficient("triangular solve failed".into()))?;
        Ok(Self {
            q,
            r,
            contrast,
            scale: w.norm_squared(),
            k,
            p,
        })
    }

    pub fn df(&self) -> usize {
        self.k - self.p
    }

    pub fn summarize(&self, y: &[f64]) -> Result<ContrastSummary> {
        if y.len() != self.k {
            return Err(Error::Dimension(format!("expected {} responses, got {}", self.k, y.len())));
        }
        let y = DVector::from_column_slice(y);
        let qty = self.q.transpose() * &y;
        let beta = self
            .r
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::RankDeficient("triangular solve failed".into()))?;
        let fitted = &self.q * &qty;
        let rss = (&y - fitted).norm_squared();
        let z = self.contrast.dot(&beta);
        let s2 = self.scale * rss / self.df() as f64;
        // Residuals at rounding level count as exact zeros.
        let y_scale = y.norm_squared().max(f64::MIN_POSITIVE);
        if !(s2 > 0.0) || rss <= 1e-24 * y_scale {
            return Err(Error::DegenerateVariance(format!("s2 = {s2:e} (rss = {rss:e})")));
        }
        Ok(ContrastSummary {
            z,
            s2,
            nu: self.df() as f64,
        })
    }
}

/// Summarizes one unit: OLS contrast estimate, its squared standard error
/// and the residual degrees of freedom `K - p`.
pub fn summarize_contrast(y: &[f64], design: &DMatrix<f64>, contrast: &[f64]) -> Result<ContrastSummary> {
    ContrastFit::new(design, contrast)?.summarize(y)
}

/// Reads a pairs CSV with header `id,z,s2`.
pub fn read_pairs(path: &Path, nu: DegreesOfFreedom) -> Result<SummaryDataset> {
    let file = File::open(path)?;
    read_pairs_from(file, path, nu)
}

pub fn read_pairs_from<R: Read>(reader: R, path: &Path, nu: DegreesOfFreedom) -> Result<SummaryDataset> {
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let header_line = rdr.position().line().saturating_sub(1).max(1);
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(header_line as usize, format!("missing column {name:?}")))
    };
    let (id_col, z_col, s2_col) = (column("id")?, column("z")?, column("s2")?);

    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line() as usize);
            parse_err(row, e.to_string())
        })?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let field = |col: usize, name: &str| {
            record
                .get(col)
                .ok_or_else(|| parse_err(row, format!("missing field {name:?}")))
        };
        let number = |col: usize, name: &str| -> Result<f64> {
            let raw = field(col, name)?;
            raw.parse::<f64>()
                .map_err(|_| parse_err(row, format!("{name} is not a number: {raw:?}")))
        };
        let id = field(id_col, "id")?.to_string();
        let z = number(z_col, "z")?;
        let s2 = number(s2_col, "s2")?;
        if !z.is_finite() {
            return Err(parse_err(row, format!("z must be finite, got {z}")));
        }
        if !(s2 > 0.0) || !s2.is_finite() {
            return Err(parse_err(row, format!("s2 must be positive, got {s2}")));
        }
        if !seen.insert(id.clone()) {
            return Err(parse_err(row, format!("duplicate id {id:?}")));
        }
        pairs.push(SummaryPair { id, z, s2 });
    }
    SummaryDataset::new(pairs, nu)
}

/// Degrees of freedom from a `# df=<value>` metadata line at the top of a
/// pairs file, if there is one.
pub fn pairs_metadata_df(text: &str) -> Result<Option<f64>> {
    for line in text.lines() {
        let Some(meta) = line.trim().strip_prefix('#') else { break };
        let Some((key, value)) = meta.split_once('=') else { continue };
        if matches!(key.trim(), "df" | "nu") {
            let value = value.trim();
            return value
                .parse()
                .map(Some)
                .map_err(|_| Error::Input(format!("metadata df is not a number: {value:?}")));
        }
    }
    Ok(None)
}

/// Reads a pairs file whose degrees of freedom come from `df` or, failing
/// that, from its metadata line.
pub fn read_pairs_with_df(path: &Path, df: Option<f64>) -> Result<SummaryDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let nu = match (df, pairs_metadata_df(&text)?) {
        (Some(flag), meta) => {
            if meta.is_some_and(|m| m != flag) {
                warn!("--df {flag} overrides the file's metadata df");
            }
            flag
        }
        (None, Some(meta)) => meta,
        (None, None) => {
            return Err(Error::Input(format!(
                "{}: degrees of freedom not given; pass --df or add a '# df=<value>' line",
                path.display()
            )))
        }
    };
    read_pairs_from(text.as_bytes(), path, DegreesOfFreedom::sampling(nu)?)
}

/// Writes a pairs CSV preceded by a `# df=<value>` metadata line.
pub fn write_pairs_with_df<W: Write>(mut writer: W, dataset: &SummaryDataset) -> Result<()> {
    writeln!(writer, "# df={}", dataset.nu().get())?;
    write_pairs(writer, dataset)
}

/// Writes a pairs CSV. Floats use the shortest representation that
/// parses back to the same bits.
pub fn write_pairs<W: Write>(writer: W, dataset: &SummaryDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "z", "s2"])?;
    for p in dataset.pairs() {
        w.write_record([p.id.as_str(), &p.z.to_string(), &p.s2.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of matrix-mode ingestion.
#[derive(Debug, Clone)]
pub struct MatrixSummary {
    pub dataset: SummaryDataset,
    /// Ids of units dropped for an exactly zero residual sum of squares.
    pub dropped: Vec<String>,
}

/// Reads a replicate matrix (`id,y1,...,yK`) and a design CSV (one row per
/// sample, header of covariate names) and summarizes each unit.
pub fn read_matrix(matrix_path: &Path, design_path: &Path, contrast: &[f64]) -> Result<MatrixSummary> {
    let design = read_design(design_path)?;
    let fit = ContrastFit::new(&design, contrast)?;
    let nu = DegreesOfFreedom::sampling(fit.df() as f64)?;

    let parse_err = |row: usize, message: String| Error::Parse {
        path: matrix_path.to_path_buf(),
        row,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(matrix_path)?;
    let width = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.len();
    if width != design.nrows() + 1 {
        return Err(Error::Dimension(format!(
            "matrix has {} sample columns but design has {} rows",
            width.saturating_sub(1),
            design.nrows()
        )));
    }
    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    let mut y = vec![0.0; design.nrows()];
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        let id = record.get(0).unwrap_or_default().to_string();
        for (k, slot) in y.iter_mut().enumerate() {
            let raw = record.get(k + 1).unwrap_or_default();
            *slot = raw
                .parse()
                .map_err(|_| parse_err(row, format!("sample {} is not a number: {raw:?}", k + 1)))?;
        }
        match fit.summarize(&y) {
            Ok(s) => pairs.push(SummaryPair::new(id, s.z, s.s2).map_err(|e| parse_err(row, e.to_string()))?),
            Err(Error::DegenerateVariance(_)) => dropped.push(id),
            Err(e) => return Err(e),
        }
    }
    if !dropped.is_empty() {
        warn!("dropped {} unit(s) with zero residual variance", dropped.len());
    }
    Ok(MatrixSummary {
        dataset: SummaryDataset::new(pairs, nu)?,
        dropped,
    })
}

/// Reads a numeric design matrix; the header row names the covariates.
pub fn read_design(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let p = rdr.headers()?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != p {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: i + 2,
                message: format!("expected {p} columns, found {}", record.len()),
            });
        }
        for raw in record.iter() {
            values.push(raw.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: i + 2,
                message: format!("not a number: {raw:?}"),
            })?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, p, &values))
}

/// Parses a `--contrast` value such as `0,1,-1`.
pub fn parse_contrast(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Input(format!("contrast entry is not a number: {s:?}")))
        })
        .collect()
}
