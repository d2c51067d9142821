//! Observation data model for three-period panels with a partially
//! missing middle-period treatment, plus CSV ingestion and summaries.
//!
//! Each observation carries the outcome change `delta_y = y2 - y0`, the
//! final-period treatment `d2`, the observability indicator `s`, the
//! middle-period treatment `d1` (present iff `s = 1`), and a covariate
//! vector whose first entry is the constant 1.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A binary treatment path (d1, d2). The comparison path is always (0,0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreatmentPath {
    pub d1: u8,
    pub d2: u8,
}

impl TreatmentPath {
    pub const fn new(d1: u8, d2: u8) -> Self {
        TreatmentPath { d1, d2 }
    }

    /// The never-treated comparison path (0,0).
    pub const NEVER: TreatmentPath = TreatmentPath { d1: 0, d2: 0 };

    /// The three admissible target paths.
    pub const TARGETS: [TreatmentPath; 3] =
        [TreatmentPath::new(1, 1), TreatmentPath::new(1, 0), TreatmentPath::new(0, 1)];

    /// Compact tag used in tables, e.g. "11-00".
    pub fn tag(&self) -> String {
        format!("{}{}-00", self.d1, self.d2)
    }
}

impl fmt::Display for TreatmentPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.d1, self.d2)
    }
}

impl std::str::FromStr for TreatmentPath {
    type Err = Error;

    /// Accepts "11", "10", "01" and the long forms "11-00" etc.
    fn from_str(s: &str) -> Result<Self> {
        let short = s.trim().trim_end_matches("-00");
        match short {
            "11" => Ok(TreatmentPath::new(1, 1)),
            "10" => Ok(TreatmentPath::new(1, 0)),
            "01" => Ok(TreatmentPath::new(0, 1)),
            other => Err(Error::Validation(format!(
                "unknown treatment path '{other}' (expected 11, 10 or 01)"
            ))),
        }
    }
}

/// Which PDATT to estimate and at what confidence level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub d: TreatmentPath,
    pub d_prime: TreatmentPath,
    pub level: f64,
}

impl EstimandSpec {
    /// Target path versus never-treated at the default 95% level.
    pub fn new(d: TreatmentPath) -> Result<Self> {
        Self::with_level(d, 0.95)
    }

    pub fn with_level(d: TreatmentPath, level: f64) -> Result<Self> {
        if d == TreatmentPath::NEVER {
            return Err(Error::Validation("target path must differ from (0,0)".into()));
        }
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Validation("confidence level must be in (0,1)".into()));
        }
        Ok(EstimandSpec { d, d_prime: TreatmentPath::NEVER, level })
    }
}

/// Borrowed view of one observation.
#[derive(Debug, Clone, Copy)]
pub struct ObservationRecord<'a> {
    pub delta_y: f64,
    pub s: u8,
    /// Present iff `s == 1`.
    pub d1: Option<u8>,
    pub d2: u8,
    pub x: &'a [f64],
}

/// An immutable sample of n observations with k covariates (intercept
/// first). Stored column-wise; `records()` yields row views.
#[derive(Debug, Clone)]
pub struct PanelSample {
    delta_y: Vec<f64>,
    s: Vec<u8>,
    d1: Vec<u8>, // meaningful only where s == 1
    d2: Vec<u8>,
    x: Vec<f64>, // row-major n * k
    k: usize,
    column_names: Vec<String>,
    /// Raw final-period outcome, retained only when the schema maps it;
    /// required by the partial-identification bounds.
    y2: Option<Vec<f64>>,
}

impl PanelSample {
    /// Build a sample from columns. `d1` entries are read only where
    /// `s == 1`; pass 0 elsewhere. The covariate block is row-major with
    /// `x.len() == n * k`; a leading constant column is required.
    pub fn from_columns(
        delta_y: Vec<f64>,
        s: Vec<u8>,
        d1: Vec<u8>,
        d2: Vec<u8>,
        x: Vec<f64>,
        k: usize,
        column_names: Vec<String>,
        y2: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = delta_y.len();
        if n == 0 {
            return Err(Error::Validation("sample must contain at least one record".into()));
        }
        if s.len() != n || d1.len() != n || d2.len() != n || x.len() != n * k {
            return Err(Error::Validation("column lengths are inconsistent".into()));
        }
        if let Some(y2col) = &y2 {
            if y2col.len() != n {
                return Err(Error::Validation("y2 column length mismatch".into()));
            }
        }
        if column_names.len() != k {
            return Err(Error::Validation("need one column name per covariate".into()));
        }
        for i in 0..n {
            if s[i] > 1 || d2[i] > 1 {
                return Err(Error::Validation(format!("non-binary s or d2 at row {i}")));
            }
            if s[i] == 1 && d1[i] > 1 {
                return Err(Error::Validation(format!("non-binary d1 at row {i}")));
            }
            if !delta_y[i].is_finite() {
                return Err(Error::Validation(format!("non-finite delta_y at row {i}")));
            }
            if x[i * k] != 1.0 {
                return Err(Error::Validation(format!(
                    "covariate vector must start with the constant 1 (row {i})"
                )));
            }
        }
        Ok(PanelSample { delta_y, s, d1, d2, x, k, column_names, y2 })
    }

    pub fn n(&self) -> usize {
        self.delta_y.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn delta_y(&self) -> &[f64] {
        &self.delta_y
    }

    pub fn s(&self) -> &[u8] {
        &self.s
    }

    pub fn d2(&self) -> &[u8] {
        &self.d2
    }

    pub fn y2(&self) -> Option<&[f64]> {
        self.y2.as_deref()
    }

    /// Middle-period treatment, observable only when s = 1.
    #[inline]
    pub fn d1(&self, i: usize) -> Option<u8> {
        if self.s[i] == 1 {
            Some(self.d1[i])
        } else {
            None
        }
    }

    /// `S * 1[D = d]` for a full path; zero whenever d1 is unobserved.
    #[inline]
    pub fn s_on_path(&self, i: usize, path: TreatmentPath) -> bool {
        self.s[i] == 1 && self.d1[i] == path.d1 && self.d2[i] == path.d2
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.k..(i + 1) * self.k]
    }

    pub fn record(&self, i: usize) -> ObservationRecord<'_> {
        ObservationRecord {
            delta_y: self.delta_y[i],
            s: self.s[i],
            d1: self.d1(i),
            d2: self.d2[i],
            x: self.row(i),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = ObservationRecord<'_>> {
        (0..self.n()).map(move |i| self.record(i))
    }

    /// The complete-case subsample (rows with s = 1), preserving order.
    pub fn complete_cases(&self) -> Result<PanelSample> {
        let keep: Vec<usize> = (0..self.n()).filter(|&i| self.s[i] == 1).collect();
        if keep.is_empty() {
            return Err(Error::EmptyCell("no complete cases (all d1 missing)".into()));
        }
        let mut x = Vec::with_capacity(keep.len() * self.k);
        for &i in &keep {
            x.extend_from_slice(self.row(i));
        }
        PanelSample::from_columns(
            keep.iter().map(|&i| self.delta_y[i]).collect(),
            vec![1; keep.len()],
            keep.iter().map(|&i| self.d1[i]).collect(),
            keep.iter().map(|&i| self.d2[i]).collect(),
            x,
            self.k,
            self.column_names.clone(),
            self.y2.as_ref().map(|col| keep.iter().map(|&i| col[i]).collect()),
        )
    }
}

/// Maps CSV column names onto the panel schema. Either `delta_y`, or both
/// `y0` and `y2`, must be provided.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CsvSchema {
    pub delta_y: Option<String>,
    pub y0: Option<String>,
    pub y2: Option<String>,
    pub d1: String,
    pub d2: String,
    /// Optional explicit observability column; must agree with d1's
    /// missingness when mapped.
    pub s: Option<String>,
    pub covariates: Vec<String>,
}

fn is_missing_token(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

fn parse_num(field: &str, row: usize, col: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        row,
        message: format!("column '{col}': cannot parse '{field}' as a number"),
    })
}

fn parse_binary(field: &str, row: usize, col: &str) -> Result<u8> {
    let v = parse_num(field, row, col)?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::Validation(format!("column '{col}' must be 0/1, found {v} at row {row}")))
    }
}

/// Load a panel from a headered CSV file.
///
/// A missing token (empty, "NA", "NaN") in the d1 column forces s = 0; a
/// present value forces s = 1. An explicit s column, when mapped, must
/// agree. The constant column is prepended automatically.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelSample> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path.as_ref())
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.as_ref().display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { row: 0, message: e.to_string() })?
        .clone();
    let col_idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("mapped column '{name}' not in header")))
    };

    let use_delta = schema.delta_y.is_some();
    if !use_delta && (schema.y0.is_none() || schema.y2.is_none()) {
        return Err(Error::Validation(
            "schema must map either delta_y or both y0 and y2".into(),
        ));
    }
    let idx_dy = schema.delta_y.as_deref().map(col_idx).transpose()?;
    let idx_y0 = schema.y0.as_deref().map(col_idx).transpose()?;
    let idx_y2 = schema.y2.as_deref().map(col_idx).transpose()?;
    let idx_d1 = col_idx(&schema.d1)?;
    let idx_d2 = col_idx(&schema.d2)?;
    let idx_s = schema.s.as_deref().map(col_idx).transpose()?;
    let idx_x: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col_idx(c))
        .collect::<Result<_>>()?;

    let k = idx_x.len() + 1;
    let mut delta_y = Vec::new();
    let mut s = Vec::new();
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    let mut x = Vec::new();
    let mut y2 = idx_y2.map(|_| Vec::new());

    for (r, rec) in reader.records().enumerate() {
        let row = r + 1; // 1-based data rows, header is row 0
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let field = |idx: usize| -> &str { rec.get(idx).unwrap_or("") };

        let dy = if let Some(i) = idx_dy {
            parse_num(field(i), row, schema.delta_y.as_deref().unwrap())?
        } else {
            let v0 = parse_num(field(idx_y0.unwrap()), row, schema.y0.as_deref().unwrap())?;
            let v2 = parse_num(field(idx_y2.unwrap()), row, schema.y2.as_deref().unwrap())?;
            v2 - v0
        };
        delta_y.push(dy);
        if let (Some(col), Some(i)) = (y2.as_mut(), idx_y2) {
            col.push(parse_num(field(i), row, schema.y2.as_deref().unwrap())?);
        }

        let d1_field = field(idx_d1);
        let (si, d1i) = if is_missing_token(d1_field) {
            (0u8, 0u8)
        } else {
            (1u8, parse_binary(d1_field, row, &schema.d1)?)
        };
        if let Some(i) = idx_s {
            let s_explicit = parse_binary(field(i), row, schema.s.as_deref().unwrap())?;
            if s_explicit != si {
                return Err(Error::Validation(format!(
                    "row {row}: s column says {s_explicit} but d1 is {}",
                    if si == 1 { "present" } else { "missing" }
                )));
            }
        }
        s.push(si);
        d1.push(d1i);
        d2.push(parse_binary(field(idx_d2), row, &schema.d2)?);

        x.push(1.0);
        for (j, &i) in idx_x.iter().enumerate() {
            let f = field(i);
            if is_missing_token(f) {
                return Err(Error::Validation(format!(
                    "row {row}: missing value in covariate '{}' (only d1 may be missing)",
                    schema.covariates[j]
                )));
            }
            x.push(parse_num(f, row, &schema.covariates[j])?);
        }
    }

    let mut names = vec!["const".to_string()];
    names.extend(schema.covariates.iter().cloned());
    PanelSample::from_columns(delta_y, s, d1, d2, x, k, names, y2)
}

/// Write a sample to CSV. Numeric fields use the shortest representation
/// that round-trips exactly, so reloading reproduces the sample bit for
/// bit. Missing d1 is written as "NA".
pub fn write_csv(sample: &PanelSample, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())
        .map_err(|e| Error::Validation(format!("cannot create {}: {e}", path.as_ref().display())))?;
    let mut header = vec!["delta_y".to_string(), "d1".to_string(), "d2".to_string()];
    header.extend(sample.column_names().iter().skip(1).cloned());
    if sample.y2().is_some() {
        header.push("y2".to_string());
    }
    w.write_record(&header).map_err(|e| Error::Validation(e.to_string()))?;
    for i in 0..sample.n() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        rec.push(format!("{}", sample.delta_y()[i]));
        rec.push(match sample.d1(i) {
            Some(v) => format!("{v}"),
            None => "NA".to_string(),
        });
        rec.push(format!("{}", sample.d2()[i]));
        for j in 1..sample.k() {
            rec.push(format!("{}", sample.row(i)[j]));
        }
        if let Some(col) = sample.y2() {
            rec.push(format!("{}", col[i]));
        }
        w.write_record(&rec).map_err(|e| Error::Validation(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Schema matching `write_csv` output, handy for round trips.
pub fn written_schema(sample: &PanelSample) -> CsvSchema {
    CsvSchema {
        delta_y: Some("delta_y".into()),
        y0: None,
        y2: sample.y2().map(|_| "y2".to_string()),
        d1: "d1".into(),
        d2: "d2".into(),
        s: None,
        covariates: sample.column_names().iter().skip(1).cloned().collect(),
    }
}

/// Descriptive summary of a sample.
#[derive(Debug, Clone, Serialize)]
pub struct SampleSummary {
    pub n: usize,
    pub k: usize,
    /// mean(1 - S)
    pub missing_rate: f64,
    /// Counts for the six observable (s, d1, d2) cells; d1 is "?" when s=0.
    pub cell_counts: BTreeMap<String, usize>,
    /// Cells that are empty, flagged by name.
    pub empty_cells: Vec<String>,
    pub covariate_means: Vec<f64>,
    pub covariate_variances: Vec<f64>,
}

/// Report n, k, the missingness rate, (S, D1, D2) cell counts, and
/// covariate moments.
pub fn summarize(sample: &PanelSample) -> SampleSummary {
    let n = sample.n();
    let k = sample.k();
    let missing_rate =
        crate::stats::sum(sample.s().iter().map(|&v| 1.0 - v as f64)) / n as f64;

    let mut cell_counts: BTreeMap<String, usize> = BTreeMap::new();
    for d2 in [0u8, 1u8] {
        cell_counts.insert(format!("s=0,d1=?,d2={d2}"), 0);
        for d1 in [0u8, 1u8] {
            cell_counts.insert(format!("s=1,d1={d1},d2={d2}"), 0);
        }
    }
    for i in 0..n {
        let key = match sample.d1(i) {
            Some(d1) => format!("s=1,d1={d1},d2={}", sample.d2()[i]),
            None => format!("s=0,d1=?,d2={}", sample.d2()[i]),
        };
        *cell_counts.get_mut(&key).expect("cell key") += 1;
    }
    let empty_cells: Vec<String> =
        cell_counts.iter().filter(|(_, &c)| c == 0).map(|(k, _)| k.clone()).collect();

    let mut covariate_means = Vec::with_capacity(k);
    let mut covariate_variances = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<f64> = (0..n).map(|i| sample.row(i)[j]).collect();
        covariate_means.push(crate::stats::mean(&col));
        covariate_variances.push(crate::stats::variance(&col));
    }

    SampleSummary { n, k, missing_rate, cell_counts, empty_cells, covariate_means, covariate_variances }
}

impl fmt::Display for SampleSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n = {}, k = {}, missing d1 share = {:.4}", self.n, self.k, self.missing_rate)?;
        writeln!(f, "cells:")?;
        for (cell, count) in &self.cell_counts {
            writeln!(f, "  {cell}: {count}")?;
        }
        if !self.empty_cells.is_empty() {
            writeln!(f, "empty cells: {}", self.empty_cells.join(", "))?;
        }
        writeln!(f, "covariate mean / variance:")?;
        for j in 0..self.k {
            writeln!(
                f,
                "  x{j}: {:.6} / {:.6}",
                self.covariate_means[j], self.covariate_variances[j]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn basic_schema() -> CsvSchema {
        CsvSchema {
            delta_y: Some("dy".into()),
            y0: None,
            y2: None,
            d1: "d1".into(),
            d2: "d2".into(),
            s: None,
            covariates: vec!["z".into()],
        }
    }

    #[test]
    fn missing_tokens_set_s_zero() {
        let f = write_tmp("dy,d1,d2,z\n1.0,1,1,0.3\n2.0,NA,0,0.1\n3.0,0,1,-0.2\n4.0,1,0,0.9\n");
        let sample = load_csv(f.path(), &basic_schema()).unwrap();
        assert_eq!(sample.s(), &[1, 0, 1, 1]);
        assert_eq!(sample.d1(1), None);
        assert_eq!(sample.d1(0), Some(1));
        assert_eq!(sample.k(), 2);
        assert_eq!(sample.row(0), &[1.0, 0.3]);
    }

    #[test]
    fn y0_y2_collapse_to_delta() {
        let schema = CsvSchema {
            delta_y: None,
            y0: Some("y0".into()),
            y2: Some("y2".into()),
            d1: "d1".into(),
            d2: "d2".into(),
            s: None,
            covariates: vec![],
        };
        let f = write_tmp("y0,y2,d1,d2\n5.0,5.0,1,1\n-2.0,-2.0,0,0\n");
        let sample = load_csv(f.path(), &schema).unwrap();
        assert_eq!(sample.delta_y(), &[0.0, 0.0]);
        assert!(sample.y2().is_some());
    }

    #[test]
    fn inconsistent_s_column_rejected() {
        let schema = CsvSchema { s: Some("s".into()), ..basic_schema() };
        let f = write_tmp("dy,d1,d2,z,s\n1.0,NA,1,0.3,1\n");
        let err = load_csv(f.path(), &schema).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn non_binary_treatment_rejected() {
        let f = write_tmp("dy,d1,d2,z\n1.0,2,1,0.3\n");
        assert!(matches!(load_csv(f.path(), &basic_schema()), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_row_names_row_index() {
        let f = write_tmp("dy,d1,d2,z\n1.0,1,1,0.3\nxx,0,1,0.2\n");
        match load_csv(f.path(), &basic_schema()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn summarize_reports_missingness_and_cells() {
        let f = write_tmp("dy,d1,d2,z\n1.0,1,1,0.3\n2.0,NA,0,0.1\n3.0,0,1,-0.2\n4.0,1,0,0.9\n");
        let sample = load_csv(f.path(), &basic_schema()).unwrap();
        let summary = summarize(&sample);
        assert!((summary.missing_rate - 0.25).abs() < 1e-15);
        assert_eq!(summary.cell_counts["s=1,d1=1,d2=1"], 1);
        assert_eq!(summary.cell_counts["s=1,d1=1,d2=0"], 1);
        // no (s=1, d1=0, d2=0) record in this file
        assert!(summary.empty_cells.contains(&"s=1,d1=0,d2=0".to_string()));
    }

    #[test]
    fn all_observed_has_zero_missing_rate() {
        let f = write_tmp("dy,d1,d2,z\n1.0,1,1,0.3\n2.0,0,0,0.1\n");
        let sample = load_csv(f.path(), &basic_schema()).unwrap();
        assert_eq!(summarize(&sample).missing_rate, 0.0);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let f = write_tmp(
            "dy,d1,d2,z\n0.1234567890123456,1,1,0.3\n-2.5e-17,NA,0,0.1\n3.0,0,1,1e300\n",
        );
        let sample = load_csv(f.path(), &basic_schema()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&sample, out.path()).unwrap();
        let reloaded = load_csv(out.path(), &written_schema(&sample)).unwrap();
        assert_eq!(sample.delta_y(), reloaded.delta_y());
        assert_eq!(sample.s(), reloaded.s());
        assert_eq!(sample.d2(), reloaded.d2());
        for i in 0..sample.n() {
            assert_eq!(sample.row(i), reloaded.row(i));
            assert_eq!(sample.d1(i), reloaded.d1(i));
        }
    }
}
