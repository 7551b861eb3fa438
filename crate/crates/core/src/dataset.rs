//! Unit-level observational data: loading, validation, and preparation.
//!
//! A [`Dataset`] holds named covariate columns, a binary treatment indicator,
//! a real outcome, and optional per-unit weights. Missing covariate cells are
//! recorded at load time and resolved by [`Dataset::prepare`], which
//! mean-imputes them and appends a per-column imputation indicator. Units
//! missing treatment or outcome are dropped during preparation.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of a column in the input file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Covariate,
    Treatment,
    Outcome,
    Weight,
    Id,
}

/// Declared schema for one input column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Optional closed interval cells must fall in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_range: Option<(f64, f64)>,
}

impl ColumnSchema {
    pub fn new(name: &str, kind: ColumnKind) -> Self {
        ColumnSchema {
            name: name.to_string(),
            kind,
            declared_range: None,
        }
    }

    pub fn with_range(mut self, low: f64, high: f64) -> Self {
        self.declared_range = Some((low, high));
        self
    }
}

fn validate_schema(schema: &[ColumnSchema]) -> Result<()> {
    let count = |k: ColumnKind| schema.iter().filter(|c| c.kind == k).count();
    if count(ColumnKind::Treatment) != 1 {
        return Err(Error::InvalidSchema(
            "exactly one treatment column required".into(),
        ));
    }
    if count(ColumnKind::Outcome) != 1 {
        return Err(Error::InvalidSchema(
            "exactly one outcome column required".into(),
        ));
    }
    if count(ColumnKind::Covariate) == 0 {
        return Err(Error::InvalidSchema(
            "at least one covariate column required".into(),
        ));
    }
    if count(ColumnKind::Weight) > 1 || count(ColumnKind::Id) > 1 {
        return Err(Error::InvalidSchema(
            "at most one weight and one id column allowed".into(),
        ));
    }
    let mut seen = HashSet::new();
    for col in schema {
        if !seen.insert(col.name.as_str()) {
            return Err(Error::InvalidSchema(format!(
                "duplicate column name '{}'",
                col.name
            )));
        }
    }
    Ok(())
}

/// One named covariate column. `missing[i]` marks cells that were absent in
/// the input (pre-preparation) or imputed (post-preparation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl Column {
    pub fn observed(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.missing)
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
    }
}

/// Unit-level observational data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub unit_ids: Vec<String>,
    pub covariates: Vec<Column>,
    /// Binary treatment; u8::MAX marks a missing cell before preparation.
    pub treatment: Vec<u8>,
    /// Outcome; NaN marks a missing cell before preparation.
    pub outcome: Vec<f64>,
    pub weight: Vec<f64>,
    prepared: bool,
    /// Units removed by `prepare` for missing treatment/outcome.
    pub dropped_units: usize,
}

pub const MISSING_TREATMENT: u8 = u8::MAX;

impl Dataset {
    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_prepared(&self) -> bool {
        self.prepared
    }

    pub fn covariate(&self, name: &str) -> Option<&Column> {
        self.covariates.iter().find(|c| c.name == name)
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&i| self.treatment[i] == 1).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&i| self.treatment[i] == 0).collect()
    }

    /// Build a dataset directly from columns. Intended for synthetic data
    /// and tests; everything is validated as if loaded from a file.
    pub fn from_parts(
        unit_ids: Vec<String>,
        covariates: Vec<Column>,
        treatment: Vec<u8>,
        outcome: Vec<f64>,
        weight: Option<Vec<f64>>,
    ) -> Result<Dataset> {
        let n = unit_ids.len();
        let weight = weight.unwrap_or_else(|| vec![1.0; n]);
        if treatment.len() != n || outcome.len() != n || weight.len() != n {
            return Err(Error::InvalidSchema("column lengths differ".into()));
        }
        for col in &covariates {
            if col.values.len() != n || col.missing.len() != n {
                return Err(Error::InvalidSchema(format!(
                    "column '{}' length differs from unit count",
                    col.name
                )));
            }
        }
        let mut seen = HashSet::new();
        for id in &unit_ids {
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateUnitId { id: id.clone() });
            }
        }
        for (row, &d) in treatment.iter().enumerate() {
            if d != 0 && d != 1 && d != MISSING_TREATMENT {
                return Err(Error::NonBinaryTreatment {
                    row,
                    column: "treatment".into(),
                    value: d.to_string(),
                });
            }
        }
        for (row, &y) in outcome.iter().enumerate() {
            if y.is_infinite() {
                return Err(Error::UnparseableCell {
                    row,
                    column: "outcome".into(),
                    value: y.to_string(),
                });
            }
        }
        let no_missing = covariates.iter().all(|c| c.missing.iter().all(|&m| !m))
            && treatment.iter().all(|&d| d != MISSING_TREATMENT)
            && outcome.iter().all(|y| !y.is_nan());
        Ok(Dataset {
            unit_ids,
            covariates,
            treatment,
            outcome,
            weight,
            prepared: no_missing,
            dropped_units: 0,
        })
    }

    /// Retain only the units at `indices` (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick_f = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            unit_ids: indices.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|c| Column {
                    name: c.name.clone(),
                    values: pick_f(&c.values),
                    missing: indices.iter().map(|&i| c.missing[i]).collect(),
                })
                .collect(),
            treatment: indices.iter().map(|&i| self.treatment[i]).collect(),
            outcome: pick_f(&self.outcome),
            weight: pick_f(&self.weight),
            prepared: self.prepared,
            dropped_units: 0,
        }
    }

    /// Weighted covariate means, the only place unit weights are consumed.
    pub fn weighted_covariate_means(&self) -> Vec<(String, f64)> {
        let wsum: f64 = self.weight.iter().sum();
        self.covariates
            .iter()
            .map(|c| {
                let m = c
                    .values
                    .iter()
                    .zip(&self.weight)
                    .map(|(v, w)| v * w)
                    .sum::<f64>()
                    / wsum;
                (c.name.clone(), m)
            })
            .collect()
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let trimmed = raw.trim();
    if trimmed.is_empty() || trimmed == "NA" {
        return Ok(None);
    }
    trimmed
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::UnparseableCell {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        })
}

/// Load a CSV file against a declared schema.
///
/// Missing cells (empty or "NA") are recorded but not imputed; call
/// [`Dataset::prepare`] afterwards. Rows are 1-indexed in error messages,
/// excluding the header.
pub fn load_csv<P: AsRef<Path>>(path: P, schema: &[ColumnSchema]) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    load_csv_reader(file, schema)
}

pub fn load_csv_reader<R: Read>(reader: R, schema: &[ColumnSchema]) -> Result<Dataset> {
    validate_schema(schema)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let header_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };

    let mut col_pos = Vec::with_capacity(schema.len());
    for col in schema {
        col_pos.push(header_index(&col.name)?);
    }

    let mut unit_ids: Vec<String> = Vec::new();
    let mut treatment: Vec<u8> = Vec::new();
    let mut outcome: Vec<f64> = Vec::new();
    let mut weight: Vec<f64> = Vec::new();
    let mut covariates: Vec<Column> = schema
        .iter()
        .filter(|c| c.kind == ColumnKind::Covariate)
        .map(|c| Column {
            name: c.name.clone(),
            values: Vec::new(),
            missing: Vec::new(),
        })
        .collect();

    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        let row = row_idx + 1;
        let mut cov_slot = 0usize;
        let mut saw_id = false;
        for (col, &pos) in schema.iter().zip(&col_pos) {
            let raw = record.get(pos).unwrap_or("");
            match col.kind {
                ColumnKind::Id => {
                    unit_ids.push(raw.trim().to_string());
                    saw_id = true;
                }
                ColumnKind::Treatment => {
                    let cell = parse_cell(raw, row, &col.name)?;
                    match cell {
                        None => treatment.push(MISSING_TREATMENT),
                        Some(v) if v == 0.0 => treatment.push(0),
                        Some(v) if v == 1.0 => treatment.push(1),
                        Some(_) => {
                            return Err(Error::NonBinaryTreatment {
                                row,
                                column: col.name.clone(),
                                value: raw.to_string(),
                            })
                        }
                    }
                }
                ColumnKind::Outcome => {
                    let cell = parse_cell(raw, row, &col.name)?;
                    outcome.push(cell.unwrap_or(f64::NAN));
                }
                ColumnKind::Weight => {
                    let cell = parse_cell(raw, row, &col.name)?;
                    weight.push(cell.unwrap_or(1.0));
                }
                ColumnKind::Covariate => {
                    let cell = parse_cell(raw, row, &col.name)?;
                    if let (Some(v), Some((lo, hi))) = (cell, col.declared_range) {
                        if v < lo || v > hi {
                            return Err(Error::OutOfRange {
                                row,
                                column: col.name.clone(),
                                value: v,
                                low: lo,
                                high: hi,
                            });
                        }
                    }
                    let c = &mut covariates[cov_slot];
                    c.values.push(cell.unwrap_or(f64::NAN));
                    c.missing.push(cell.is_none());
                    cov_slot += 1;
                }
            }
        }
        if !saw_id {
            unit_ids.push(row_idx.to_string());
        }
    }

    let n = unit_ids.len();
    if weight.is_empty() {
        weight = vec![1.0; n];
    }
    let mut seen = HashSet::new();
    for id in &unit_ids {
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateUnitId { id: id.clone() });
        }
    }
    let prepared = covariates.iter().all(|c| c.missing.iter().all(|&m| !m))
        && treatment.iter().all(|&d| d != MISSING_TREATMENT)
        && outcome.iter().all(|y| !y.is_nan());

    Ok(Dataset {
        unit_ids,
        covariates,
        treatment,
        outcome,
        weight,
        prepared,
        dropped_units: 0,
    })
}

/// Imputation policy for missing covariate cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputePolicy {
    /// Replace with the column mean over observed cells and flag the unit.
    #[default]
    Mean,
}

/// Resolve missing data: drop units missing treatment or outcome, mean-impute
/// missing covariate cells, and append one 0/1 indicator column per covariate
/// that had any missing cell. Idempotent.
pub fn prepare(ds: &Dataset, _policy: ImputePolicy) -> Result<Dataset> {
    let keep: Vec<usize> = (0..ds.n_units())
        .filter(|&i| ds.treatment[i] != MISSING_TREATMENT && !ds.outcome[i].is_nan())
        .collect();
    let dropped = ds.n_units() - keep.len();
    let mut out = ds.subset(&keep);
    out.dropped_units = ds.dropped_units + dropped;

    let mut indicators: Vec<Column> = Vec::new();
    for col in &mut out.covariates {
        if col.missing.iter().any(|&m| m) {
            let observed: Vec<f64> = col.observed().collect();
            if observed.is_empty() {
                return Err(Error::AllMissing {
                    column: col.name.clone(),
                });
            }
            let mean = observed.iter().sum::<f64>() / observed.len() as f64;
            let flag_name = format!("{}_imputed", col.name);
            if out_has_indicator(&indicators, &flag_name) {
                return Err(Error::InvalidSchema(format!(
                    "indicator column '{flag_name}' already exists"
                )));
            }
            let mut flags = vec![0.0; col.values.len()];
            for (i, m) in col.missing.iter_mut().enumerate() {
                if *m {
                    col.values[i] = mean;
                    flags[i] = 1.0;
                    *m = false;
                }
            }
            indicators.push(Column {
                name: flag_name,
                values: flags,
                missing: vec![false; col.values.len()],
            });
        }
    }
    out.covariates.extend(indicators);
    out.prepared = true;
    Ok(out)
}

fn out_has_indicator(indicators: &[Column], name: &str) -> bool {
    indicators.iter().any(|c| c.name == name)
}

/// Write a prepared dataset as CSV. Floats use the shortest representation
/// that parses back to the identical value, so a write/reload round trip is
/// bit-exact.
pub fn write_csv<W: std::io::Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend(ds.covariates.iter().map(|c| c.name.clone()));
    header.push("treatment".into());
    header.push("outcome".into());
    header.push("weight".into());
    wtr.write_record(&header)?;
    for i in 0..ds.n_units() {
        let mut rec = vec![ds.unit_ids[i].clone()];
        for c in &ds.covariates {
            rec.push(if c.missing[i] && !ds.prepared {
                String::new()
            } else {
                format!("{}", c.values[i])
            });
        }
        rec.push(format!("{}", ds.treatment[i]));
        rec.push(format!("{}", ds.outcome[i]));
        rec.push(format!("{}", ds.weight[i]));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Schema matching the output of [`write_csv`].
pub fn written_schema(ds: &Dataset) -> Vec<ColumnSchema> {
    let mut schema = vec![ColumnSchema::new("id", ColumnKind::Id)];
    for c in &ds.covariates {
        schema.push(ColumnSchema::new(&c.name, ColumnKind::Covariate));
    }
    schema.push(ColumnSchema::new("treatment", ColumnKind::Treatment));
    schema.push(ColumnSchema::new("outcome", ColumnKind::Outcome));
    schema.push(ColumnSchema::new("weight", ColumnKind::Weight));
    schema
}

/// JSON export of a prepared dataset, imputation flags included.
pub fn to_json(ds: &Dataset) -> Result<String> {
    if !ds.prepared {
        return Err(Error::NotPrepared { op: "json export" });
    }
    Ok(serde_json::to_string_pretty(ds)?)
}
