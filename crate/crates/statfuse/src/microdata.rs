//! Weighted survey microdata: schema, validated in-memory table, CSV I/O.
//!
//! Tables are immutable after load. The contract is complete data: missing
//! cells are rejected, not imputed. Categorical cells must belong to the
//! levels declared in the schema, weights must be strictly positive, and id
//! values must be unique.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Categorical { levels: Vec<String> },
    Continuous,
    Semicontinuous,
}

impl ColumnKind {
    pub fn is_categorical(&self) -> bool {
        matches!(self, ColumnKind::Categorical { .. })
    }

    pub fn levels(&self) -> Option<&[String]> {
        match self {
            ColumnKind::Categorical { levels } => Some(levels),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Predictor,
    Fusion,
    Weight,
    ReplicateWeight,
    Id,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
}

impl ColumnSpec {
    pub fn continuous(name: &str, role: ColumnRole) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Continuous,
            role,
        }
    }

    pub fn semicontinuous(name: &str, role: ColumnRole) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Semicontinuous,
            role,
        }
    }

    pub fn categorical(name: &str, levels: &[&str], role: ColumnRole) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
            role,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    /// Continuous / semicontinuous / weight values.
    Numeric(Vec<f64>),
    /// Categorical level indices into the declared level list.
    Categorical(Vec<u32>),
    /// Row identifiers, stored verbatim.
    Id(Vec<String>),
}

/// A validated, immutable microdata table.
#[derive(Debug, Clone)]
pub struct Microdata {
    specs: Vec<ColumnSpec>,
    data: Vec<ColumnData>,
    n_rows: usize,
    weight_idx: usize,
    replicate_idx: Vec<usize>,
    id_idx: Option<usize>,
}

impl Microdata {
    /// Assemble a table from parallel columns, enforcing all invariants.
    pub fn from_columns(specs: Vec<ColumnSpec>, data: Vec<ColumnData>) -> Result<Self> {
        if specs.len() != data.len() {
            return Err(Error::Schema(format!(
                "{} column specs but {} data columns",
                specs.len(),
                data.len()
            )));
        }
        validate_specs(&specs)?;
        let n_rows = match data.first() {
            Some(ColumnData::Numeric(v)) => v.len(),
            Some(ColumnData::Categorical(v)) => v.len(),
            Some(ColumnData::Id(v)) => v.len(),
            None => return Err(Error::Schema("table has no columns".into())),
        };
        if n_rows == 0 {
            return Err(Error::Schema("table has no rows".into()));
        }
        let mut weight_idx = None;
        let mut replicate_idx = Vec::new();
        let mut id_idx = None;
        for (j, (spec, col)) in specs.iter().zip(&data).enumerate() {
            let len = match col {
                ColumnData::Numeric(v) => v.len(),
                ColumnData::Categorical(v) => v.len(),
                ColumnData::Id(v) => v.len(),
            };
            if len != n_rows {
                return Err(Error::Schema(format!(
                    "column '{}' has {} rows, expected {}",
                    spec.name, len, n_rows
                )));
            }
            match (spec.role, col) {
                (ColumnRole::Weight, ColumnData::Numeric(v)) => {
                    for (i, &w) in v.iter().enumerate() {
                        if !(w.is_finite() && w > 0.0) {
                            return Err(Error::Cell {
                                row: i,
                                column: spec.name.clone(),
                                message: format!("weight must be strictly positive, got {w}"),
                            });
                        }
                    }
                    weight_idx = Some(j);
                }
                (ColumnRole::ReplicateWeight, ColumnData::Numeric(v)) => {
                    for (i, &w) in v.iter().enumerate() {
                        if !(w.is_finite() && w >= 0.0) {
                            return Err(Error::Cell {
                                row: i,
                                column: spec.name.clone(),
                                message: format!("replicate weight must be non-negative, got {w}"),
                            });
                        }
                    }
                    replicate_idx.push(j);
                }
                (ColumnRole::Id, ColumnData::Id(v)) => {
                    let mut seen = HashSet::with_capacity(v.len());
                    for (i, id) in v.iter().enumerate() {
                        if !seen.insert(id.as_str()) {
                            return Err(Error::Cell {
                                row: i,
                                column: spec.name.clone(),
                                message: format!("duplicate id '{id}'"),
                            });
                        }
                    }
                    id_idx = Some(j);
                }
                (_, ColumnData::Categorical(v)) => {
                    let n_levels = spec
                        .kind
                        .levels()
                        .map(|l| l.len() as u32)
                        .ok_or_else(|| {
                            Error::Schema(format!(
                                "column '{}' holds categorical data but is not declared categorical",
                                spec.name
                            ))
                        })?;
                    for (i, &c) in v.iter().enumerate() {
                        if c >= n_levels {
                            return Err(Error::Cell {
                                row: i,
                                column: spec.name.clone(),
                                message: format!("level index {c} out of range"),
                            });
                        }
                    }
                }
                (_, ColumnData::Numeric(v)) => {
                    for (i, &x) in v.iter().enumerate() {
                        if !x.is_finite() {
                            return Err(Error::Cell {
                                row: i,
                                column: spec.name.clone(),
                                message: format!("non-finite value {x}"),
                            });
                        }
                    }
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "column '{}': storage does not match role {:?}",
                        spec.name, spec.role
                    )))
                }
            }
        }
        let weight_idx = weight_idx
            .ok_or_else(|| Error::Schema("table must declare exactly one weight column".into()))?;
        Ok(Microdata {
            specs,
            data,
            n_rows,
            weight_idx,
            replicate_idx,
            id_idx,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn specs(&self) -> &[ColumnSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&ColumnSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn column(&self, name: &str) -> Option<&ColumnData> {
        self.column_index(name).map(|j| &self.data[j])
    }

    /// Numeric values of a continuous/semicontinuous/weight column.
    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name) {
            Some(ColumnData::Numeric(v)) => Ok(v),
            Some(_) => Err(Error::Schema(format!("column '{name}' is not numeric"))),
            None => Err(Error::Schema(format!("no column named '{name}'"))),
        }
    }

    /// Level indices of a categorical column.
    pub fn categorical(&self, name: &str) -> Result<&[u32]> {
        match self.column(name) {
            Some(ColumnData::Categorical(v)) => Ok(v),
            Some(_) => Err(Error::Schema(format!("column '{name}' is not categorical"))),
            None => Err(Error::Schema(format!("no column named '{name}'"))),
        }
    }

    pub fn weights(&self) -> &[f64] {
        match &self.data[self.weight_idx] {
            ColumnData::Numeric(v) => v,
            _ => unreachable!("weight column is numeric by construction"),
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.specs[self.weight_idx].name
    }

    pub fn replicate_weight_names(&self) -> Vec<&str> {
        self.replicate_idx
            .iter()
            .map(|&j| self.specs[j].name.as_str())
            .collect()
    }

    pub fn replicate_weights(&self) -> Vec<&[f64]> {
        self.replicate_idx
            .iter()
            .map(|&j| match &self.data[j] {
                ColumnData::Numeric(v) => v.as_slice(),
                _ => unreachable!(),
            })
            .collect()
    }

    /// Stable row identifier: the id column value, or the row index rendered
    /// in decimal when no id column is declared.
    pub fn row_id(&self, i: usize) -> String {
        match self.id_idx {
            Some(j) => match &self.data[j] {
                ColumnData::Id(v) => v[i].clone(),
                _ => unreachable!(),
            },
            None => i.to_string(),
        }
    }

    pub fn has_id_column(&self) -> bool {
        self.id_idx.is_some()
    }

    /// Names of columns with a given role, in declaration order.
    pub fn names_with_role(&self, role: ColumnRole) -> Vec<&str> {
        self.specs
            .iter()
            .filter(|s| s.role == role)
            .map(|s| s.name.as_str())
            .collect()
    }

    /// Write the table back to CSV with a header row. Numeric cells use
    /// shortest round-trip formatting, so load(write(t)) == t bit-exactly.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header: Vec<&str> = self.specs.iter().map(|s| s.name.as_str()).collect();
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        let mut record = Vec::with_capacity(self.specs.len());
        for i in 0..self.n_rows {
            record.clear();
            for (spec, col) in self.specs.iter().zip(&self.data) {
                match col {
                    ColumnData::Numeric(v) => record.push(format!("{}", v[i])),
                    ColumnData::Categorical(v) => {
                        let levels = spec.kind.levels().expect("categorical levels");
                        record.push(levels[v[i] as usize].clone());
                    }
                    ColumnData::Id(v) => record.push(v[i].clone()),
                }
            }
            w.write_record(&record).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn validate_specs(specs: &[ColumnSpec]) -> Result<()> {
    let mut names = HashSet::new();
    let mut n_weight = 0;
    let mut n_id = 0;
    for s in specs {
        if !names.insert(s.name.as_str()) {
            return Err(Error::Schema(format!("duplicate column name '{}'", s.name)));
        }
        if let Some(levels) = s.kind.levels() {
            if levels.is_empty() {
                return Err(Error::Schema(format!(
                    "categorical column '{}' declares no levels",
                    s.name
                )));
            }
            let mut seen = HashSet::new();
            for l in levels {
                if !seen.insert(l.as_str()) {
                    return Err(Error::Schema(format!(
                        "categorical column '{}' repeats level '{l}'",
                        s.name
                    )));
                }
            }
        }
        match s.role {
            ColumnRole::Weight => n_weight += 1,
            ColumnRole::Id => n_id += 1,
            _ => {}
        }
    }
    if n_weight != 1 {
        return Err(Error::Schema(format!(
            "table must declare exactly one weight column, found {n_weight}"
        )));
    }
    if n_id > 1 {
        return Err(Error::Schema(format!(
            "table may declare at most one id column, found {n_id}"
        )));
    }
    Ok(())
}

/// Load a CSV against a declared schema. The header must contain exactly the
/// schema's column names (order free).
pub fn load_microdata(path: &Path, schema: &[ColumnSpec]) -> Result<Microdata> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let header_names: Vec<&str> = headers.iter().collect();

    let mut positions = Vec::with_capacity(schema.len());
    for spec in schema {
        match header_names.iter().position(|h| *h == spec.name) {
            Some(p) => positions.push(p),
            None => {
                return Err(Error::Schema(format!(
                    "schema column '{}' missing from header of {}",
                    spec.name,
                    path.display()
                )))
            }
        }
    }
    if header_names.len() != schema.len() {
        let declared: HashSet<&str> = schema.iter().map(|s| s.name.as_str()).collect();
        let extra: Vec<&str> = header_names
            .iter()
            .filter(|h| !declared.contains(**h))
            .copied()
            .collect();
        return Err(Error::Schema(format!(
            "header of {} carries undeclared columns: {}",
            path.display(),
            extra.join(", ")
        )));
    }

    let mut columns: Vec<ColumnData> = schema
        .iter()
        .map(|s| match (s.role, &s.kind) {
            (ColumnRole::Id, _) => ColumnData::Id(Vec::new()),
            (_, ColumnKind::Categorical { .. }) => ColumnData::Categorical(Vec::new()),
            _ => ColumnData::Numeric(Vec::new()),
        })
        .collect();

    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        for (spec, (&pos, col)) in schema.iter().zip(positions.iter().zip(&mut columns)) {
            let raw = record.get(pos).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::Cell {
                    row: row_idx,
                    column: spec.name.clone(),
                    message: "missing cell".into(),
                });
            }
            match col {
                ColumnData::Id(v) => v.push(raw.to_string()),
                ColumnData::Categorical(v) => {
                    let levels = spec.kind.levels().expect("categorical levels");
                    match levels.iter().position(|l| l == raw) {
                        Some(ix) => v.push(ix as u32),
                        None => {
                            return Err(Error::Cell {
                                row: row_idx,
                                column: spec.name.clone(),
                                message: format!(
                                    "level '{raw}' not among declared levels [{}]",
                                    levels.join(", ")
                                ),
                            })
                        }
                    }
                }
                ColumnData::Numeric(v) => match raw.parse::<f64>() {
                    Ok(x) => v.push(x),
                    Err(_) => {
                        return Err(Error::Cell {
                            row: row_idx,
                            column: spec.name.clone(),
                            message: format!("cannot parse '{raw}' as a number"),
                        })
                    }
                },
            }
        }
    }

    Microdata::from_columns(schema.to_vec(), columns)
}

// ---------------------------------------------------------------------------
// Sidecar schema files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    column: Vec<SchemaColumn>,
}

#[derive(Serialize, Deserialize)]
struct SchemaColumn {
    name: String,
    kind: String,
    role: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    levels: Vec<String>,
}

/// Read a sidecar schema (TOML) into column specs.
pub fn load_schema(path: &Path) -> Result<Vec<ColumnSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SchemaFile = toml::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    file.column
        .into_iter()
        .map(|c| {
            let kind = match c.kind.as_str() {
                "categorical" => {
                    if c.levels.is_empty() {
                        return Err(Error::Schema(format!(
                            "column '{}': categorical kind requires levels",
                            c.name
                        )));
                    }
                    ColumnKind::Categorical { levels: c.levels }
                }
                "continuous" => ColumnKind::Continuous,
                "semicontinuous" => ColumnKind::Semicontinuous,
                other => {
                    return Err(Error::Schema(format!(
                        "column '{}': unknown kind '{other}'",
                        c.name
                    )))
                }
            };
            let role = match c.role.as_str() {
                "predictor" => ColumnRole::Predictor,
                "fusion" => ColumnRole::Fusion,
                "weight" => ColumnRole::Weight,
                "replicate_weight" => ColumnRole::ReplicateWeight,
                "id" => ColumnRole::Id,
                other => {
                    return Err(Error::Schema(format!(
                        "column '{}': unknown role '{other}'",
                        c.name
                    )))
                }
            };
            Ok(ColumnSpec {
                name: c.name,
                kind,
                role,
            })
        })
        .collect()
}

/// Write a sidecar schema file for a set of column specs.
pub fn write_schema(path: &Path, specs: &[ColumnSpec]) -> Result<()> {
    let file = SchemaFile {
        column: specs
            .iter()
            .map(|s| SchemaColumn {
                name: s.name.clone(),
                kind: match &s.kind {
                    ColumnKind::Categorical { .. } => "categorical".into(),
                    ColumnKind::Continuous => "continuous".into(),
                    ColumnKind::Semicontinuous => "semicontinuous".into(),
                },
                role: match s.role {
                    ColumnRole::Predictor => "predictor".into(),
                    ColumnRole::Fusion => "fusion".into(),
                    ColumnRole::Weight => "weight".into(),
                    ColumnRole::ReplicateWeight => "replicate_weight".into(),
                    ColumnRole::Id => "id".into(),
                },
                levels: s.kind.levels().map(|l| l.to_vec()).unwrap_or_default(),
            })
            .collect(),
    };
    let text = toml::to_string_pretty(&file).map_err(|e| Error::Serialize(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Compatibility checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    PredictorMissing { table: &'static str, name: String },
    KindMismatch { name: String },
    LevelMismatch { name: String, detail: String },
    FusionMissingInDonor { name: String },
    FusionPresentInRecipient { name: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::PredictorMissing { table, name } => {
                write!(f, "predictor '{name}' missing from {table}")
            }
            Violation::KindMismatch { name } => {
                write!(f, "predictor '{name}' has different kinds in donor and recipient")
            }
            Violation::LevelMismatch { name, detail } => {
                write!(f, "predictor '{name}' level mismatch: {detail}")
            }
            Violation::FusionMissingInDonor { name } => {
                write!(f, "fusion variable '{name}' missing from donor")
            }
            Violation::FusionPresentInRecipient { name } => {
                write!(f, "fusion variable '{name}' already present in recipient")
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CompatReport {
    pub violations: Vec<Violation>,
}

impl CompatReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verify that the harmonized predictors agree between tables and that the
/// fusion variables live only on the donor side. Failures are reported, not
/// raised.
pub fn check_compatibility(
    donor: &Microdata,
    recipient: &Microdata,
    predictors: &[String],
    fusion_vars: &[String],
) -> CompatReport {
    let mut report = CompatReport::default();
    for name in predictors {
        let d = donor.spec(name);
        let r = recipient.spec(name);
        match (d, r) {
            (None, _) => report.violations.push(Violation::PredictorMissing {
                table: "donor",
                name: name.clone(),
            }),
            (_, None) => report.violations.push(Violation::PredictorMissing {
                table: "recipient",
                name: name.clone(),
            }),
            (Some(ds), Some(rs)) => match (&ds.kind, &rs.kind) {
                (
                    ColumnKind::Categorical { levels: dl },
                    ColumnKind::Categorical { levels: rl },
                ) => {
                    if dl != rl {
                        let only_donor: Vec<&String> =
                            dl.iter().filter(|l| !rl.contains(l)).collect();
                        let only_recipient: Vec<&String> =
                            rl.iter().filter(|l| !dl.contains(l)).collect();
                        let detail = format!(
                            "donor-only [{}], recipient-only [{}]",
                            only_donor
                                .iter()
                                .map(|s| s.as_str())
                                .collect::<Vec<_>>()
                                .join(", "),
                            only_recipient
                                .iter()
                                .map(|s| s.as_str())
                                .collect::<Vec<_>>()
                                .join(", ")
                        );
                        report.violations.push(Violation::LevelMismatch {
                            name: name.clone(),
                            detail,
                        });
                    }
                }
                (dk, rk) if dk == rk => {}
                _ => report
                    .violations
                    .push(Violation::KindMismatch { name: name.clone() }),
            },
        }
    }
    for name in fusion_vars {
        if donor.spec(name).is_none() {
            report
                .violations
                .push(Violation::FusionMissingInDonor { name: name.clone() });
        }
        if recipient.spec(name).is_some() {
            report
                .violations
                .push(Violation::FusionPresentInRecipient { name: name.clone() });
        }
    }
    report
}
