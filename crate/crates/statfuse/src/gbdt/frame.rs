//! Feature views consumed by the learner: numeric columns as f64, categorical
//! columns as level codes with a known cardinality.

use crate::error::{Error, Result};
use crate::microdata::{ColumnData, ColumnKind, Microdata};

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureColumn {
    Numeric(Vec<f64>),
    Categorical { codes: Vec<u32>, n_levels: u32 },
}

impl FeatureColumn {
    pub fn len(&self) -> usize {
        match self {
            FeatureColumn::Numeric(v) => v.len(),
            FeatureColumn::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Numeric,
    Categorical { n_levels: u32 },
}

/// A named, column-aligned feature table.
#[derive(Debug, Clone)]
pub struct FeatureFrame {
    pub names: Vec<String>,
    pub columns: Vec<FeatureColumn>,
    pub n_rows: usize,
}

impl FeatureFrame {
    pub fn new(names: Vec<String>, columns: Vec<FeatureColumn>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::InvalidArgument(
                "feature names and columns must align".into(),
            ));
        }
        let n_rows = columns.first().map_or(0, |c| c.len());
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != n_rows {
                return Err(Error::InvalidArgument(format!(
                    "feature '{name}' has {} rows, expected {n_rows}",
                    col.len()
                )));
            }
        }
        Ok(FeatureFrame {
            names,
            columns,
            n_rows,
        })
    }

    /// Extract named columns from a microdata table.
    pub fn from_microdata(md: &Microdata, names: &[String]) -> Result<Self> {
        let mut columns = Vec::with_capacity(names.len());
        for name in names {
            let spec = md
                .spec(name)
                .ok_or_else(|| Error::Schema(format!("no column named '{name}'")))?;
            let col = match (md.column(name).unwrap(), &spec.kind) {
                (ColumnData::Numeric(v), _) => FeatureColumn::Numeric(v.clone()),
                (ColumnData::Categorical(codes), ColumnKind::Categorical { levels }) => {
                    FeatureColumn::Categorical {
                        codes: codes.clone(),
                        n_levels: levels.len() as u32,
                    }
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "column '{name}' cannot be used as a feature"
                    )))
                }
            };
            columns.push(col);
        }
        FeatureFrame::new(names.to_vec(), columns)
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        self.columns
            .iter()
            .map(|c| match c {
                FeatureColumn::Numeric(_) => FeatureKind::Numeric,
                FeatureColumn::Categorical { n_levels, .. } => FeatureKind::Categorical {
                    n_levels: *n_levels,
                },
            })
            .collect()
    }
}
