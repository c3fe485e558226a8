//! Simulated-output containers and disk formats.
//!
//! The canonical disk layout is one columnar CSV per implicate plus an index
//! file; a long-format single CSV with an `implicate` column is available by
//! flag. Per-implicate files are streamed append-only chunk by chunk; any
//! write failure drops a `_PARTIAL` marker file in the output directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microdata::{ColumnKind, ColumnSpec};

pub const INDEX_FILE: &str = "implicates.toml";
pub const PARTIAL_MARKER: &str = "_PARTIAL";

/// One simulated column for one implicate.
#[derive(Debug, Clone, PartialEq)]
#[derive(Serialize, Deserialize)]
pub enum SimColumn {
    Numeric(Vec<f64>),
    Categorical(Vec<u32>),
}

impl SimColumn {
    pub fn len(&self) -> usize {
        match self {
            SimColumn::Numeric(v) => v.len(),
            SimColumn::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// M simulated tables aligned to recipient row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicateSet {
    pub variables: Vec<ColumnSpec>,
    pub row_ids: Vec<String>,
    /// implicates[m][v] is variable v of implicate m, aligned to row_ids.
    pub implicates: Vec<Vec<SimColumn>>,
}

impl ImplicateSet {
    pub fn n_implicates(&self) -> usize {
        self.implicates.len()
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|s| s.name == name)
    }

    pub fn column(&self, implicate: usize, name: &str) -> Option<&SimColumn> {
        let v = self.variable_index(name)?;
        Some(&self.implicates[implicate][v])
    }

    /// Numeric view of a fused column (semicontinuous included).
    pub fn numeric(&self, implicate: usize, name: &str) -> Result<&[f64]> {
        match self.column(implicate, name) {
            Some(SimColumn::Numeric(v)) => Ok(v),
            Some(_) => Err(Error::Schema(format!("fused column '{name}' is not numeric"))),
            None => Err(Error::Schema(format!("no fused column named '{name}'"))),
        }
    }

    pub fn categorical(&self, implicate: usize, name: &str) -> Result<&[u32]> {
        match self.column(implicate, name) {
            Some(SimColumn::Categorical(v)) => Ok(v),
            Some(_) => Err(Error::Schema(format!(
                "fused column '{name}' is not categorical"
            ))),
            None => Err(Error::Schema(format!("no fused column named '{name}'"))),
        }
    }
}

/// Chunk-ordered consumer of fusion output.
pub trait ImplicateSink {
    fn begin(&mut self, variables: &[ColumnSpec], n_rows: usize, n_implicates: usize)
        -> Result<()>;
    /// Called once per (chunk, implicate), implicates in ascending order
    /// within each chunk; `columns` align with the declared variables.
    fn write_chunk(&mut self, implicate: usize, ids: &[String], columns: &[SimColumn])
        -> Result<()>;
    fn finish(&mut self) -> Result<()>;
}

// ---------------------------------------------------------------------------
// In-memory sink
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct MemorySink {
    variables: Vec<ColumnSpec>,
    row_ids: Vec<String>,
    implicates: Vec<Vec<SimColumn>>,
    rows_seen: usize,
}

impl MemorySink {
    pub fn new() -> Self {
        MemorySink::default()
    }

    pub fn into_implicates(self) -> ImplicateSet {
        ImplicateSet {
            variables: self.variables,
            row_ids: self.row_ids,
            implicates: self.implicates,
        }
    }
}

impl ImplicateSink for MemorySink {
    fn begin(
        &mut self,
        variables: &[ColumnSpec],
        n_rows: usize,
        n_implicates: usize,
    ) -> Result<()> {
        self.variables = variables.to_vec();
        self.row_ids = Vec::with_capacity(n_rows);
        self.implicates = (0..n_implicates)
            .map(|_| {
                variables
                    .iter()
                    .map(|s| match s.kind {
                        ColumnKind::Categorical { .. } => {
                            SimColumn::Categorical(Vec::with_capacity(n_rows))
                        }
                        _ => SimColumn::Numeric(Vec::with_capacity(n_rows)),
                    })
                    .collect()
            })
            .collect();
        Ok(())
    }

    fn write_chunk(
        &mut self,
        implicate: usize,
        ids: &[String],
        columns: &[SimColumn],
    ) -> Result<()> {
        if implicate == 0 {
            self.row_ids.extend(ids.iter().cloned());
            self.rows_seen += ids.len();
        }
        for (dst, src) in self.implicates[implicate].iter_mut().zip(columns) {
            match (dst, src) {
                (SimColumn::Numeric(d), SimColumn::Numeric(s)) => d.extend_from_slice(s),
                (SimColumn::Categorical(d), SimColumn::Categorical(s)) => d.extend_from_slice(s),
                _ => {
                    return Err(Error::InvalidArgument(
                        "simulated column kind mismatch".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Disk sink
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    /// implicate_001.csv .. implicate_M.csv plus an index file.
    PerImplicate,
    /// One long CSV with an `implicate` column, ordered by (implicate, row).
    Long,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: String,
    n_implicates: usize,
    n_rows: usize,
    format: String,
    files: Vec<String>,
    variables: Vec<IndexVariable>,
}

#[derive(Serialize, Deserialize)]
struct IndexVariable {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    levels: Vec<String>,
}

/// Streams per-implicate CSVs append-only; the long format buffers so its row
/// order stays (implicate, row) regardless of chunking.
pub struct DiskSink {
    dir: PathBuf,
    format: OutputFormat,
    variables: Vec<ColumnSpec>,
    writers: Vec<BufWriter<File>>,
    long_buffer: Option<MemorySink>,
    n_rows: usize,
    n_implicates: usize,
    failed: bool,
}

impl DiskSink {
    pub fn create(dir: &Path, format: OutputFormat) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(DiskSink {
            dir: dir.to_path_buf(),
            format,
            variables: Vec::new(),
            writers: Vec::new(),
            long_buffer: None,
            n_rows: 0,
            n_implicates: 0,
            failed: false,
        })
    }

    fn mark_partial(&mut self, cause: &str) -> Error {
        self.failed = true;
        let marker = self.dir.join(PARTIAL_MARKER);
        let _ = fs::write(&marker, format!("fusion aborted: {cause}\n"));
        Error::PartialOutput(self.dir.clone())
    }

    fn header(&self) -> String {
        let mut h = String::from("id");
        for v in &self.variables {
            h.push(',');
            h.push_str(&v.name);
        }
        h.push('\n');
        h
    }

    fn format_cell(spec: &ColumnSpec, col: &SimColumn, row: usize) -> String {
        match col {
            SimColumn::Numeric(v) => format!("{}", v[row]),
            SimColumn::Categorical(codes) => {
                let levels = spec.kind.levels().expect("categorical levels");
                levels[codes[row] as usize].clone()
            }
        }
    }
}

impl ImplicateSink for DiskSink {
    fn begin(
        &mut self,
        variables: &[ColumnSpec],
        n_rows: usize,
        n_implicates: usize,
    ) -> Result<()> {
        self.variables = variables.to_vec();
        self.n_rows = n_rows;
        self.n_implicates = n_implicates;
        match self.format {
            OutputFormat::PerImplicate => {
                for m in 0..n_implicates {
                    let path = self.dir.join(format!("implicate_{:03}.csv", m + 1));
                    let file = OpenOptions::new()
                        .create(true)
                        .write(true)
                        .truncate(true)
                        .open(&path)
                        .map_err(|e| Error::io(&path, e))?;
                    let mut w = BufWriter::new(file);
                    w.write_all(self.header().as_bytes())
                        .map_err(|e| Error::io(&path, e))?;
                    self.writers.push(w);
                }
            }
            OutputFormat::Long => {
                let mut buffer = MemorySink::new();
                buffer.begin(variables, n_rows, n_implicates)?;
                self.long_buffer = Some(buffer);
            }
        }
        Ok(())
    }

    fn write_chunk(
        &mut self,
        implicate: usize,
        ids: &[String],
        columns: &[SimColumn],
    ) -> Result<()> {
        match self.format {
            OutputFormat::PerImplicate => {
                let mut out = String::new();
                for row in 0..ids.len() {
                    out.push_str(&ids[row]);
                    for (spec, col) in self.variables.iter().zip(columns) {
                        out.push(',');
                        out.push_str(&Self::format_cell(spec, col, row));
                    }
                    out.push('\n');
                }
                if let Err(e) = self.writers[implicate].write_all(out.as_bytes()) {
                    return Err(self.mark_partial(&e.to_string()));
                }
                Ok(())
            }
            OutputFormat::Long => self
                .long_buffer
                .as_mut()
                .expect("begin ran")
                .write_chunk(implicate, ids, columns),
        }
    }

    fn finish(&mut self) -> Result<()> {
        let mut files = Vec::new();
        match self.format {
            OutputFormat::PerImplicate => {
                for (m, w) in self.writers.iter_mut().enumerate() {
                    if let Err(e) = w.flush() {
                        let msg = e.to_string();
                        return Err(self.mark_partial(&msg));
                    }
                    files.push(format!("implicate_{:03}.csv", m + 1));
                }
            }
            OutputFormat::Long => {
                let set = std::mem::take(self.long_buffer.as_mut().expect("begin ran"))
                    .into_implicates();
                let path = self.dir.join("implicates_long.csv");
                let mut body = String::from("implicate,id");
                for v in &self.variables {
                    body.push(',');
                    body.push_str(&v.name);
                }
                body.push('\n');
                for m in 0..set.n_implicates() {
                    for row in 0..set.n_rows() {
                        body.push_str(&format!("{},{}", m + 1, set.row_ids[row]));
                        for (spec, col) in self.variables.iter().zip(&set.implicates[m]) {
                            body.push(',');
                            body.push_str(&Self::format_cell(spec, col, row));
                        }
                        body.push('\n');
                    }
                }
                if let Err(e) = fs::write(&path, body) {
                    let msg = e.to_string();
                    return Err(self.mark_partial(&msg));
                }
                files.push("implicates_long.csv".into());
            }
        }
        let index = IndexFile {
            version: "1".into(),
            n_implicates: self.n_implicates,
            n_rows: self.n_rows,
            format: match self.format {
                OutputFormat::PerImplicate => "per_implicate".into(),
                OutputFormat::Long => "long".into(),
            },
            files,
            variables: self
                .variables
                .iter()
                .map(|s| IndexVariable {
                    name: s.name.clone(),
                    kind: match &s.kind {
                        ColumnKind::Categorical { .. } => "categorical".into(),
                        ColumnKind::Continuous => "continuous".into(),
                        ColumnKind::Semicontinuous => "semicontinuous".into(),
                    },
                    levels: s.kind.levels().map(|l| l.to_vec()).unwrap_or_default(),
                })
                .collect(),
        };
        let text = toml::to_string_pretty(&index).map_err(|e| Error::Serialize(e.to_string()))?;
        let path = self.dir.join(INDEX_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Load a per-implicate output directory back into memory.
pub fn load_implicates(dir: &Path) -> Result<ImplicateSet> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: IndexFile =
        toml::from_str(&text).map_err(|e| Error::Schema(format!("implicate index: {e}")))?;
    if index.format != "per_implicate" {
        return Err(Error::Schema(
            "only per-implicate output directories can be reloaded".into(),
        ));
    }
    if dir.join(PARTIAL_MARKER).exists() {
        return Err(Error::PartialOutput(dir.to_path_buf()));
    }
    let variables: Vec<ColumnSpec> = index
        .variables
        .iter()
        .map(|v| {
            let kind = match v.kind.as_str() {
                "categorical" => ColumnKind::Categorical {
                    levels: v.levels.clone(),
                },
                "semicontinuous" => ColumnKind::Semicontinuous,
                _ => ColumnKind::Continuous,
            };
            ColumnSpec {
                name: v.name.clone(),
                kind,
                role: crate::microdata::ColumnRole::Fusion,
            }
        })
        .collect();

    let mut row_ids: Vec<String> = Vec::new();
    let mut implicates = Vec::with_capacity(index.n_implicates);
    for (m, file) in index.files.iter().enumerate() {
        let path = dir.join(file);
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&path)
            .map_err(|e| Error::csv(&path, e))?;
        let mut columns: Vec<SimColumn> = variables
            .iter()
            .map(|s| match s.kind {
                ColumnKind::Categorical { .. } => SimColumn::Categorical(Vec::new()),
                _ => SimColumn::Numeric(Vec::new()),
            })
            .collect();
        for (row_ix, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::csv(&path, e))?;
            let id = record.get(0).unwrap_or("").to_string();
            if m == 0 {
                row_ids.push(id);
            } else if row_ids.get(row_ix).map(String::as_str) != Some(id.as_str()) {
                return Err(Error::Schema(format!(
                    "implicate files disagree on row ids at row {row_ix}"
                )));
            }
            for (v, (spec, col)) in variables.iter().zip(&mut columns).enumerate() {
                let raw = record.get(v + 1).unwrap_or("");
                match col {
                    SimColumn::Numeric(vals) => {
                        vals.push(raw.parse::<f64>().map_err(|_| Error::Cell {
                            row: row_ix,
                            column: spec.name.clone(),
                            message: format!("cannot parse '{raw}'"),
                        })?);
                    }
                    SimColumn::Categorical(codes) => {
                        let levels = spec.kind.levels().expect("categorical levels");
                        let ix = levels.iter().position(|l| l == raw).ok_or_else(|| {
                            Error::Cell {
                                row: row_ix,
                                column: spec.name.clone(),
                                message: format!("level '{raw}' not in index"),
                            }
                        })?;
                        codes.push(ix as u32);
                    }
                }
            }
        }
        implicates.push(columns);
    }

    Ok(ImplicateSet {
        variables,
        row_ids,
        implicates,
    })
}
