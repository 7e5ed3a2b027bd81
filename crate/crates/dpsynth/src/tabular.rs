//! Typed tabular datasets: schema, validation and CSV persistence.
//!
//! Cells are stored as `f64` throughout; categorical values hold the level
//! index, binary values are exactly 0.0 or 1.0. Datasets are immutable after
//! construction and safe to share across threads.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kind of a column, with the public metadata each kind carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    /// Continuous value with a declared public range. Values outside the
    /// range are clamped on load.
    Continuous { range: [f64; 2] },
    /// Exactly {0, 1}.
    Binary,
    /// Ordered list of at least two distinct labels; cells store the index.
    Categorical { levels: Vec<String> },
}

impl ColumnKind {
    pub fn continuous(lo: f64, hi: f64) -> Self {
        ColumnKind::Continuous { range: [lo, hi] }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ColumnKind::Continuous { range: [lo, hi] } => {
                if !(lo < hi) {
                    return Err(Error::Schema(format!(
                        "continuous range must have lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            ColumnKind::Binary => {}
            ColumnKind::Categorical { levels } => {
                if levels.len() < 2 {
                    return Err(Error::Schema("categorical needs >= 2 levels".into()));
                }
                for (i, l) in levels.iter().enumerate() {
                    if levels[..i].contains(l) {
                        return Err(Error::Schema(format!("duplicate level `{l}`")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of discrete levels, if the kind is inherently discrete.
    pub fn discrete_cardinality(&self) -> Option<usize> {
        match self {
            ColumnKind::Continuous { .. } => None,
            ColumnKind::Binary => Some(2),
            ColumnKind::Categorical { levels } => Some(levels.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

/// Ordered list of named, typed columns. Order is significant: the chain
/// Bayesian network conditions each column on a subset of its predecessors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Schema("schema needs at least one column".into()));
        }
        for (i, c) in columns.iter().enumerate() {
            if c.name.is_empty() {
                return Err(Error::Schema("empty column name".into()));
            }
            if columns[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Schema(format!("duplicate column name `{}`", c.name)));
            }
            c.kind.validate()?;
        }
        Ok(Schema { columns })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let schema: Schema = serde_json::from_reader(f)?;
        Schema::new(schema.columns)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

/// Validated n x p table conforming to a [`Schema`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    rows: Vec<Vec<f64>>,
}

impl Dataset {
    /// Build a dataset, rejecting any cell that violates its column kind.
    pub fn new(schema: Schema, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Schema("dataset needs at least one row".into()));
        }
        for (ri, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "row {ri} has {} cells, schema has {} columns",
                    row.len(),
                    schema.len()
                )));
            }
            for (ci, (&v, col)) in row.iter().zip(&schema.columns).enumerate() {
                validate_cell(v, &col.kind).map_err(|e| {
                    Error::Schema(format!("row {ri}, column `{}` ({ci}): {e}", col.name))
                })?;
            }
        }
        Ok(Dataset { schema, rows })
    }

    /// Build a dataset, clamping out-of-range continuous cells to the nearest
    /// bound. Returns per-column clamp counts alongside.
    pub fn new_clamping(schema: Schema, mut rows: Vec<Vec<f64>>) -> Result<(Self, Vec<usize>)> {
        let mut clamps = vec![0usize; schema.len()];
        for row in &mut rows {
            for (ci, col) in schema.columns.iter().enumerate() {
                if let ColumnKind::Continuous { range: [lo, hi] } = col.kind {
                    let v = row[ci];
                    if v < lo {
                        row[ci] = lo;
                        clamps[ci] += 1;
                    } else if v > hi {
                        row[ci] = hi;
                        clamps[ci] += 1;
                    }
                }
            }
        }
        Ok((Dataset::new(schema, rows)?, clamps))
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn p(&self) -> usize {
        self.schema.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.rows[row][col]
    }

    pub fn column_values(&self, col: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[col]).collect()
    }
}

fn validate_cell(v: f64, kind: &ColumnKind) -> std::result::Result<(), String> {
    if !v.is_finite() {
        return Err(format!("non-finite value {v}"));
    }
    match kind {
        ColumnKind::Continuous { range: [lo, hi] } => {
            if v < *lo || v > *hi {
                return Err(format!("value {v} outside declared range [{lo}, {hi}]"));
            }
        }
        ColumnKind::Binary => {
            if v != 0.0 && v != 1.0 {
                return Err(format!("label not in levels: binary value {v}"));
            }
        }
        ColumnKind::Categorical { levels } => {
            if v.fract() != 0.0 || v < 0.0 || (v as usize) >= levels.len() {
                return Err(format!("label not in levels: index {v}"));
            }
        }
    }
    Ok(())
}

/// Result of [`load_csv`]: the dataset plus per-column clamp counts.
#[derive(Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub clamp_counts: Vec<usize>,
}

/// Load a CSV file against a schema. The header row must match the schema
/// column names in order; continuous values outside the declared range are
/// clamped and counted.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<LoadReport> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(f);

    let headers = rdr.headers()?.clone();
    let expected: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Schema(format!(
            "header mismatch: expected {expected:?}, got {got:?}"
        )));
    }

    let mut rows = Vec::new();
    for (ri, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != schema.len() {
            return Err(Error::Parse(format!(
                "row {ri}: {} fields, expected {}",
                rec.len(),
                schema.len()
            )));
        }
        let mut row = Vec::with_capacity(schema.len());
        for (ci, (field, col)) in rec.iter().zip(&schema.columns).enumerate() {
            let v = parse_cell(field, &col.kind).map_err(|e| {
                Error::Parse(format!("row {ri}, column `{}` ({ci}): {e}", col.name))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("empty csv body".into()));
    }

    let (dataset, clamp_counts) = Dataset::new_clamping(schema.clone(), rows)?;
    Ok(LoadReport {
        dataset,
        clamp_counts,
    })
}

fn parse_cell(field: &str, kind: &ColumnKind) -> std::result::Result<f64, String> {
    match kind {
        ColumnKind::Continuous { .. } => field
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("unparseable cell `{field}`")),
        ColumnKind::Binary => match field.trim() {
            "0" => Ok(0.0),
            "1" => Ok(1.0),
            other => Err(format!("label not in levels: `{other}` for binary column")),
        },
        ColumnKind::Categorical { levels } => levels
            .iter()
            .position(|l| l == field)
            .map(|i| i as f64)
            .ok_or_else(|| format!("label not in levels: `{field}`")),
    }
}

/// Write a dataset as CSV. Categorical cells are written as their label,
/// binary as 0/1 and continuous with full round-trip precision.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::Writer::from_writer(f);

    let header: Vec<&str> = ds.schema.columns.iter().map(|c| c.name.as_str()).collect();
    wtr.write_record(&header)?;
    for row in &ds.rows {
        let mut rec = Vec::with_capacity(row.len());
        for (&v, col) in row.iter().zip(&ds.schema.columns) {
            rec.push(format_cell(v, &col.kind));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn format_cell(v: f64, kind: &ColumnKind) -> String {
    match kind {
        // Shortest representation that parses back to the same f64.
        ColumnKind::Continuous { .. } => format!("{v}"),
        ColumnKind::Binary => format!("{}", v as i64),
        ColumnKind::Categorical { levels } => levels[v as usize].clone(),
    }
}
