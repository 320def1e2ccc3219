//! Table count files, record-level CSV grouping, and instance export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::design::{build_observed_table_design, DesignMatrix, Factor, TableSchema};
use crate::error::{Error, Result};
use crate::io::{read_vector, write_vector};
use crate::model::ProblemInstance;

/// Observed cells (0-based levels, one entry per factor) and their counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TableCounts {
    pub cells: Vec<Vec<usize>>,
    pub counts: Vec<f64>,
}

impl TableCounts {
    /// Model instance over the observed cells, in file order. Columns with
    /// no observed support are dropped.
    pub fn instance(&self, schema: &TableSchema) -> Result<ProblemInstance> {
        let (design, _) = build_observed_table_design(schema, &self.cells)?;
        ProblemInstance::new(design, self.counts.clone(), None)
    }
}

/// Reads a counts file with one column per factor (named as in the schema,
/// holding 0-based level indices) followed by `count`.
pub fn read_table_counts<R: Read>(r: R, schema: &TableSchema) -> Result<TableCounts> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    let count_col = headers
        .iter()
        .position(|h| h == "count")
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing 'count' column".into(),
        })?;
    let mut factor_cols = Vec::with_capacity(schema.n_factors());
    for f in &schema.factors {
        let pos = headers.iter().position(|h| h == f.name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column for factor '{}'", f.name),
        })?;
        factor_cols.push(pos);
    }
    let mut seen = BTreeSet::new();
    let mut out = TableCounts {
        cells: Vec::new(),
        counts: Vec::new(),
    };
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let mut cell = Vec::with_capacity(factor_cols.len());
        for (f, &c) in schema.factors.iter().zip(&factor_cols) {
            let level: usize = rec[c].parse().map_err(|e| Error::Parse {
                line,
                message: format!("invalid level '{}' for factor '{}': {e}", &rec[c], f.name),
            })?;
            if level >= f.levels {
                return Err(Error::Parse {
                    line,
                    message: format!("level {level} out of range for factor '{}' with {} levels", f.name, f.levels),
                });
            }
            cell.push(level);
        }
        let count: f64 = rec[count_col].parse().map_err(|e| Error::Parse {
            line,
            message: format!("invalid count '{}': {e}", &rec[count_col]),
        })?;
        if !(count >= 0.0 && count.is_finite()) {
            return Err(Error::Parse {
                line,
                message: format!("count must be finite and non-negative, got {count}"),
            });
        }
        if !seen.insert(cell.clone()) {
            return Err(Error::Parse {
                line,
                message: format!("cell {cell:?} appears twice"),
            });
        }
        out.cells.push(cell);
        out.counts.push(count);
    }
    if out.cells.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    Ok(out)
}

/// A table obtained by grouping records at each observed combination of
/// factor values.
#[derive(Debug, Clone)]
pub struct GroupedTable {
    pub schema: TableSchema,
    /// Sorted distinct values of each factor; level `k` is `levels[f][k]`.
    pub levels: Vec<Vec<String>>,
    pub table: TableCounts,
}

/// Groups a record-level CSV. `factors` selects columns (all columns except
/// `count` by default); an optional `count` column weights each record.
/// Only observed combinations become cells, including those whose summed
/// weight is zero.
pub fn load_grouped_csv<R: Read>(r: R, factors: Option<&[String]>, order: usize) -> Result<GroupedTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    let weight_col = headers.iter().position(|h| h == "count");
    let names: Vec<String> = match factors {
        Some(f) => f.to_vec(),
        None => headers.iter().filter(|h| *h != "count").map(str::to_string).collect(),
    };
    let cols: Vec<usize> = names
        .iter()
        .map(|n| {
            headers.iter().position(|h| h == n).ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("no column named '{n}'"),
            })
        })
        .collect::<Result<_>>()?;
    let mut groups: BTreeMap<Vec<String>, f64> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let key: Vec<String> = cols.iter().map(|&c| rec[c].to_string()).collect();
        let w = match weight_col {
            Some(c) => rec[c].parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("invalid count '{}': {e}", &rec[c]),
            })?,
            None => 1.0,
        };
        *groups.entry(key).or_insert(0.0) += w;
    }
    if groups.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let levels: Vec<Vec<String>> = (0..cols.len())
        .map(|f| groups.keys().map(|k| k[f].clone()).collect::<BTreeSet<_>>().into_iter().collect())
        .collect();
    let schema = TableSchema::new(
        names.iter().zip(&levels).map(|(n, l)| Factor::new(n.clone(), l.len())).collect(),
        order,
    )?;
    let mut table = TableCounts {
        cells: Vec::with_capacity(groups.len()),
        counts: Vec::with_capacity(groups.len()),
    };
    for (key, w) in groups {
        let cell = key
            .iter()
            .zip(&levels)
            .map(|(v, l)| l.binary_search(v).expect("level collected above"))
            .collect();
        table.cells.push(cell);
        table.counts.push(w);
    }
    Ok(GroupedTable { schema, levels, table })
}

/// Writes `design.csv` (triplets), `counts.csv`, `offset.csv` when the
/// offset is not all ones, and `beta_true.csv` when known.
pub fn export_instance(inst: &ProblemInstance, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    inst.design().write_triplets(fs::File::create(dir.join("design.csv"))?)?;
    let counts = inst
        .counts()
        .ok_or_else(|| Error::InvalidInstance("only instances with counts can be exported".into()))?;
    write_vector(fs::File::create(dir.join("counts.csv"))?, "count", counts)?;
    if inst.offset().iter().any(|&q| q != 1.0) {
        write_vector(fs::File::create(dir.join("offset.csv"))?, "offset", inst.offset())?;
    }
    if let Some(b) = inst.beta_true() {
        write_vector(fs::File::create(dir.join("beta_true.csv"))?, "beta", b)?;
    }
    Ok(())
}

/// Reads an instance from a triplet design, a count vector and an optional
/// offset vector.
pub fn read_instance(design: &Path, counts: &Path, offset: Option<&Path>) -> Result<ProblemInstance> {
    let n = read_vector(fs::File::open(counts)?)?;
    let q = offset.map(|p| fs::File::open(p).map_err(Error::from).and_then(read_vector)).transpose()?;
    let rows = n.len();
    let x = DesignMatrix::read_triplets(fs::File::open(design)?, None)?;
    if x.n_rows() != rows {
        // trailing all-zero rows are impossible in a valid design, so a
        // mismatch is always an input error
        return Err(Error::DimensionMismatch {
            what: "count vector vs design rows",
            expected: x.n_rows(),
            got: rows,
        });
    }
    ProblemInstance::new(x, n, q)
}
