//! Design matrices for contingency-table and general log-affine models.
//!
//! Binary designs (every entry 0 or 1, which covers all contingency-table
//! models) are stored as per-column sorted row-index lists. Everything else
//! is stored densely, column-major, since every solver walks the design one
//! column (or one block of columns) at a time.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label used for the all-ones column.
pub const INTERCEPT_LABEL: &str = "(Intercept)";

/// One categorical variable of a contingency table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub levels: usize,
}

impl Factor {
    pub fn new(name: impl Into<String>, levels: usize) -> Self {
        Self {
            name: name.into(),
            levels,
        }
    }
}

/// Cross-classification of `r` factors plus the highest interaction order
/// to include in the model matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub factors: Vec<Factor>,
    #[serde(rename = "order")]
    pub interaction_order: usize,
}

impl TableSchema {
    pub fn new(factors: Vec<Factor>, interaction_order: usize) -> Result<Self> {
        let schema = Self {
            factors,
            interaction_order,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// `r` factors, each with `levels` levels, named `A`, `B`, ...
    pub fn uniform(r: usize, levels: usize, interaction_order: usize) -> Result<Self> {
        let factors = (0..r).map(|k| Factor::new(default_factor_name(k), levels)).collect();
        Self::new(factors, interaction_order)
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::InvalidSchema("at least one factor is required".into()));
        }
        if !(1..=3).contains(&self.interaction_order) {
            return Err(Error::InvalidSchema(format!(
                "interaction order must be 1, 2 or 3, got {}",
                self.interaction_order
            )));
        }
        let mut names = BTreeSet::new();
        for f in &self.factors {
            if f.levels < 2 {
                return Err(Error::InvalidSchema(format!(
                    "factor '{}' has {} level(s); at least 2 are required",
                    f.name, f.levels
                )));
            }
            if !names.insert(f.name.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate factor name '{}'", f.name)));
            }
        }
        self.n_cells()?;
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let schema: TableSchema = serde_json::from_str(s)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_reader<R: Read>(r: R) -> Result<Self> {
        let schema: TableSchema = serde_json::from_reader(r)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    /// Number of cells `N = prod m_k`, or a size error on overflow.
    pub fn n_cells(&self) -> Result<usize> {
        self.factors.iter().try_fold(1usize, |acc, f| {
            acc.checked_mul(f.levels).ok_or_else(|| {
                Error::SizeOverflow("number of cells overflows the platform word size".into())
            })
        })
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    /// 0-based levels of the cell at row-major position `cell` (last factor fastest).
    pub fn cell_levels(&self, mut cell: usize) -> Vec<usize> {
        let mut levels = vec![0; self.factors.len()];
        for (k, f) in self.factors.iter().enumerate().rev() {
            levels[k] = cell % f.levels;
            cell /= f.levels;
        }
        levels
    }

    /// Row-major position of a cell given its 0-based levels.
    pub fn cell_index(&self, levels: &[usize]) -> usize {
        levels
            .iter()
            .zip(&self.factors)
            .fold(0, |acc, (&l, f)| acc * f.levels + l)
    }

    /// All cells in row-major order.
    pub fn all_cells(&self) -> Result<Vec<Vec<usize>>> {
        let n = self.n_cells()?;
        Ok((0..n).map(|c| self.cell_levels(c)).collect())
    }
}

fn default_factor_name(k: usize) -> String {
    let mut name = String::new();
    let mut k = k;
    loop {
        name.insert(0, (b'A' + (k % 26) as u8) as char);
        if k < 26 {
            break;
        }
        k = k / 26 - 1;
    }
    name
}

/// Sign pattern of a design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Binary,
    NonNegative,
    General,
}

impl DesignKind {
    pub fn is_non_negative(self) -> bool {
        !matches!(self, DesignKind::General)
    }
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DesignKind::Binary => "binary",
            DesignKind::NonNegative => "non-negative",
            DesignKind::General => "general",
        })
    }
}

#[derive(Debug, Clone)]
enum Storage {
    /// Sorted row indices of the ones in each column.
    SparseBinary { cols: Vec<Vec<u32>> },
    /// Column-major `n_rows x n_cols` values.
    Dense { values: Vec<f64> },
}

/// A column of a design matrix.
#[derive(Debug, Clone, Copy)]
pub enum Column<'a> {
    Ones(&'a [u32]),
    Dense(&'a [f64]),
}

impl Column<'_> {
    /// `<x_j, v>`.
    pub fn dot(&self, v: &[f64]) -> f64 {
        match *self {
            Column::Ones(rows) => rows.iter().map(|&i| v[i as usize]).sum(),
            Column::Dense(x) => x.iter().zip(v).map(|(a, b)| a * b).sum(),
        }
    }

    /// `(<x_j^+, v>, <x_j^-, v>)` with `x^+ = max(x, 0)` and `x^- = max(-x, 0)`.
    pub fn split_dot(&self, v: &[f64]) -> (f64, f64) {
        match *self {
            Column::Ones(rows) => (rows.iter().map(|&i| v[i as usize]).sum(), 0.0),
            Column::Dense(x) => x.iter().zip(v).fold((0.0, 0.0), |(p, n), (&a, &b)| {
                if a > 0.0 {
                    (p + a * b, n)
                } else if a < 0.0 {
                    (p, n - a * b)
                } else {
                    (p, n)
                }
            }),
        }
    }

    /// `mu <- mu * exp(delta * x_j)`, touching only the column support.
    pub fn scale_exp(&self, delta: f64, mu: &mut [f64]) {
        if delta == 0.0 {
            return;
        }
        match *self {
            Column::Ones(rows) => {
                let factor = delta.exp();
                for &i in rows {
                    mu[i as usize] *= factor;
                }
            }
            Column::Dense(x) => {
                for (m, &a) in mu.iter_mut().zip(x) {
                    if a != 0.0 {
                        *m *= (delta * a).exp();
                    }
                }
            }
        }
    }

    /// `out += delta * x_j`.
    pub fn axpy(&self, delta: f64, out: &mut [f64]) {
        match *self {
            Column::Ones(rows) => {
                for &i in rows {
                    out[i as usize] += delta;
                }
            }
            Column::Dense(x) => {
                for (o, &a) in out.iter_mut().zip(x) {
                    *o += delta * a;
                }
            }
        }
    }

    /// Calls `f(i, x_ij)` for every structurally non-zero entry.
    pub fn for_each_nonzero(&self, mut f: impl FnMut(usize, f64)) {
        match *self {
            Column::Ones(rows) => rows.iter().for_each(|&i| f(i as usize, 1.0)),
            Column::Dense(x) => x
                .iter()
                .enumerate()
                .filter(|(_, &a)| a != 0.0)
                .for_each(|(i, &a)| f(i, a)),
        }
    }
}

/// An `N x p` design matrix with a cached `R = max_i sum_j |x_ij|`.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    storage: Storage,
    n_rows: usize,
    n_cols: usize,
    kind: DesignKind,
    row_sum_max: f64,
    labels: Vec<String>,
}

impl DesignMatrix {
    /// Builds a binary design from per-column lists of the rows holding a one.
    pub fn sparse_binary(n_rows: usize, cols: Vec<Vec<usize>>, labels: Vec<String>) -> Result<Self> {
        if n_rows > u32::MAX as usize {
            return Err(Error::SizeOverflow(format!("{n_rows} rows exceed the sparse index range")));
        }
        let n_cols = cols.len();
        check_labels(n_cols, &labels)?;
        let mut row_counts = vec![0u32; n_rows];
        let mut packed = Vec::with_capacity(n_cols);
        for (j, col) in cols.into_iter().enumerate() {
            if col.is_empty() {
                return Err(Error::InvalidDesign(format!("column {j} ('{}') is all zero", labels[j])));
            }
            for w in col.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::InvalidDesign(format!(
                        "column {j} row indices must be strictly increasing"
                    )));
                }
            }
            if let Some(&last) = col.last() {
                if last >= n_rows {
                    return Err(Error::InvalidDesign(format!(
                        "column {j} references row {last} but the design has {n_rows} rows"
                    )));
                }
            }
            for &i in &col {
                row_counts[i] += 1;
            }
            packed.push(col.into_iter().map(|i| i as u32).collect::<Vec<u32>>());
        }
        if let Some(i) = row_counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidDesign(format!("row {i} is all zero")));
        }
        let row_sum_max = row_counts.iter().copied().max().unwrap_or(0) as f64;
        Ok(Self {
            storage: Storage::SparseBinary { cols: packed },
            n_rows,
            n_cols,
            kind: DesignKind::Binary,
            row_sum_max,
            labels,
        })
    }

    /// Builds a design from column-major values. The kind is inferred; a
    /// design whose entries are all 0 or 1 is stored sparse.
    pub fn from_columns(n_rows: usize, n_cols: usize, values: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if values.len() != n_rows * n_cols {
            return Err(Error::DimensionMismatch {
                what: "dense design values",
                expected: n_rows * n_cols,
                got: values.len(),
            });
        }
        check_labels(n_cols, &labels)?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDesign(format!(
                "non-finite entry at row {}, column {}",
                pos % n_rows.max(1),
                pos / n_rows.max(1)
            )));
        }
        let binary = values.iter().all(|&v| v == 0.0 || v == 1.0);
        if binary {
            let cols = (0..n_cols)
                .map(|j| {
                    (0..n_rows)
                        .filter(|&i| values[j * n_rows + i] == 1.0)
                        .collect::<Vec<_>>()
                })
                .collect();
            return Self::sparse_binary(n_rows, cols, labels);
        }
        let kind = if values.iter().all(|&v| v >= 0.0) {
            DesignKind::NonNegative
        } else {
            DesignKind::General
        };
        let mut abs_sums = vec![0.0; n_rows];
        for j in 0..n_cols {
            let col = &values[j * n_rows..(j + 1) * n_rows];
            if col.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidDesign(format!("column {j} ('{}') is all zero", labels[j])));
            }
            for (s, &v) in abs_sums.iter_mut().zip(col) {
                *s += v.abs();
            }
        }
        if let Some(i) = abs_sums.iter().position(|&s| s == 0.0) {
            return Err(Error::InvalidDesign(format!("row {i} is all zero")));
        }
        let row_sum_max = abs_sums.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            storage: Storage::Dense { values },
            n_rows,
            n_cols,
            kind,
            row_sum_max,
            labels,
        })
    }

    /// Builds a design from row-major values.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<String>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != n_cols) {
            return Err(Error::DimensionMismatch {
                what: "design row length",
                expected: n_cols,
                got: bad.len(),
            });
        }
        let mut values = vec![0.0; n_rows * n_cols];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                values[j * n_rows + i] = v;
            }
        }
        Self::from_columns(n_rows, n_cols, values, labels)
    }

    /// Default labels `x0, x1, ...`.
    pub fn default_labels(n_cols: usize) -> Vec<String> {
        (0..n_cols).map(|j| format!("x{j}")).collect()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, Storage::SparseBinary { .. })
    }

    /// `R = ||X||_inf = max_i sum_j |x_ij|`.
    pub fn row_sum_max(&self) -> f64 {
        self.row_sum_max
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, j: usize) -> &str {
        &self.labels[j]
    }

    pub fn nnz(&self) -> usize {
        match &self.storage {
            Storage::SparseBinary { cols } => cols.iter().map(Vec::len).sum(),
            Storage::Dense { values } => values.iter().filter(|&&v| v != 0.0).count(),
        }
    }

    pub fn column(&self, j: usize) -> Column<'_> {
        match &self.storage {
            Storage::SparseBinary { cols } => Column::Ones(&cols[j]),
            Storage::Dense { values } => Column::Dense(&values[j * self.n_rows..(j + 1) * self.n_rows]),
        }
    }

    /// Exact inner product `<x_j, v>`; a gather-sum for sparse columns.
    pub fn column_dot(&self, j: usize, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.n_rows);
        self.column(j).dot(v)
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match &self.storage {
            Storage::SparseBinary { cols } => {
                if cols[j].binary_search(&(i as u32)).is_ok() {
                    1.0
                } else {
                    0.0
                }
            }
            Storage::Dense { values } => values[j * self.n_rows + i],
        }
    }

    /// True when column 0 is the all-ones intercept column.
    pub fn has_intercept(&self) -> bool {
        if self.n_cols == 0 {
            return false;
        }
        match self.column(0) {
            Column::Ones(rows) => rows.len() == self.n_rows,
            Column::Dense(x) => x.iter().all(|&v| v == 1.0),
        }
    }

    /// `X beta`.
    pub fn mul_vec(&self, beta: &[f64]) -> Vec<f64> {
        debug_assert_eq!(beta.len(), self.n_cols);
        let mut out = vec![0.0; self.n_rows];
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                self.column(j).axpy(b, &mut out);
            }
        }
        out
    }

    /// `X^T v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n_cols).map(|j| self.column_dot(j, v)).collect()
    }

    /// Signed row sums `x_{i+}`.
    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_rows];
        for j in 0..self.n_cols {
            self.column(j).axpy(1.0, &mut sums);
        }
        sums
    }

    /// Signed row sums over a subset of columns.
    pub fn row_sums_over(&self, cols: &[usize]) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_rows];
        for &j in cols {
            self.column(j).axpy(1.0, &mut sums);
        }
        sums
    }

    /// Non-zero entries of every row, as `(column, value)` pairs.
    pub fn row_entries(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows = vec![Vec::new(); self.n_rows];
        for j in 0..self.n_cols {
            self.column(j).for_each_nonzero(|i, x| rows[i].push((j, x)));
        }
        rows
    }

    /// Column-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut values = vec![0.0; self.n_rows * self.n_cols];
        for j in 0..self.n_cols {
            let col = &mut values[j * self.n_rows..(j + 1) * self.n_rows];
            self.column(j).for_each_nonzero(|i, x| col[i] = x);
        }
        values
    }

    /// Dense copy as an nalgebra matrix.
    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_vec(self.n_rows, self.n_cols, self.to_dense())
    }

    /// Keeps the listed rows (in the given order).
    pub fn select_rows(&self, keep: &[usize]) -> Result<Self> {
        match &self.storage {
            Storage::SparseBinary { cols } => {
                let mut new_index = vec![u32::MAX; self.n_rows];
                for (new, &old) in keep.iter().enumerate() {
                    new_index[old] = new as u32;
                }
                let cols = cols
                    .iter()
                    .map(|c| {
                        let mut v: Vec<usize> = c
                            .iter()
                            .filter(|&&i| new_index[i as usize] != u32::MAX)
                            .map(|&i| new_index[i as usize] as usize)
                            .collect();
                        v.sort_unstable();
                        v
                    })
                    .collect();
                Self::sparse_binary(keep.len(), cols, self.labels.clone())
            }
            Storage::Dense { values } => {
                let n = keep.len();
                let mut out = vec![0.0; n * self.n_cols];
                for j in 0..self.n_cols {
                    for (new, &old) in keep.iter().enumerate() {
                        out[j * n + new] = values[j * self.n_rows + old];
                    }
                }
                Self::from_columns(n, self.n_cols, out, self.labels.clone())
            }
        }
    }

    /// Keeps the listed columns (in the given order).
    pub fn select_columns(&self, keep: &[usize]) -> Result<Self> {
        let labels = keep.iter().map(|&j| self.labels[j].clone()).collect();
        match &self.storage {
            Storage::SparseBinary { cols } => {
                let cols = keep
                    .iter()
                    .map(|&j| cols[j].iter().map(|&i| i as usize).collect())
                    .collect();
                Self::sparse_binary(self.n_rows, cols, labels)
            }
            Storage::Dense { values } => {
                let mut out = Vec::with_capacity(self.n_rows * keep.len());
                for &j in keep {
                    out.extend_from_slice(&values[j * self.n_rows..(j + 1) * self.n_rows]);
                }
                Self::from_columns(self.n_rows, keep.len(), out, labels)
            }
        }
    }

    /// Gathers a block of columns into a representation suited to block
    /// Newton steps.
    pub fn block(&self, cols: &[usize]) -> ColumnBlock {
        ColumnBlock::new(self, cols)
    }

    /// Writes the design as `row,col,value` triplets (0-based, header line).
    pub fn write_triplets<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["row", "col", "value"])?;
        for j in 0..self.n_cols {
            let mut err = None;
            self.column(j).for_each_nonzero(|i, x| {
                if err.is_none() {
                    if let Err(e) = wtr.write_record([i.to_string(), j.to_string(), crate::io::fmt_f64(x)]) {
                        err = Some(e);
                    }
                }
            });
            if let Some(e) = err {
                return Err(e.into());
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a `row,col,value` triplet file. Dimensions are the largest
    /// indices plus one unless given explicitly.
    pub fn read_triplets<R: Read>(r: R, dims: Option<(usize, usize)>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        let expected = ["row", "col", "value"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header 'row,col,value', found '{}'", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut triplets = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            if rec.len() != 3 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 3 fields, found {}", rec.len()),
                });
            }
            let i: usize = parse_field(&rec[0], line, "row")?;
            let j: usize = parse_field(&rec[1], line, "col")?;
            let v: f64 = parse_field(&rec[2], line, "value")?;
            triplets.push((i, j, v));
        }
        let (n_rows, n_cols) = match dims {
            Some(d) => d,
            None => triplets
                .iter()
                .fold((0, 0), |(r, c), &(i, j, _)| (r.max(i + 1), c.max(j + 1))),
        };
        Self::from_triplets(n_rows, n_cols, &triplets, Self::default_labels(n_cols))
    }

    /// Builds a design from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
        labels: Vec<String>,
    ) -> Result<Self> {
        for &(i, j, _) in triplets {
            if i >= n_rows || j >= n_cols {
                return Err(Error::InvalidDesign(format!(
                    "triplet ({i}, {j}) outside a {n_rows} x {n_cols} design"
                )));
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(i, j, _)| (j, i));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(sorted.len());
        for t in sorted {
            match merged.last_mut() {
                Some(last) if last.0 == t.0 && last.1 == t.1 => last.2 += t.2,
                _ => merged.push(t),
            }
        }
        merged.retain(|t| t.2 != 0.0);
        if merged.iter().all(|t| t.2 == 1.0) {
            let mut cols = vec![Vec::new(); n_cols];
            for (i, j, _) in merged {
                cols[j].push(i);
            }
            return Self::sparse_binary(n_rows, cols, labels);
        }
        let mut values = vec![0.0; n_rows * n_cols];
        for (i, j, v) in merged {
            values[j * n_rows + i] = v;
        }
        Self::from_columns(n_rows, n_cols, values, labels)
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.parse().map_err(|e: T::Err| Error::Parse {
        line,
        message: format!("invalid {what} '{s}': {e}"),
    })
}

fn check_labels(n_cols: usize, labels: &[String]) -> Result<()> {
    if labels.len() != n_cols {
        return Err(Error::DimensionMismatch {
            what: "column labels",
            expected: n_cols,
            got: labels.len(),
        });
    }
    Ok(())
}

/// Copies the lower triangle of a column-major `g x g` buffer to the upper.
fn mirror_lower(buf: &mut [f64], g: usize) {
    for b in 0..g {
        for a in b + 1..g {
            buf[b + a * g] = buf[a + b * g];
        }
    }
}

/// Column subset of a design, laid out for repeated block products.
#[derive(Debug, Clone)]
pub struct ColumnBlock {
    cols: Vec<usize>,
    n_rows: usize,
    repr: BlockRepr,
}

#[derive(Debug, Clone)]
enum BlockRepr {
    /// Row-compressed block-local column indices of the ones.
    Sparse { row_ptr: Vec<usize>, row_cols: Vec<u32> },
    /// Column-major `n_rows x g` values.
    Dense { values: Vec<f64> },
}

impl ColumnBlock {
    fn new(x: &DesignMatrix, cols: &[usize]) -> Self {
        let n = x.n_rows();
        let repr = match &x.storage {
            Storage::SparseBinary { cols: all } => {
                let mut counts = vec![0usize; n + 1];
                for &j in cols {
                    for &i in &all[j] {
                        counts[i as usize + 1] += 1;
                    }
                }
                for i in 0..n {
                    counts[i + 1] += counts[i];
                }
                let row_ptr = counts.clone();
                let mut fill = counts;
                let mut row_cols = vec![0u32; row_ptr[n]];
                for (a, &j) in cols.iter().enumerate() {
                    for &i in &all[j] {
                        let slot = &mut fill[i as usize];
                        row_cols[*slot] = a as u32;
                        *slot += 1;
                    }
                }
                BlockRepr::Sparse { row_ptr, row_cols }
            }
            Storage::Dense { values } => {
                let mut out = Vec::with_capacity(n * cols.len());
                for &j in cols {
                    out.extend_from_slice(&values[j * n..(j + 1) * n]);
                }
                BlockRepr::Dense { values: out }
            }
        };
        Self {
            cols: cols.to_vec(),
            n_rows: n,
            repr,
        }
    }

    /// Design column indices of this block.
    pub fn columns(&self) -> &[usize] {
        &self.cols
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    /// `out = X_k d`.
    pub fn mul_into(&self, d: &[f64], out: &mut [f64]) {
        let g = self.cols.len();
        debug_assert_eq!(d.len(), g);
        match &self.repr {
            BlockRepr::Sparse { row_ptr, row_cols } => {
                for i in 0..self.n_rows {
                    out[i] = row_cols[row_ptr[i]..row_ptr[i + 1]]
                        .iter()
                        .map(|&a| d[a as usize])
                        .sum();
                }
            }
            BlockRepr::Dense { values } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (a, &da) in d.iter().enumerate() {
                    if da != 0.0 {
                        let col = &values[a * self.n_rows..(a + 1) * self.n_rows];
                        for (o, &x) in out.iter_mut().zip(col) {
                            *o += da * x;
                        }
                    }
                }
            }
        }
    }

    /// `X_k^T v`.
    pub fn tr_mul(&self, v: &[f64]) -> Vec<f64> {
        let g = self.cols.len();
        match &self.repr {
            BlockRepr::Sparse { row_ptr, row_cols } => {
                let mut out = vec![0.0; g];
                for i in 0..self.n_rows {
                    let vi = v[i];
                    for &a in &row_cols[row_ptr[i]..row_ptr[i + 1]] {
                        out[a as usize] += vi;
                    }
                }
                out
            }
            BlockRepr::Dense { values } => (0..g)
                .map(|a| {
                    values[a * self.n_rows..(a + 1) * self.n_rows]
                        .iter()
                        .zip(v)
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect(),
        }
    }

    /// `sum_i w_i x_ik x_ik^T` as a dense `g x g` matrix.
    pub fn weighted_gram(&self, w: &[f64]) -> DMatrix<f64> {
        let g = self.cols.len();
        let mut h = DMatrix::<f64>::zeros(g, g);
        match &self.repr {
            BlockRepr::Sparse { row_ptr, row_cols } => {
                // row entries are ascending, so (a, b) with b <= a lands in
                // the lower triangle at a + b * g
                let buf = h.as_mut_slice();
                for i in 0..self.n_rows {
                    let wi = w[i];
                    if wi == 0.0 {
                        continue;
                    }
                    let row = &row_cols[row_ptr[i]..row_ptr[i + 1]];
                    for (s, &a) in row.iter().enumerate() {
                        for &b in &row[..=s] {
                            buf[a as usize + b as usize * g] += wi;
                        }
                    }
                }
                mirror_lower(buf, g);
            }
            BlockRepr::Dense { values } => {
                let n = self.n_rows;
                let mut scaled = vec![0.0; n];
                let buf = h.as_mut_slice();
                for a in 0..g {
                    let xa = &values[a * n..(a + 1) * n];
                    for ((s, &x), &wi) in scaled.iter_mut().zip(xa).zip(w) {
                        *s = x * wi;
                    }
                    for b in 0..=a {
                        let xb = &values[b * n..(b + 1) * n];
                        buf[a + b * g] = scaled.iter().zip(xb).map(|(s, x)| s * x).sum();
                    }
                }
                mirror_lower(buf, g);
            }
        }
        h
    }

    /// Row sums `x_{i+,k}` restricted to the block.
    pub fn row_sums(&self) -> Vec<f64> {
        match &self.repr {
            BlockRepr::Sparse { row_ptr, .. } => (0..self.n_rows).map(|i| (row_ptr[i + 1] - row_ptr[i]) as f64).collect(),
            BlockRepr::Dense { values } => {
                let mut out = vec![0.0; self.n_rows];
                for a in 0..self.cols.len() {
                    for (o, &x) in out.iter_mut().zip(&values[a * self.n_rows..(a + 1) * self.n_rows]) {
                        *o += x;
                    }
                }
                out
            }
        }
    }
}

/// Factor subsets making up the model terms up to `schema.interaction_order`:
/// main effects, then pairs, then triples, each in lexicographic order.
fn model_terms(schema: &TableSchema) -> Vec<Vec<usize>> {
    let r = schema.n_factors();
    let mut terms: Vec<Vec<usize>> = (0..r).map(|k| vec![k]).collect();
    if schema.interaction_order >= 2 {
        for a in 0..r {
            for b in a + 1..r {
                terms.push(vec![a, b]);
            }
        }
    }
    if schema.interaction_order >= 3 {
        for a in 0..r {
            for b in a + 1..r {
                for c in b + 1..r {
                    terms.push(vec![a, b, c]);
                }
            }
        }
    }
    terms
}

/// How a term maps a cell to a column.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Coding {
    /// Reference level 1 dropped: levels 2..m_k.
    Dummy,
    /// One indicator per level.
    Indicator,
}

struct TermLayout {
    factors: Vec<usize>,
    offset: usize,
}

fn term_width(schema: &TableSchema, factors: &[usize], coding: Coding) -> Result<usize> {
    factors.iter().try_fold(1usize, |acc, &k| {
        let m = schema.factors[k].levels;
        let w = if coding == Coding::Dummy { m - 1 } else { m };
        acc.checked_mul(w)
            .ok_or_else(|| Error::SizeOverflow("number of design columns overflows".into()))
    })
}

fn term_labels(schema: &TableSchema, factors: &[usize], coding: Coding, labels: &mut Vec<String>) {
    let widths: Vec<usize> = factors
        .iter()
        .map(|&k| {
            let m = schema.factors[k].levels;
            if coding == Coding::Dummy {
                m - 1
            } else {
                m
            }
        })
        .collect();
    let total: usize = widths.iter().product();
    let base = if coding == Coding::Dummy { 2 } else { 1 };
    for idx in 0..total {
        let mut rem = idx;
        let mut parts = vec![String::new(); factors.len()];
        for (s, &k) in factors.iter().enumerate().rev() {
            let level = rem % widths[s] + base;
            rem /= widths[s];
            parts[s] = format!("{}={}", schema.factors[k].name, level);
        }
        labels.push(parts.join(":"));
    }
}

fn build_from_terms(
    schema: &TableSchema,
    cells: &[Vec<usize>],
    terms: &[Vec<usize>],
    coding: Coding,
) -> Result<(Vec<Vec<usize>>, Vec<String>)> {
    let mut layouts = Vec::with_capacity(terms.len());
    let mut labels = vec![INTERCEPT_LABEL.to_string()];
    let mut offset = 1usize;
    for t in terms {
        let width = term_width(schema, t, coding)?;
        layouts.push(TermLayout {
            factors: t.clone(),
            offset,
        });
        term_labels(schema, t, coding, &mut labels);
        offset = offset
            .checked_add(width)
            .ok_or_else(|| Error::SizeOverflow("number of design columns overflows".into()))?;
    }
    let p = offset;
    let mut cols: Vec<Vec<usize>> = vec![Vec::new(); p];
    cols[0] = (0..cells.len()).collect();
    for (row, levels) in cells.iter().enumerate() {
        if levels.len() != schema.n_factors() {
            return Err(Error::DimensionMismatch {
                what: "cell levels",
                expected: schema.n_factors(),
                got: levels.len(),
            });
        }
        for (k, (&l, f)) in levels.iter().zip(&schema.factors).enumerate() {
            if l >= f.levels {
                return Err(Error::InvalidSchema(format!(
                    "cell {row}: level {} of factor '{}' exceeds its {} levels",
                    l + 1,
                    schema.factors[k].name,
                    f.levels
                )));
            }
        }
        'term: for layout in &layouts {
            let mut idx = 0usize;
            for &k in &layout.factors {
                let m = schema.factors[k].levels;
                let l = levels[k];
                match coding {
                    Coding::Dummy => {
                        if l == 0 {
                            continue 'term;
                        }
                        idx = idx * (m - 1) + (l - 1);
                    }
                    Coding::Indicator => idx = idx * m + l,
                }
            }
            cols[layout.offset + idx].push(row);
        }
    }
    Ok((cols, labels))
}

/// Binary model matrix `[1, X_1, ..., X_r, X_1*X_2, ...]` for a complete
/// table, with reference-level (level 1) dummy coding and interactions up to
/// the schema's order. Cells enumerate row-major, last factor fastest.
pub fn build_table_design(schema: &TableSchema) -> Result<DesignMatrix> {
    schema.validate()?;
    let cells = schema.all_cells()?;
    build_table_design_for_cells(schema, &cells)
}

/// Same coding as [`build_table_design`], restricted to the given cells
/// (0-based levels per factor). Used for partially observed tables.
///
/// Columns with no support among the given cells are rejected; see
/// [`build_observed_table_design`] for a variant that drops them.
pub fn build_table_design_for_cells(schema: &TableSchema, cells: &[Vec<usize>]) -> Result<DesignMatrix> {
    schema.validate()?;
    let terms = model_terms(schema);
    let (cols, labels) = build_from_terms(schema, cells, &terms, Coding::Dummy)?;
    DesignMatrix::sparse_binary(cells.len(), cols, labels)
}

/// Like [`build_table_design_for_cells`] but silently drops columns that have
/// no support among the observed cells. Returns the design and the indices
/// (into the complete-table column list) that were kept.
pub fn build_observed_table_design(schema: &TableSchema, cells: &[Vec<usize>]) -> Result<(DesignMatrix, Vec<usize>)> {
    schema.validate()?;
    let terms = model_terms(schema);
    let (cols, labels) = build_from_terms(schema, cells, &terms, Coding::Dummy)?;
    let kept: Vec<usize> = (0..cols.len()).filter(|&j| !cols[j].is_empty()).collect();
    let mut cols = cols;
    let mut labels = labels;
    let cols: Vec<Vec<usize>> = kept.iter().map(|&j| std::mem::take(&mut cols[j])).collect();
    let labels: Vec<String> = kept.iter().map(|&j| std::mem::take(&mut labels[j])).collect();
    Ok((DesignMatrix::sparse_binary(cells.len(), cols, labels)?, kept))
}

/// Raking design: intercept plus one indicator column per cell of each
/// requested margin (no reference level dropped), so that `x_j^T mu` is the
/// corresponding margin of `mu`.
pub fn build_raking_design(schema: &TableSchema, margins: &[Vec<usize>]) -> Result<DesignMatrix> {
    schema.validate()?;
    let terms = normalize_margins(schema, margins)?;
    let cells = schema.all_cells()?;
    let (cols, labels) = build_from_terms(schema, &cells, &terms, Coding::Indicator)?;
    DesignMatrix::sparse_binary(cells.len(), cols, labels)
}

/// Validates margin subsets and sorts the factors within each.
pub fn normalize_margins(schema: &TableSchema, margins: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    if margins.is_empty() {
        return Err(Error::InvalidSchema("at least one margin is required".into()));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(margins.len());
    for m in margins {
        if m.is_empty() {
            return Err(Error::InvalidSchema("margin subsets must be non-empty".into()));
        }
        let mut sorted = m.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSchema(format!("margin {m:?} repeats a factor")));
        }
        if let Some(&bad) = sorted.iter().find(|&&k| k >= schema.n_factors()) {
            return Err(Error::InvalidSchema(format!(
                "margin references factor {bad} but the schema has {}",
                schema.n_factors()
            )));
        }
        if !seen.insert(sorted.clone()) {
            return Err(Error::InvalidSchema(format!("duplicate margin {m:?}")));
        }
        out.push(sorted);
    }
    Ok(out)
}

/// Column offset of each margin's first indicator in a raking design built
/// from `margins` (after [`normalize_margins`]).
pub fn raking_offsets(schema: &TableSchema, margins: &[Vec<usize>]) -> Vec<usize> {
    let mut offset = 1;
    margins
        .iter()
        .map(|m| {
            let start = offset;
            offset += m.iter().map(|&k| schema.factors[k].levels).product::<usize>();
            start
        })
        .collect()
}
