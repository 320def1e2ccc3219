//! Loading model instances from the two supported input layouts.

use std::fs::File;
use std::path::{Path, PathBuf};

use clap::Args;
use ipscale::harness::{read_instance, read_table_counts};
use ipscale::io::read_vector;
use ipscale::{ProblemInstance, TableSchema};

use crate::error::{CliError, CliResult};

fn open(p: &Path) -> CliResult<File> {
    File::open(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
}

fn with_path<T>(p: &Path, r: ipscale::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let c = CliError::from(e);
        match c {
            CliError::Input(m) => CliError::Input(format!("{}: {m}", p.display())),
            other => other,
        }
    })
}

pub fn read_vector_file(p: &Path) -> CliResult<Vec<f64>> {
    with_path(p, read_vector(open(p)?))
}

/// Either a table (`--table` counts CSV plus `--schema` JSON) or a raw
/// design (`--design` triplets plus `--counts`, optionally `--offset`).
#[derive(Debug, Args)]
pub struct InputArgs {
    /// Counts CSV: one column per factor holding 0-based levels, then `count`.
    #[arg(long, requires = "schema", conflicts_with = "design")]
    pub table: Option<PathBuf>,
    /// Table schema JSON: {"factors": [{"name": "A", "levels": 2}, ...], "order": 2}.
    #[arg(long, requires = "table")]
    pub schema: Option<PathBuf>,
    /// Design matrix as `row,col,value` triplets.
    #[arg(long, requires = "counts")]
    pub design: Option<PathBuf>,
    /// Count vector, a one-column CSV with a header.
    #[arg(long, requires = "design")]
    pub counts: Option<PathBuf>,
    /// Offset vector (default all ones).
    #[arg(long, requires = "design")]
    pub offset: Option<PathBuf>,
}

impl InputArgs {
    pub fn load(&self) -> CliResult<ProblemInstance> {
        match (&self.table, &self.schema, &self.design, &self.counts) {
            (Some(t), Some(s), None, None) => {
                let schema = with_path(s, TableSchema::from_json_reader(open(s)?))?;
                let counts = with_path(t, read_table_counts(open(t)?, &schema))?;
                Ok(counts.instance(&schema)?)
            }
            (None, None, Some(d), Some(n)) => {
                for p in [Some(d), Some(n), self.offset.as_ref()].into_iter().flatten() {
                    open(p)?;
                }
                Ok(read_instance(d, n, self.offset.as_deref())?)
            }
            _ => Err(CliError::Input("give either --table with --schema, or --design with --counts".into())),
        }
    }
}
