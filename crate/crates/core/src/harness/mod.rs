//! Synthetic data, replicated solver comparisons and regularization paths.

mod data;
mod experiment;
mod generate;
mod path;

pub use data::{export_instance, load_grouped_csv, read_instance, read_table_counts, GroupedTable, TableCounts};
pub use experiment::{interpolate, run_experiment, ExperimentReport, RunRecord, SolverCurve};
pub use generate::{ar1_rows, gen_gaussian_instance, gen_table_instance, generate, table_schema, ExperimentSpec, Scenario};
pub use path::{ebic, l1_path, lambda_grid, lambda_max, PathPoint, PathResult, PathSpec};
