//! `fit` and `path`.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use clap::Args;
use ipscale::harness::{l1_path, PathSpec};
use ipscale::io::{fmt_f64, write_vector};
use ipscale::model::{g_squared, pearson_x2};
use ipscale::{fit, ProblemInstance, Termination};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::input::InputArgs;
use crate::{require_tolerance, SolverArgs};

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PathArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Number of penalty values on the log-spaced grid.
    #[arg(long, default_value_t = 50)]
    pub grid_points: usize,
    /// Smallest penalty as a fraction of lambda_max.
    #[arg(long, default_value_t = 1e-3)]
    pub min_ratio: f64,
    /// EBIC model-space weight.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub eps_tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub abs_tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub max_iters: usize,
    /// Wall-clock limit per grid point, in seconds.
    #[arg(long, default_value_t = 600.0)]
    pub t_max: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn create(dir: &Path, name: &str) -> CliResult<File> {
    let p = dir.join(name);
    File::create(&p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
}

fn make_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

fn write_json(dir: &Path, name: &str, v: &serde_json::Value) -> CliResult<()> {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v)? + "\n").map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
}

fn write_labeled(inst: &ProblemInstance, beta: &[f64], w: File) -> CliResult<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["column_label", "estimate"])?;
    for (l, b) in inst.design().labels().iter().zip(beta) {
        wtr.write_record([l.as_str(), &fmt_f64(*b)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let inst = a.input.load()?;
    let cfg = a.solver.config()?;
    let r = fit(&inst, &cfg)?;
    make_dir(&a.out)?;
    write_labeled(&inst, &r.beta, create(&a.out, "beta.csv")?)?;
    write_vector(create(&a.out, "mu.csv")?, "mu", &inst.expand_rows(&r.mu))?;
    r.trace.write_csv(create(&a.out, "trace.csv")?)?;
    let (g2, x2) = match inst.counts() {
        Some(n) => (Some(g_squared(n, &r.mu)), Some(pearson_x2(n, &r.mu))),
        None => (None, None),
    };
    let summary = json!({
        "schema": 1,
        "solver": r.variant,
        "termination": r.termination,
        "iterations": r.iterations,
        "objective": r.objective,
        "final_rel_grad": r.trace.last().rel_grad,
        "g2": g2,
        "x2": x2,
        "wall_seconds": r.wall_seconds,
        "flags": r.flags,
    });
    write_json(&a.out, "summary.json", &summary)?;
    require_tolerance(r.termination, &format!("{}", r.variant))
}

pub fn cmd_path(a: &PathArgs) -> CliResult<()> {
    let inst = a.input.load()?;
    let spec = PathSpec {
        grid_points: a.grid_points,
        min_ratio: a.min_ratio,
        gamma: a.gamma,
        eps_tol: a.eps_tol,
        abs_tol: a.abs_tol,
        max_iters: a.max_iters,
        t_max_secs: a.t_max,
    };
    let res = l1_path(&inst, &spec)?;
    make_dir(&a.out)?;
    res.write_path_csv(create(&a.out, "path.csv")?)?;
    res.write_selected_csv(inst.design().labels(), create(&a.out, "selected.csv")?)?;
    let sel = &res.points[res.selected];
    let unconverged: Vec<f64> = res
        .points
        .iter()
        .filter(|p| p.termination != Termination::TolReached)
        .map(|p| p.lambda)
        .collect();
    let summary = json!({
        "schema": 1,
        "lambda_max": res.lambda_max,
        "selected_lambda": sel.lambda,
        "selected_support_size": sel.support_size,
        "selected_ebic": sel.ebic,
        "max_kkt_residual": res.points.iter().fold(0.0f64, |m, p| m.max(p.kkt)),
        "unconverged_lambdas": unconverged,
    });
    write_json(&a.out, "summary.json", &summary)?;
    if unconverged.is_empty() {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!(
            "{} of {} path fits stopped before reaching the tolerance",
            unconverged.len(),
            res.points.len()
        )))
    }
}
