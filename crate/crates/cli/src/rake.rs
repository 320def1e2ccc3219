//! `rake`: adjust a seed table so its margins match prescribed targets.
//!
//! The seed becomes the offset `q` of a log-affine model whose design holds
//! one indicator column per margin cell; IPS then runs on the sufficient
//! statistics given by the targets.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use clap::Args;
use ipscale::design::{build_raking_design, normalize_margins, raking_offsets};
use ipscale::io::fmt_f64;
use ipscale::{fit, ClockMode, Factor, ProblemInstance, SolverConfig, TableSchema, Variant};
use serde_json::json;

use crate::error::{CliError, CliResult};

/// Relative margin mismatch accepted after the fit.
const MARGIN_TOL: f64 = 1e-8;

#[derive(Debug, Args)]
pub struct RakeArgs {
    /// Seed table: one column per factor (0-based levels), then `count`.
    /// Cells missing from the file are structural zeros.
    #[arg(long = "seed-table")]
    pub seed_table: PathBuf,
    /// Margin targets: a subset of the factor columns, then `target`.
    /// Repeat once per margin.
    #[arg(long = "margin", required = true)]
    pub margins: Vec<PathBuf>,
    #[arg(long, default_value_t = 1e-12)]
    pub eps_tol: f64,
    #[arg(long, default_value_t = 100_000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 600.0)]
    pub t_max: f64,
    /// Output directory for `adjusted.csv` and `summary.json`.
    #[arg(long)]
    pub out: PathBuf,
}

fn reader(p: &Path) -> CliResult<csv::Reader<File>> {
    let f = File::open(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(f))
}

fn bad(p: &Path, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: line {line}: {msg}", p.display()))
}

fn parse_num<T: std::str::FromStr>(p: &Path, line: usize, what: &str, s: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| bad(p, line, format!("invalid {what} '{s}': {e}")))
}

/// Seed cells keyed by level tuple, plus the factor names.
fn read_seed(p: &Path) -> CliResult<(Vec<String>, BTreeMap<Vec<usize>, f64>)> {
    let mut rdr = reader(p)?;
    let headers = rdr.headers()?.clone();
    let value_col = headers.iter().position(|h| h == "count").ok_or_else(|| bad(p, 1, "missing 'count' column"))?;
    let names: Vec<String> = headers.iter().filter(|h| *h != "count").map(str::to_string).collect();
    let cols: Vec<usize> = (0..headers.len()).filter(|&c| c != value_col).collect();
    let mut cells = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| bad(p, line, e))?;
        let cell = cols
            .iter()
            .map(|&c| parse_num::<usize>(p, line, "level", &rec[c]))
            .collect::<CliResult<Vec<_>>>()?;
        let v: f64 = parse_num(p, line, "count", &rec[value_col])?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(bad(p, line, format!("seed values must be finite and non-negative, got {v}")));
        }
        if cells.insert(cell.clone(), v).is_some() {
            return Err(bad(p, line, format!("cell {cell:?} appears twice")));
        }
    }
    if cells.is_empty() {
        return Err(bad(p, 1, "no data rows"));
    }
    Ok((names, cells))
}

struct Margin {
    /// Factor indices in ascending order.
    factors: Vec<usize>,
    /// Targets in the design's indicator order (last factor fastest).
    targets: Vec<f64>,
}

fn read_margin(p: &Path, schema: &TableSchema) -> CliResult<Margin> {
    let mut rdr = reader(p)?;
    let headers = rdr.headers()?.clone();
    let target_col = headers.iter().position(|h| h == "target").ok_or_else(|| bad(p, 1, "missing 'target' column"))?;
    let mut file_factors = Vec::new();
    for (c, h) in headers.iter().enumerate() {
        if c == target_col {
            continue;
        }
        let k = schema
            .factor_index(h)
            .ok_or_else(|| bad(p, 1, format!("'{h}' is not a factor of the seed table")))?;
        file_factors.push((k, c));
    }
    if file_factors.is_empty() {
        return Err(bad(p, 1, "a margin needs at least one factor column"));
    }
    file_factors.sort_unstable();
    let factors: Vec<usize> = file_factors.iter().map(|f| f.0).collect();
    let width: usize = factors.iter().map(|&k| schema.factors[k].levels).product();
    let mut targets = vec![f64::NAN; width];
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| bad(p, line, e))?;
        let mut idx = 0;
        for &(f, c) in &file_factors {
            let l: usize = parse_num(p, line, "level", &rec[c])?;
            let m = schema.factors[f].levels;
            if l >= m {
                return Err(bad(p, line, format!("level {l} of '{}' exceeds the seed's {m} levels", schema.factors[f].name)));
            }
            idx = idx * m + l;
        }
        let t: f64 = parse_num(p, line, "target", &rec[target_col])?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(bad(p, line, format!("targets must be finite and non-negative, got {t}")));
        }
        if !targets[idx].is_nan() {
            return Err(bad(p, line, "margin cell appears twice"));
        }
        targets[idx] = t;
    }
    if let Some(missing) = targets.iter().position(|t| t.is_nan()) {
        return Err(bad(p, 1, format!("margin cell {missing} (last factor fastest) has no target")));
    }
    Ok(Margin { factors, targets })
}

pub fn cmd_rake(a: &RakeArgs) -> CliResult<()> {
    let (names, seed) = read_seed(&a.seed_table)?;
    let mut levels = vec![0usize; names.len()];
    for cell in seed.keys() {
        for (m, &l) in levels.iter_mut().zip(cell) {
            *m = (*m).max(l + 1);
        }
    }
    let schema = TableSchema::new(names.iter().zip(&levels).map(|(n, &m)| Factor::new(n.clone(), m)).collect(), 1)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.seed_table.display())))?;
    let margins = a
        .margins
        .iter()
        .map(|p| read_margin(p, &schema))
        .collect::<CliResult<Vec<_>>>()?;

    let totals: Vec<f64> = margins.iter().map(|m| m.targets.iter().sum()).collect();
    let total = totals[0];
    if let Some((k, t)) = totals.iter().enumerate().find(|(_, t)| (*t - total).abs() > MARGIN_TOL * total.max(f64::MIN_POSITIVE)) {
        return Err(CliError::NotConverged(format!(
            "inconsistent targets: {} sums to {} but {} sums to {t}",
            a.margins[0].display(),
            total,
            a.margins[k].display()
        )));
    }

    let subsets: Vec<Vec<usize>> = margins.iter().map(|m| m.factors.clone()).collect();
    let subsets = normalize_margins(&schema, &subsets)?;
    let design = build_raking_design(&schema, &subsets)?;
    let offsets = raking_offsets(&schema, &subsets);
    let mut stats = vec![0.0; design.n_cols()];
    stats[0] = total;
    for (m, &off) in margins.iter().zip(&offsets) {
        stats[off..off + m.targets.len()].copy_from_slice(&m.targets);
    }
    let cells = schema.all_cells()?;
    let q: Vec<f64> = cells.iter().map(|c| seed.get(c).copied().unwrap_or(0.0)).collect();
    let inst = ProblemInstance::from_sufficient_stats(design, stats, Some(q))?;
    let cfg = SolverConfig {
        eps_tol: a.eps_tol,
        max_iters: a.max_iters,
        t_max_secs: a.t_max,
        clock: ClockMode::Iterations,
        ..SolverConfig::new(Variant::Ips)
    };
    let r = fit(&inst, &cfg)?;

    let fitted = inst.design().tr_mul_vec(&r.mu);
    let mut worst = (0.0f64, 0usize);
    for j in 1..fitted.len() {
        let t = inst.suff_stats()[j];
        let rel = if t > 0.0 { (fitted[j] - t).abs() / t } else { fitted[j].abs() / total };
        if !(rel <= worst.0) {
            worst = (rel, j);
        }
    }

    fs::create_dir_all(&a.out).map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    let mu = inst.expand_rows(&r.mu);
    let mut wtr = csv::Writer::from_path(a.out.join("adjusted.csv"))?;
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    header.push("count");
    wtr.write_record(&header)?;
    for (cell, m) in cells.iter().zip(&mu) {
        let mut row: Vec<String> = cell.iter().map(usize::to_string).collect();
        row.push(fmt_f64(*m));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    let summary = json!({
        "schema": 1,
        "termination": r.termination,
        "iterations": r.iterations,
        "worst_relative_residual": worst.0,
        "worst_margin_cell": inst.design().label(worst.1),
        "flags": r.flags,
    });
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    if worst.0 > MARGIN_TOL {
        return Err(CliError::NotConverged(format!(
            "margins not matched: worst relative residual {:e} at {}",
            worst.0,
            inst.design().label(worst.1)
        )));
    }
    Ok(())
}
