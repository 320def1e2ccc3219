//! Replicated solver comparisons: every solver of the roster runs on every
//! replication, and the traces are averaged on a common time grid.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::generate::{generate, ExperimentSpec};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::solvers::{fit, ConvergenceTrace, SolverConfig, Termination, Variant};

/// Outcome of one (replication, solver) run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub replication: usize,
    pub variant: Variant,
    /// `None` when the run failed.
    pub termination: Option<Termination>,
    pub error: Option<String>,
    pub iterations: usize,
    /// Seconds, or iterations under the iteration clock.
    pub time: f64,
    pub final_rel_grad: f64,
    pub final_est_err: Option<f64>,
    pub objective: f64,
}

/// Averaged curves of one solver.
#[derive(Debug, Clone, Serialize)]
pub struct SolverCurve {
    pub variant: Variant,
    pub time: Vec<f64>,
    pub rel_grad: Vec<f64>,
    pub est_err: Option<Vec<f64>>,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub curves: Vec<SolverCurve>,
    pub runs: Vec<RunRecord>,
    /// Replications whose instance could not be generated.
    pub generation_failures: Vec<String>,
}

/// Value of a piecewise-linear curve at `t`, held constant past its ends.
pub fn interpolate(ts: &[f64], vs: &[f64], t: f64) -> f64 {
    match ts.iter().position(|&x| x >= t) {
        None => *vs.last().expect("non-empty curve"),
        Some(0) => vs[0],
        Some(k) => {
            let (t0, t1) = (ts[k - 1], ts[k]);
            if t1 == t0 {
                vs[k]
            } else {
                vs[k - 1] + (vs[k] - vs[k - 1]) * (t - t0) / (t1 - t0)
            }
        }
    }
}

fn run_one(spec: &ExperimentSpec, rep: usize) -> std::result::Result<Vec<(RunRecord, Option<ConvergenceTrace>)>, String> {
    let inst = generate(spec, rep).map_err(|e| format!("replication {rep}: {e}"))?;
    Ok(spec
        .roster
        .iter()
        .map(|&variant| {
            let cfg = SolverConfig {
                eps_tol: spec.eps_tol,
                t_max_secs: spec.t_max_secs,
                block_size: spec.block_size,
                seed: spec.seed.wrapping_add(rep as u64),
                clock: spec.clock,
                ..SolverConfig::new(variant)
            };
            match fit(&inst, &cfg) {
                Ok(r) => {
                    let last = *r.trace.last();
                    let record = RunRecord {
                        replication: rep,
                        variant,
                        termination: Some(r.termination),
                        error: None,
                        iterations: r.iterations,
                        time: last.wall_seconds,
                        final_rel_grad: last.rel_grad,
                        final_est_err: last.est_err,
                        objective: r.objective,
                    };
                    (record, Some(r.trace))
                }
                Err(e) => {
                    log::warn!("{variant} failed on replication {rep}: {e}");
                    let record = RunRecord {
                        replication: rep,
                        variant,
                        termination: None,
                        error: Some(e.to_string()),
                        iterations: 0,
                        time: f64::NAN,
                        final_rel_grad: f64::NAN,
                        final_est_err: None,
                        objective: f64::NAN,
                    };
                    (record, None)
                }
            }
        })
        .collect())
}

/// Runs the experiment. Failed runs are counted and excluded from the
/// averages.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let reps: Vec<usize> = (0..spec.replications).collect();
    let outcomes: Vec<_> = if spec.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start {} worker threads: {e}", spec.jobs)))?;
        pool.install(|| reps.par_iter().map(|&r| run_one(spec, r)).collect())
    } else {
        reps.iter().map(|&r| run_one(spec, r)).collect()
    };

    let mut runs = Vec::new();
    let mut traces: Vec<(Variant, ConvergenceTrace)> = Vec::new();
    let mut generation_failures = Vec::new();
    for out in outcomes {
        match out {
            Ok(list) => {
                for (record, trace) in list {
                    if let Some(t) = trace {
                        traces.push((record.variant, t));
                    }
                    runs.push(record);
                }
            }
            Err(msg) => generation_failures.push(msg),
        }
    }

    let curves = spec
        .roster
        .iter()
        .map(|&variant| {
            let mine: Vec<&ConvergenceTrace> = traces.iter().filter(|(v, _)| *v == variant).map(|(_, t)| t).collect();
            let failed = runs.iter().filter(|r| r.variant == variant && r.termination.is_none()).count();
            average_curves(variant, &mine, spec.grid_points, failed)
        })
        .collect();
    Ok(ExperimentReport {
        spec: spec.clone(),
        curves,
        runs,
        generation_failures,
    })
}

fn average_curves(variant: Variant, traces: &[&ConvergenceTrace], points: usize, failed: usize) -> SolverCurve {
    if traces.is_empty() {
        return SolverCurve {
            variant,
            time: Vec::new(),
            rel_grad: Vec::new(),
            est_err: None,
            completed: 0,
            failed,
        };
    }
    let horizon = traces.iter().map(|t| t.last().wall_seconds).fold(0.0, f64::max);
    let time: Vec<f64> = (0..points).map(|k| horizon * k as f64 / (points - 1) as f64).collect();
    let mean_of = |pick: &dyn Fn(&ConvergenceTrace) -> Option<Vec<f64>>| -> Option<Vec<f64>> {
        let mut acc = vec![0.0; points];
        for tr in traces {
            let ts: Vec<f64> = tr.records.iter().map(|r| r.wall_seconds).collect();
            let vs = pick(tr)?;
            for (a, &t) in acc.iter_mut().zip(&time) {
                *a += interpolate(&ts, &vs, t);
            }
        }
        Some(acc.iter().map(|a| a / traces.len() as f64).collect())
    };
    let rel_grad = mean_of(&|tr| Some(tr.records.iter().map(|r| r.rel_grad).collect())).expect("relative gradient always recorded");
    let est_err = mean_of(&|tr| tr.records.iter().map(|r| r.est_err).collect());
    SolverCurve {
        variant,
        time,
        rel_grad,
        est_err,
        completed: traces.len(),
        failed,
    }
}

impl ExperimentReport {
    /// Writes `<solver>.csv` per solver (`time_s,rel_grad[,est_err]`),
    /// `summary.csv` (one row per run) and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for c in &self.curves {
            let mut wtr = csv::Writer::from_path(dir.join(format!("{}.csv", c.variant)))?;
            if c.est_err.is_some() {
                wtr.write_record(["time_s", "rel_grad", "est_err"])?;
            } else {
                wtr.write_record(["time_s", "rel_grad"])?;
            }
            for k in 0..c.time.len() {
                let mut row = vec![fmt_f64(c.time[k]), fmt_f64(c.rel_grad[k])];
                if let Some(e) = &c.est_err {
                    row.push(fmt_f64(e[k]));
                }
                wtr.write_record(&row)?;
            }
            wtr.flush()?;
        }
        let mut wtr = csv::Writer::from_path(dir.join("summary.csv"))?;
        wtr.write_record(["solver", "replication", "termination", "iterations", "time_s", "final_rel_grad", "final_est_err", "objective", "error"])?;
        for r in &self.runs {
            wtr.write_record([
                r.variant.name().to_string(),
                r.replication.to_string(),
                r.termination.map(|t| t.as_str().to_string()).unwrap_or_else(|| "FAILED".into()),
                r.iterations.to_string(),
                fmt_f64(r.time),
                fmt_f64(r.final_rel_grad),
                r.final_est_err.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.objective),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        wtr.flush()?;
        let json = serde_json::json!({
            "schema": 1,
            "scenario": self.spec.scenario,
            "replications": self.spec.replications,
            "solvers": self.curves.iter().map(|c| serde_json::json!({
                "solver": c.variant,
                "completed": c.completed,
                "failed": c.failed,
            })).collect::<Vec<_>>(),
            "generation_failures": self.generation_failures,
        });
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&json)? + "\n")?;
        Ok(())
    }
}
