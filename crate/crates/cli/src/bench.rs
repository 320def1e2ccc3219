//! `bench` and `gen` over the synthetic scenarios.

use std::path::PathBuf;

use clap::Args;
use ipscale::harness::{export_instance, generate, run_experiment, ExperimentSpec, Scenario};
use ipscale::Variant;

use crate::error::{CliError, CliResult};
use crate::ClockArg;

/// Scenario size options shared by `bench` and `gen`.
#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// table-moderate, table-large, nonneg-small, nonneg-large, general or l1-path.
    pub scenario: String,
    /// Shrink factor in (0, 1] for table levels or Gaussian N and p.
    #[arg(long, default_value_t = 0.1, conflicts_with = "full_scale")]
    pub scale: f64,
    /// Run at the full published problem sizes.
    #[arg(long)]
    pub full_scale: bool,
    /// Rows of a Gaussian design (overrides the scaled default).
    #[arg(long)]
    pub n: Option<usize>,
    /// Columns of a Gaussian design, intercept included.
    #[arg(long)]
    pub p: Option<usize>,
    /// Extra randomly placed non-zero table coefficients.
    #[arg(long, default_value_t = 0)]
    pub extra_active: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ScaleArgs {
    fn spec(&self) -> CliResult<ExperimentSpec> {
        let scenario: Scenario = self.scenario.parse()?;
        Ok(ExperimentSpec {
            scale_factor: if self.full_scale { 1.0 } else { self.scale },
            n_rows: self.n,
            n_cols: self.p,
            extra_active: self.extra_active,
            seed: self.seed,
            ..ExperimentSpec::new(scenario)
        })
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub scale: ScaleArgs,
    /// Comma-separated solvers (default depends on the scenario).
    #[arg(long, value_delimiter = ',')]
    pub roster: Option<Vec<Variant>>,
    #[arg(long, default_value_t = 20)]
    pub replications: usize,
    /// Replications run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub eps_tol: f64,
    /// Wall-clock limit per run, in seconds.
    #[arg(long, default_value_t = 600.0)]
    pub t_max: f64,
    #[arg(long, default_value_t = 200)]
    pub block_size: usize,
    #[arg(long, value_enum, default_value = "wall")]
    pub clock: ClockArg,
    /// Points of the common time grid for averaged curves.
    #[arg(long, default_value_t = 101)]
    pub grid_points: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub scale: ScaleArgs,
    /// Replication index; selects the random stream.
    #[arg(long, default_value_t = 0)]
    pub replication: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Solvers compared by default on each scenario.
fn default_roster(s: Scenario) -> Vec<Variant> {
    match s {
        Scenario::TableModerate | Scenario::TableLarge => vec![Variant::Ips, Variant::AIps, Variant::BIps, Variant::QIps],
        Scenario::NonnegSmall | Scenario::NonnegLarge => vec![Variant::Gis, Variant::Iis, Variant::MmGeneral, Variant::QIps, Variant::BIps],
        Scenario::General => vec![Variant::MmGeneral, Variant::QIps, Variant::BIps],
        Scenario::L1Path => vec![Variant::Ips, Variant::AIps],
    }
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let base = a.scale.spec()?;
    let spec = ExperimentSpec {
        roster: a.roster.clone().unwrap_or_else(|| default_roster(base.scenario)),
        replications: a.replications,
        jobs: a.jobs,
        eps_tol: a.eps_tol,
        t_max_secs: a.t_max,
        block_size: a.block_size,
        clock: a.clock.into(),
        grid_points: a.grid_points,
        ..base
    };
    let report = run_experiment(&spec)?;
    report.write(&a.out)?;
    let failed = report.runs.iter().filter(|r| r.termination.is_none()).count();
    if failed > 0 || !report.generation_failures.is_empty() {
        return Err(CliError::NotConverged(format!(
            "{failed} run(s) failed and {} replication(s) could not be generated; see summary.csv",
            report.generation_failures.len()
        )));
    }
    Ok(())
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    let spec = a.scale.spec()?;
    spec.validate()?;
    let inst = generate(&spec, a.replication)?;
    export_instance(&inst, &a.out)?;
    Ok(())
}
