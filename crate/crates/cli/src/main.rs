//! `ipscale`: fit Poisson log-affine models, rake tables, trace `l1`
//! paths and run the benchmark scenarios.
//!
//! Exit codes: 0 success, 1 input error, 2 internal error, 3 the solver
//! stopped short of its tolerance or the targets are infeasible.

mod bench;
mod error;
mod fit;
mod input;
mod rake;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ipscale::{ClockMode, SolverConfig, Variant, WChoice};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "ipscale", version, about = "Iterative proportional scaling for Poisson log-affine models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and write beta.csv, mu.csv, trace.csv and summary.json.
    Fit(fit::FitArgs),
    /// Adjust a seed table to prescribed margins.
    Rake(rake::RakeArgs),
    /// Fit an l1 regularization path and select a penalty by EBIC.
    Path(fit::PathArgs),
    /// Run a replicated solver comparison on a synthetic scenario.
    Bench(bench::BenchArgs),
    /// Write one synthetic instance as design and count files.
    Gen(bench::GenArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WChoiceArg {
    Spectral,
    Bohning,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClockArg {
    Wall,
    Iterations,
}

impl From<ClockArg> for ClockMode {
    fn from(c: ClockArg) -> Self {
        match c {
            ClockArg::Wall => ClockMode::Wall,
            ClockArg::Iterations => ClockMode::Iterations,
        }
    }
}

/// Flags mirroring the solver configuration. Defaults match the library.
#[derive(Debug, Args)]
struct SolverArgs {
    /// Algorithm: ips, a-ips, x2-ips, mm-binary, gis, mm-general,
    /// mm-parallel, iis, q-ips, b-ips, newton, l1-ips, ridge-q-ips.
    #[arg(long, default_value = "ips")]
    solver: Variant,
    /// Stop when ||grad||_inf <= eps_tol * ||grad at start||_inf.
    #[arg(long, default_value_t = 1e-4)]
    eps_tol: f64,
    /// Also stop when ||grad||_inf falls below this absolute level.
    #[arg(long)]
    abs_tol: Option<f64>,
    /// Wall-clock limit in seconds.
    #[arg(long, default_value_t = 600.0)]
    t_max: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iters: usize,
    /// Penalty weight for l1-ips and ridge-q-ips.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Uniform block size for b-ips and mm-parallel.
    #[arg(long, default_value_t = 200)]
    block_size: usize,
    /// Explicit comma-separated block sizes (override --block-size).
    #[arg(long, value_delimiter = ',')]
    block_sizes: Option<Vec<usize>>,
    /// Curvature bound for q-ips.
    #[arg(long, value_enum, default_value = "bohning")]
    w_choice: WChoiceArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Starting coefficients, a one-column CSV with a header.
    #[arg(long)]
    beta_init: Option<PathBuf>,
    /// Coefficient magnitude bound.
    #[arg(long, default_value_t = 250.0)]
    clamp: f64,
    #[arg(long, default_value_t = 1e-10)]
    inner_tol: f64,
    #[arg(long, default_value_t = 50)]
    inner_max_iters: usize,
    /// Time axis of trace.csv; `iterations` makes traces reproducible.
    #[arg(long, value_enum, default_value = "wall")]
    clock: ClockArg,
    /// Record every this many iterations (default 1, or 5 above 1000 columns).
    #[arg(long)]
    record_every: Option<usize>,
    #[arg(long, default_value_t = 50)]
    resync_every: usize,
}

impl SolverArgs {
    fn config(&self) -> CliResult<SolverConfig> {
        let beta_init = match &self.beta_init {
            Some(p) => Some(input::read_vector_file(p)?),
            None => None,
        };
        let cfg = SolverConfig {
            variant: self.solver,
            eps_tol: self.eps_tol,
            abs_tol: self.abs_tol,
            t_max_secs: self.t_max,
            max_iters: self.max_iters,
            lambda: self.lambda,
            block_size: self.block_size,
            block_sizes: self.block_sizes.clone(),
            w_choice: match self.w_choice {
                WChoiceArg::Spectral => WChoice::Spectral,
                WChoiceArg::Bohning => WChoice::Bohning,
            },
            seed: self.seed,
            beta_init,
            clamp: self.clamp,
            inner_tol: self.inner_tol,
            inner_max_iters: self.inner_max_iters,
            clock: self.clock.into(),
            record_every: self.record_every,
            resync_every: self.resync_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fit(a) => fit::cmd_fit(&a),
        Command::Rake(a) => rake::cmd_rake(&a),
        Command::Path(a) => fit::cmd_path(&a),
        Command::Bench(a) => bench::cmd_bench(&a),
        Command::Gen(a) => bench::cmd_gen(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Converts a solver stop reason into the exit contract.
fn require_tolerance(t: ipscale::Termination, what: &str) -> CliResult<()> {
    match t {
        ipscale::Termination::TolReached => Ok(()),
        other => Err(CliError::NotConverged(format!("{what} stopped with {other} before reaching the tolerance"))),
    }
}
