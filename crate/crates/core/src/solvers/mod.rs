//! The iterative solvers. All of them share one driver that records the
//! convergence trace and applies the stopping rule
//! `||g_t||_inf / ||g_0||_inf <= eps_tol`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{self, Coefficients, ProblemInstance, WChoice, DEFAULT_CLAMP};

mod bips;
mod iis;
mod ips;
mod mm;
pub mod newton;
mod qips;

pub use bips::block_partition;
pub use ips::{ips_coordinate_update, l1_threshold_update, L1Update};
pub use mm::{gis_step, mm_binary_step, mm_general_delta, mm_general_step, mm_parallel_step};
pub use qips::next_theta;

/// Which algorithm to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ips")]
    Ips,
    #[serde(rename = "a-ips")]
    AIps,
    #[serde(rename = "x2-ips")]
    X2Ips,
    #[serde(rename = "mm-binary")]
    MmBinary,
    #[serde(rename = "gis")]
    Gis,
    #[serde(rename = "mm-general")]
    MmGeneral,
    #[serde(rename = "mm-parallel")]
    MmParallel,
    #[serde(rename = "iis")]
    Iis,
    #[serde(rename = "q-ips")]
    QIps,
    #[serde(rename = "b-ips")]
    BIps,
    #[serde(rename = "newton")]
    Newton,
    #[serde(rename = "l1-ips")]
    L1Ips,
    #[serde(rename = "ridge-q-ips")]
    RidgeQIps,
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::Ips,
        Variant::AIps,
        Variant::X2Ips,
        Variant::MmBinary,
        Variant::Gis,
        Variant::MmGeneral,
        Variant::MmParallel,
        Variant::Iis,
        Variant::QIps,
        Variant::BIps,
        Variant::Newton,
        Variant::L1Ips,
        Variant::RidgeQIps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ips => "ips",
            Variant::AIps => "a-ips",
            Variant::X2Ips => "x2-ips",
            Variant::MmBinary => "mm-binary",
            Variant::Gis => "gis",
            Variant::MmGeneral => "mm-general",
            Variant::MmParallel => "mm-parallel",
            Variant::Iis => "iis",
            Variant::QIps => "q-ips",
            Variant::BIps => "b-ips",
            Variant::Newton => "newton",
            Variant::L1Ips => "l1-ips",
            Variant::RidgeQIps => "ridge-q-ips",
        }
    }

    /// The objective this variant minimizes, given the penalty weight.
    pub fn objective_kind(self, lambda: f64) -> ObjectiveKind {
        match self {
            Variant::X2Ips => ObjectiveKind::Pearson,
            Variant::L1Ips => ObjectiveKind::L1(lambda),
            Variant::RidgeQIps => ObjectiveKind::Ridge(lambda),
            _ => ObjectiveKind::Likelihood,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Variant::ALL.into_iter().find(|v| v.name() == key).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::InvalidConfig(format!("unknown solver '{s}'; expected one of {}", names.join(", ")))
        })
    }
}

/// The objective whose gradient drives the stopping rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveKind {
    /// Poisson negative log-likelihood `l`.
    Likelihood,
    /// Pearson `X^2`.
    Pearson,
    /// `l + lambda ||beta_slope||_1`; the gradient is the KKT residual.
    L1(f64),
    /// `l + lambda/2 ||beta_slope||^2`.
    Ridge(f64),
}

/// Why a fit stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    TolReached,
    TimeLimit,
    IterLimit,
    Diverged,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::TolReached => "TOL_REACHED",
            Termination::TimeLimit => "TIME_LIMIT",
            Termination::IterLimit => "ITER_LIMIT",
            Termination::Diverged => "DIVERGED",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Time axis of the recorded trace.
///
/// `Iterations` records the iteration count in place of elapsed seconds so
/// traces are byte-identical across runs. The time limit always uses the
/// real clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    Wall,
    Iterations,
}

impl FromStr for ClockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wall" => Ok(ClockMode::Wall),
            "iterations" | "iter" => Ok(ClockMode::Iterations),
            other => Err(Error::InvalidConfig(format!(
                "unknown clock '{other}'; expected 'wall' or 'iterations'"
            ))),
        }
    }
}

/// Solver settings. Defaults: `eps_tol = 1e-4`, 600 s, blocks of 200,
/// Böhning curvature bound, seed 0, start at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub variant: Variant,
    pub eps_tol: f64,
    /// Optional absolute tolerance on the stopping gradient, used by warm
    /// started path fits where `g_0` can already be tiny.
    pub abs_tol: Option<f64>,
    pub t_max_secs: f64,
    pub max_iters: usize,
    pub lambda: f64,
    /// Uniform block size used when `block_sizes` is not given.
    pub block_size: usize,
    /// Explicit block sizes; must sum to the number of blocked coordinates.
    pub block_sizes: Option<Vec<usize>>,
    pub w_choice: WChoice,
    pub seed: u64,
    pub beta_init: Option<Vec<f64>>,
    pub clamp: f64,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub clock: ClockMode,
    /// Record every this many iterations; default 1 for `p <= 1000`, else 5.
    pub record_every: Option<usize>,
    /// Recompute `mu` from `beta` every this many iterations to remove drift.
    pub resync_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ips,
            eps_tol: 1e-4,
            abs_tol: None,
            t_max_secs: 600.0,
            max_iters: 1_000_000,
            lambda: 0.0,
            block_size: 200,
            block_sizes: None,
            w_choice: WChoice::Bohning,
            seed: 0,
            beta_init: None,
            clamp: DEFAULT_CLAMP,
            inner_tol: 1e-10,
            inner_max_iters: 50,
            clock: ClockMode::Wall,
            record_every: None,
            resync_every: 50,
        }
    }
}

impl SolverConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_tol > 0.0) {
            return Err(Error::InvalidConfig(format!("eps_tol must be positive, got {}", self.eps_tol)));
        }
        if let Some(a) = self.abs_tol {
            if !(a >= 0.0) {
                return Err(Error::InvalidConfig(format!("abs_tol must be non-negative, got {a}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.t_max_secs > 0.0) {
            return Err(Error::InvalidConfig("t_max_secs must be positive".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be positive".into()));
        }
        if let Some(b) = &self.block_sizes {
            if b.is_empty() || b.contains(&0) {
                return Err(Error::InvalidConfig("block sizes must be positive".into()));
            }
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::InvalidConfig("clamp must be positive and finite".into()));
        }
        if !(self.inner_tol > 0.0) || self.inner_max_iters == 0 {
            return Err(Error::InvalidConfig("inner solver tolerance and iteration cap must be positive".into()));
        }
        if self.record_every == Some(0) || self.resync_every == 0 {
            return Err(Error::InvalidConfig("record and resync intervals must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the convergence trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub wall_seconds: f64,
    pub objective: f64,
    pub rel_grad: f64,
    pub est_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTrace {
    pub records: Vec<TraceRecord>,
    pub termination: Termination,
}

impl ConvergenceTrace {
    /// CSV with header `iter,wall_seconds,objective,rel_grad[,est_err]`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let with_err = self.records.iter().any(|r| r.est_err.is_some());
        let mut wtr = csv::Writer::from_writer(w);
        if with_err {
            wtr.write_record(["iter", "wall_seconds", "objective", "rel_grad", "est_err"])?;
        } else {
            wtr.write_record(["iter", "wall_seconds", "objective", "rel_grad"])?;
        }
        for r in &self.records {
            let mut row = vec![r.iter.to_string(), fmt_f64(r.wall_seconds), fmt_f64(r.objective), fmt_f64(r.rel_grad)];
            if with_err {
                row.push(r.est_err.map(fmt_f64).unwrap_or_default());
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("a trace has at least the initial record")
    }
}

/// Safeguard events raised during a fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FitFlags {
    /// Coordinate updates that hit the clamp `[-B, B]`.
    pub divergent_coordinates: usize,
    pub momentum_restarts: usize,
    pub bound_ridge_repaired: bool,
    pub bound_fell_back: bool,
    /// Inner Newton solves that stopped without converging.
    pub subsolver_failures: usize,
    /// Inner Newton solves whose line search gave up and took a zero step.
    pub zero_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub variant: Variant,
    pub beta: Vec<f64>,
    /// Fitted mean over the instance's rows (zero-offset rows excluded).
    pub mu: Vec<f64>,
    pub trace: ConvergenceTrace,
    pub termination: Termination,
    pub iterations: usize,
    pub objective: f64,
    pub wall_seconds: f64,
    pub flags: FitFlags,
}

/// The stopping rule. `g0_inf = 0` means the start is already stationary.
pub fn check_stop(grad_inf: f64, g0_inf: f64, elapsed_secs: f64, iter: usize, cfg: &SolverConfig) -> Option<Termination> {
    if g0_inf == 0.0 || grad_inf <= cfg.eps_tol * g0_inf || cfg.abs_tol.is_some_and(|a| grad_inf <= a) {
        Some(Termination::TolReached)
    } else if elapsed_secs >= cfg.t_max_secs {
        Some(Termination::TimeLimit)
    } else if iter >= cfg.max_iters {
        Some(Termination::IterLimit)
    } else {
        None
    }
}

/// Objective value and stopping-gradient norm at one iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eval {
    pub objective: f64,
    pub grad_inf: f64,
}

fn inf_norm(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| if x.is_nan() || m.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Evaluates an objective and its stopping gradient at coefficients whose
/// mean is already known.
pub fn evaluate_coefficients(inst: &ProblemInstance, c: &Coefficients, kind: ObjectiveKind) -> Eval {
    match kind {
        ObjectiveKind::Likelihood => Eval {
            objective: model::neg_log_likelihood(inst, c),
            grad_inf: inf_norm(model::gradient(inst, c)),
        },
        ObjectiveKind::Pearson => {
            let n = inst.counts().expect("Pearson objective needs counts");
            let ratio: Vec<f64> = n.iter().zip(&c.mu).map(|(a, m)| m - a * a / m).collect();
            let x = inst.design();
            Eval {
                objective: model::pearson_x2(n, &c.mu),
                grad_inf: inf_norm((0..x.n_cols()).map(|j| x.column_dot(j, &ratio))),
            }
        }
        ObjectiveKind::L1(lambda) => {
            let g = model::gradient(inst, c);
            let penalty: f64 = c.beta[1..].iter().map(|b| b.abs()).sum();
            Eval {
                objective: model::neg_log_likelihood(inst, c) + lambda * penalty,
                grad_inf: inf_norm(kkt_residual(&g, &c.beta, lambda)),
            }
        }
        ObjectiveKind::Ridge(lambda) => {
            let g = model::gradient(inst, c);
            let penalty: f64 = c.beta[1..].iter().map(|b| b * b).sum();
            Eval {
                objective: model::neg_log_likelihood(inst, c) + 0.5 * lambda * penalty,
                grad_inf: inf_norm(g.iter().zip(&c.beta).enumerate().map(|(j, (gj, b))| if j == 0 { *gj } else { gj + lambda * b })),
            }
        }
    }
}

/// Per-coordinate KKT residual of `l + lambda ||beta_slope||_1`; coordinate 0
/// is the unpenalized intercept.
pub fn kkt_residual(grad: &[f64], beta: &[f64], lambda: f64) -> Vec<f64> {
    grad.iter()
        .zip(beta)
        .enumerate()
        .map(|(j, (&g, &b))| {
            if j == 0 {
                g
            } else if b != 0.0 {
                g + lambda * b.signum()
            } else {
                g.signum() * (g.abs() - lambda).max(0.0)
            }
        })
        .collect()
}

/// [`evaluate_coefficients`] from coefficients alone.
pub fn evaluate_at(inst: &ProblemInstance, beta: &[f64], kind: ObjectiveKind) -> Eval {
    evaluate_coefficients(inst, &Coefficients::new(inst, beta.to_vec()), kind)
}

/// Coefficients at the optimal intercept for a slope vector, with the mean
/// formed on a log-sum-exp scale so it cannot overflow.
pub(crate) fn profiled_coefficients(inst: &ProblemInstance, slope: &[f64], eta: &[f64]) -> Coefficients {
    let total = inst.suff_stats()[0];
    let ev = model::eval_predictor(inst.offset(), eta);
    let mut beta = Vec::with_capacity(slope.len() + 1);
    beta.push(total.ln() - ev.log_mass);
    beta.extend_from_slice(slope);
    let mu = ev.weights.iter().map(|w| w * total).collect();
    Coefficients { beta, mu }
}

/// One solver's iteration state, driven by [`drive`].
pub(crate) trait Engine {
    /// One sweep or outer iteration.
    fn step(&mut self) -> Result<()>;
    /// Objective and stopping-gradient norm at the current iterate.
    fn evaluate(&mut self) -> Eval;
    fn current_beta(&self) -> Vec<f64>;
    /// Final coefficients and fitted mean.
    fn finish(&mut self) -> (Vec<f64>, Vec<f64>);
    fn flags(&self) -> FitFlags;
}

pub(crate) fn initial_beta(inst: &ProblemInstance, cfg: &SolverConfig) -> Result<Vec<f64>> {
    match &cfg.beta_init {
        None => Ok(vec![0.0; inst.n_cols()]),
        Some(b) if b.len() == inst.n_cols() => {
            if b.iter().all(|v| v.is_finite()) {
                Ok(b.clone())
            } else {
                Err(Error::InvalidConfig("beta_init must be finite".into()))
            }
        }
        Some(b) => Err(Error::DimensionMismatch {
            what: "beta_init",
            expected: inst.n_cols(),
            got: b.len(),
        }),
    }
}

fn est_error(inst: &ProblemInstance, beta: &[f64]) -> Option<f64> {
    let truth = inst.beta_true()?;
    let denom: f64 = truth.iter().map(|b| b * b).sum();
    if denom == 0.0 {
        return None;
    }
    Some(beta.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / denom)
}

pub(crate) fn drive(inst: &ProblemInstance, cfg: &SolverConfig, engine: &mut dyn Engine) -> Result<FitResult> {
    let start = Instant::now();
    let kind = cfg.variant.objective_kind(cfg.lambda);
    let beta0 = initial_beta(inst, cfg)?;
    let init = evaluate_at(inst, &beta0, kind);
    let g0 = init.grad_inf;
    let cadence = cfg.record_every.unwrap_or(if inst.n_cols() <= 1000 { 1 } else { 5 });
    let stamp = |iter: usize| match cfg.clock {
        ClockMode::Wall => start.elapsed().as_secs_f64(),
        ClockMode::Iterations => iter as f64,
    };
    let rel = |g: f64| if g0 == 0.0 { 0.0 } else { g / g0 };

    let mut records = vec![TraceRecord {
        iter: 0,
        wall_seconds: stamp(0),
        objective: init.objective,
        rel_grad: rel(g0),
        est_err: est_error(inst, &beta0),
    }];
    let mut iter = 0;
    let mut termination = if !init.objective.is_finite() {
        Some(Termination::Diverged)
    } else {
        check_stop(g0, g0, start.elapsed().as_secs_f64(), 0, cfg)
    };
    while termination.is_none() {
        engine.step()?;
        iter += 1;
        let elapsed = start.elapsed().as_secs_f64();
        let at_limit = iter >= cfg.max_iters || elapsed >= cfg.t_max_secs;
        if iter % cadence != 0 && !at_limit {
            continue;
        }
        let ev = engine.evaluate();
        let beta = engine.current_beta();
        records.push(TraceRecord {
            iter,
            wall_seconds: stamp(iter),
            objective: ev.objective,
            rel_grad: rel(ev.grad_inf),
            est_err: est_error(inst, &beta),
        });
        termination = if !ev.objective.is_finite() || ev.grad_inf.is_nan() || beta.iter().any(|b| !b.is_finite()) {
            Some(Termination::Diverged)
        } else {
            check_stop(ev.grad_inf, g0, start.elapsed().as_secs_f64(), iter, cfg)
        };
    }
    let termination = termination.expect("loop exits with a reason");
    let (beta, mu) = engine.finish();
    let flags = engine.flags();
    if flags.divergent_coordinates > 0 {
        log::warn!(
            "{}: {} coordinate updates hit the clamp; some estimates may be infinite",
            cfg.variant,
            flags.divergent_coordinates
        );
    }
    let objective = records.last().map(|r| r.objective).unwrap_or(f64::NAN);
    Ok(FitResult {
        variant: cfg.variant,
        beta,
        mu,
        trace: ConvergenceTrace { records, termination },
        termination,
        iterations: iter,
        objective,
        wall_seconds: start.elapsed().as_secs_f64(),
        flags,
    })
}

/// Runs the configured solver.
pub fn fit(inst: &ProblemInstance, cfg: &SolverConfig) -> Result<FitResult> {
    cfg.validate()?;
    let mut engine: Box<dyn Engine + '_> = match cfg.variant {
        Variant::Ips | Variant::AIps | Variant::L1Ips => Box::new(ips::CoordinateEngine::new(inst, cfg)?),
        Variant::X2Ips => Box::new(ips::PearsonEngine::new(inst, cfg)?),
        Variant::MmBinary | Variant::Gis | Variant::MmGeneral | Variant::MmParallel => Box::new(mm::MmEngine::new(inst, cfg)?),
        Variant::Iis => Box::new(iis::IisEngine::new(inst, cfg)?),
        Variant::QIps | Variant::RidgeQIps => Box::new(qips::QipsEngine::new(inst, cfg)?),
        Variant::BIps => Box::new(bips::BipsEngine::new(inst, cfg)?),
        Variant::Newton => Box::new(newton::NewtonEngine::new(inst, cfg)?),
    };
    drive(inst, cfg, engine.as_mut())
}

pub(crate) fn require_binary(inst: &ProblemInstance, solver: &'static str, alternative: &str) -> Result<()> {
    if inst.design().kind() != crate::design::DesignKind::Binary {
        return Err(Error::Contract {
            solver,
            requirement: format!("a binary design (got {}); use {alternative} instead", inst.design().kind()),
        });
    }
    Ok(())
}

pub(crate) fn require_non_negative(inst: &ProblemInstance, solver: &'static str) -> Result<()> {
    if !inst.design().kind().is_non_negative() {
        return Err(Error::Contract {
            solver,
            requirement: "a non-negative design; use mm-general or q-ips instead".into(),
        });
    }
    Ok(())
}

/// Clamps `value` into `[-bound, bound]`, counting a hit.
pub(crate) fn clamp_coordinate(value: f64, bound: f64, hits: &mut usize) -> f64 {
    if value.is_nan() {
        *hits += 1;
        return 0.0;
    }
    if value > bound {
        *hits += 1;
        bound
    } else if value < -bound {
        *hits += 1;
        -bound
    } else {
        value
    }
}
