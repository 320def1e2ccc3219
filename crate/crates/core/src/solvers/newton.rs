//! Damped Newton with Armijo backtracking: the dense inner solver used by the
//! block methods, and the full-Hessian baseline on `l`.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{evaluate_coefficients, initial_beta, Engine, Eval, FitFlags, ObjectiveKind, SolverConfig};
use crate::error::{Error, Result};
use crate::model::{self, Coefficients, ProblemInstance};

/// Largest `p` for which the baseline forms a dense `p x p` Hessian.
pub const MAX_DENSE_DIM: usize = 5000;

/// A smooth convex function for the inner Newton solver.
pub trait SmoothProblem {
    fn value(&mut self, x: &[f64]) -> f64;
    /// Value, gradient and Hessian at `x`.
    fn derivatives(&mut self, x: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Stop once `||g||_inf <= max(tol * ||g_start||_inf, abs_tol)`.
    pub tol: f64,
    pub abs_tol: f64,
    pub max_iters: usize,
    pub c1: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            abs_tol: 0.0,
            max_iters: 50,
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The line search failed and a zero step was taken.
    pub zero_step: bool,
}

/// Solves `(H + tau I) d = -g`, raising `tau` from 0 through
/// `1e-8 trace(H) / dim` by factors of 10 until the factorization succeeds.
pub fn damped_direction(h: &DMatrix<f64>, g: &[f64]) -> Result<(Vec<f64>, bool)> {
    let dim = g.len();
    let rhs = -DVector::from_column_slice(g);
    if let Some(ch) = Cholesky::new(h.clone()) {
        let d = ch.solve(&rhs);
        if d.iter().all(|v| v.is_finite()) {
            return Ok((d.as_slice().to_vec(), false));
        }
    }
    let trace = h.trace();
    let mut tau = if trace > 0.0 && trace.is_finite() {
        1e-8 * trace / dim as f64
    } else {
        1e-8
    };
    for _ in 0..40 {
        let mut damped = h.clone();
        for i in 0..dim {
            damped[(i, i)] += tau;
        }
        if let Some(ch) = Cholesky::new(damped) {
            let d = ch.solve(&rhs);
            if d.iter().all(|v| v.is_finite()) {
                return Ok((d.as_slice().to_vec(), true));
            }
        }
        tau *= 10.0;
    }
    Err(Error::Numerical("Newton system could not be solved even with damping".into()))
}

/// Backtracking along `d` from `x`. Accepts `f(x + t d) <= f(x) + c1 t g^T d`
/// up to a few ulps of `f`, since near the optimum the decrease is below
/// the resolution of `f`. Returns the accepted point and value.
pub fn armijo<P: SmoothProblem + ?Sized>(problem: &mut P, x: &[f64], f: f64, g: &[f64], d: &[f64], opts: &NewtonOptions) -> Option<(Vec<f64>, f64)> {
    let slope: f64 = g.iter().zip(d).map(|(a, b)| a * b).sum();
    let slack = 8.0 * f64::EPSILON * f.abs();
    let mut t = 1.0;
    for _ in 0..=opts.max_backtracks {
        let trial: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        let ft = problem.value(&trial);
        if ft.is_finite() && ft <= f + opts.c1 * t * slope + slack {
            return Some((trial, ft));
        }
        t *= opts.shrink;
    }
    None
}

/// Minimizes `problem` from `x0` by damped Newton.
pub fn minimize<P: SmoothProblem + ?Sized>(problem: &mut P, x0: Vec<f64>, opts: &NewtonOptions) -> Result<NewtonOutcome> {
    let mut x = x0;
    let mut g_start = None;
    let mut value = f64::NAN;
    for k in 0..opts.max_iters {
        let (f, g, h) = problem.derivatives(&x);
        value = f;
        let gn = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let g_ref = *g_start.get_or_insert(gn);
        if gn <= (opts.tol * g_ref).max(opts.abs_tol) {
            return Ok(NewtonOutcome {
                x,
                value,
                iterations: k,
                converged: true,
                zero_step: false,
            });
        }
        let (mut d, _) = damped_direction(&h, &g)?;
        if g.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
            d = g.iter().map(|v| -v).collect();
        }
        match armijo(problem, &x, f, &g, &d, opts) {
            Some((nx, nf)) => {
                x = nx;
                value = nf;
            }
            None => {
                return Ok(NewtonOutcome {
                    x,
                    value: f,
                    iterations: k,
                    converged: false,
                    zero_step: true,
                })
            }
        }
    }
    let (f, g, _) = problem.derivatives(&x);
    let gn = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let converged = gn <= (opts.tol * g_start.unwrap_or(gn)).max(opts.abs_tol);
    if f.is_finite() {
        value = f;
    }
    Ok(NewtonOutcome {
        x,
        value,
        iterations: opts.max_iters,
        converged,
        zero_step: false,
    })
}

/// `l(beta)` as a [`SmoothProblem`].
struct FullLikelihood<'a> {
    inst: &'a ProblemInstance,
    all_cols: crate::design::ColumnBlock,
}

impl SmoothProblem for FullLikelihood<'_> {
    fn value(&mut self, x: &[f64]) -> f64 {
        model::objective_at(self.inst, x)
    }

    fn derivatives(&mut self, x: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
        let c = Coefficients::new(self.inst, x.to_vec());
        let g = model::gradient(self.inst, &c);
        let h = self.all_cols.weighted_gram(&c.mu);
        (model::neg_log_likelihood(self.inst, &c), g, h)
    }
}

/// Baseline: one damped Newton step on `l` per iteration.
pub(crate) struct NewtonEngine<'a> {
    problem: FullLikelihood<'a>,
    c: Coefficients,
    opts: NewtonOptions,
    flags: FitFlags,
}

impl<'a> NewtonEngine<'a> {
    pub(crate) fn new(inst: &'a ProblemInstance, cfg: &SolverConfig) -> Result<Self> {
        if inst.n_cols() > MAX_DENSE_DIM {
            return Err(Error::Contract {
                solver: "newton",
                requirement: format!("at most {MAX_DENSE_DIM} columns for a dense Hessian (got {})", inst.n_cols()),
            });
        }
        let cols: Vec<usize> = (0..inst.n_cols()).collect();
        Ok(Self {
            problem: FullLikelihood {
                inst,
                all_cols: inst.design().block(&cols),
            },
            c: Coefficients::new(inst, initial_beta(inst, cfg)?),
            opts: NewtonOptions {
                max_backtracks: 50,
                ..NewtonOptions::default()
            },
            flags: FitFlags::default(),
        })
    }
}

impl Engine for NewtonEngine<'_> {
    fn step(&mut self) -> Result<()> {
        let inst = self.problem.inst;
        let f = model::neg_log_likelihood(inst, &self.c);
        let g = model::gradient(inst, &self.c);
        let h = self.problem.all_cols.weighted_gram(&self.c.mu);
        let (mut d, _) = damped_direction(&h, &g)?;
        if g.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
            d = g.iter().map(|v| -v).collect();
        }
        match armijo(&mut self.problem, &self.c.beta, f, &g, &d, &self.opts) {
            Some((beta, _)) => self.c = Coefficients::new(inst, beta),
            None => self.flags.zero_steps += 1,
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Eval {
        evaluate_coefficients(self.problem.inst, &self.c, ObjectiveKind::Likelihood)
    }

    fn current_beta(&self) -> Vec<f64> {
        self.c.beta.clone()
    }

    fn finish(&mut self) -> (Vec<f64>, Vec<f64>) {
        (self.c.beta.clone(), self.c.mu.clone())
    }

    fn flags(&self) -> FitFlags {
        self.flags.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_table_design, DesignMatrix, TableSchema};
    use crate::solvers::{fit, SolverConfig, Termination, Variant};

    struct Quadratic {
        a: DMatrix<f64>,
        b: Vec<f64>,
    }

    impl SmoothProblem for Quadratic {
        fn value(&mut self, x: &[f64]) -> f64 {
            let v = DVector::from_column_slice(x);
            0.5 * v.dot(&(&self.a * &v)) - v.dot(&DVector::from_column_slice(&self.b))
        }

        fn derivatives(&mut self, x: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
            let v = DVector::from_column_slice(x);
            let g = &self.a * &v - DVector::from_column_slice(&self.b);
            (self.value(x), g.as_slice().to_vec(), self.a.clone())
        }
    }

    #[test]
    fn quadratic_in_one_step() {
        let mut q = Quadratic {
            a: DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]),
            b: vec![1.0, 2.0],
        };
        let out = minimize(&mut q, vec![0.0, 0.0], &NewtonOptions::default()).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 2);
        assert!((out.x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((out.x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn singular_hessian_is_damped() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (d, damped) = damped_direction(&h, &[1.0, 1.0]).unwrap();
        assert!(damped);
        assert!(d.iter().all(|v| v.is_finite() && *v < 0.0));
    }

    #[test]
    fn saturated_identity_design() {
        let rows: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect()).collect();
        let x = DesignMatrix::from_rows(&rows, DesignMatrix::default_labels(3)).unwrap();
        let n = vec![2.0, 5.0, 9.0];
        let inst = ProblemInstance::new(x, n.clone(), None).unwrap();
        let r = fit(
            &inst,
            &SolverConfig {
                eps_tol: 1e-10,
                ..SolverConfig::new(Variant::Newton)
            },
        )
        .unwrap();
        assert_eq!(r.termination, Termination::TolReached);
        assert!(r.iterations <= 8, "{} iterations", r.iterations);
        for (m, v) in r.mu.iter().zip(&n) {
            assert!((m - v).abs() < 1e-8);
        }
    }

    #[test]
    fn agrees_with_ips_on_two_by_two() {
        let x = build_table_design(&TableSchema::uniform(2, 2, 1).unwrap()).unwrap();
        let inst = ProblemInstance::new(x, vec![10.0, 20.0, 50.0, 20.0], None).unwrap();
        let a = fit(&inst, &SolverConfig { eps_tol: 1e-12, ..SolverConfig::new(Variant::Newton) }).unwrap();
        let b = fit(&inst, &SolverConfig { eps_tol: 1e-12, ..SolverConfig::new(Variant::Ips) }).unwrap();
        for (u, v) in a.beta.iter().zip(&b.beta) {
            assert!((u - v).abs() < 1e-6);
        }
    }
}
