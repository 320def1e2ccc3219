//! Improved iterative scaling on the profiled objective. Each slope
//! coordinate solves a one-dimensional equation in `delta`; all updates are
//! applied together.

use super::{clamp_coordinate, evaluate_coefficients, initial_beta, profiled_coefficients, require_non_negative, Engine, Eval, FitFlags, ObjectiveKind, SolverConfig};
use crate::error::Result;
use crate::model::{slope_predictor, ProblemInstance};

/// Residual tolerance of the one-dimensional solve, on the log scale.
const ROOT_TOL: f64 = 1e-12;

fn log_sum_exp(a: &[f64], r: &[f64], delta: f64) -> (f64, f64) {
    let m = a.iter().zip(r).map(|(a, r)| a + r * delta).fold(f64::NEG_INFINITY, f64::max);
    let (mut sum, mut slope) = (0.0, 0.0);
    for (a, r) in a.iter().zip(r) {
        let e = (a + r * delta - m).exp();
        sum += e;
        slope += e * r;
    }
    (m + sum.ln(), slope / sum)
}

/// Solves `log sum_i exp(a_i + r_i delta) = target` for `delta` by Newton's
/// method safeguarded with a doubling bracket and bisection. Returns an
/// infinite value when the root lies beyond `limit`.
pub(crate) fn solve_scaling_equation(a: &[f64], r: &[f64], target: f64, limit: f64) -> f64 {
    let h = |d: f64| {
        let (v, s) = log_sum_exp(a, r, d);
        (v - target, s)
    };
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while h(lo).0 > 0.0 {
        lo *= 2.0;
        if lo < -limit {
            return f64::NEG_INFINITY;
        }
    }
    while h(hi).0 < 0.0 {
        hi *= 2.0;
        if hi > limit {
            return f64::INFINITY;
        }
    }
    let mut x = 0.0;
    for _ in 0..200 {
        let (hx, dhx) = h(x);
        if hx.abs() <= ROOT_TOL {
            return x;
        }
        if hx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let newton = x - hx / dhx;
        x = if dhx > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
            return x;
        }
    }
    x
}

pub(crate) struct IisEngine<'a> {
    inst: &'a ProblemInstance,
    slope: Vec<f64>,
    /// `X0 slope`.
    eta: Vec<f64>,
    /// Slope-column row sums `x0_{i+}`.
    row_sums: Vec<f64>,
    log_total: f64,
    clamp: f64,
    resync_every: usize,
    iters: usize,
    flags: FitFlags,
}

impl<'a> IisEngine<'a> {
    pub(crate) fn new(inst: &'a ProblemInstance, cfg: &SolverConfig) -> Result<Self> {
        let total = inst.require_intercept("iis")?;
        require_non_negative(inst, "iis")?;
        let slope = initial_beta(inst, cfg)?[1..].to_vec();
        let cols: Vec<usize> = (1..inst.n_cols()).collect();
        Ok(Self {
            inst,
            eta: slope_predictor(inst.design(), &slope),
            slope,
            row_sums: inst.design().row_sums_over(&cols),
            log_total: total.ln(),
            clamp: cfg.clamp,
            resync_every: cfg.resync_every,
            iters: 0,
            flags: FitFlags::default(),
        })
    }
}

impl Engine for IisEngine<'_> {
    fn step(&mut self) -> Result<()> {
        let x = self.inst.design();
        let log_mu: Vec<f64> = self.eta.iter().zip(self.inst.offset()).map(|(e, q)| e + q.ln()).collect();
        let m = log_mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_mass = m + log_mu.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let limit = 4.0 * self.clamp;
        let mut a = Vec::new();
        let mut r = Vec::new();
        let mut deltas = vec![0.0; self.slope.len()];
        for (k, delta) in deltas.iter_mut().enumerate() {
            let s = self.inst.suff_stats()[k + 1];
            a.clear();
            r.clear();
            x.column(k + 1).for_each_nonzero(|i, v| {
                a.push(v.ln() + log_mu[i]);
                r.push(self.row_sums[i]);
            });
            let raw = if s <= 0.0 {
                f64::NEG_INFINITY
            } else if a.is_empty() {
                f64::INFINITY
            } else {
                solve_scaling_equation(&a, &r, s.ln() - self.log_total + log_mass, limit)
            };
            let b = self.slope[k];
            *delta = clamp_coordinate(b + raw, self.clamp, &mut self.flags.divergent_coordinates) - b;
        }
        for (k, &d) in deltas.iter().enumerate() {
            if d != 0.0 {
                x.column(k + 1).axpy(d, &mut self.eta);
                self.slope[k] += d;
            }
        }
        self.iters += 1;
        if self.iters % self.resync_every == 0 {
            self.eta = slope_predictor(x, &self.slope);
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Eval {
        let c = profiled_coefficients(self.inst, &self.slope, &self.eta);
        evaluate_coefficients(self.inst, &c, ObjectiveKind::Likelihood)
    }

    fn current_beta(&self) -> Vec<f64> {
        profiled_coefficients(self.inst, &self.slope, &self.eta).beta
    }

    fn finish(&mut self) -> (Vec<f64>, Vec<f64>) {
        let c = profiled_coefficients(self.inst, &self.slope, &self.eta);
        (c.beta, c.mu)
    }

    fn flags(&self) -> FitFlags {
        self.flags.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignMatrix;
    use crate::solvers::{fit, Termination, Variant};

    #[test]
    fn constant_row_sums_have_a_closed_form() {
        let a = [0.3f64.ln(), 1.2f64.ln(), 2.0f64.ln()];
        let r = [2.0; 3];
        let target = 7.0f64.ln();
        let d = solve_scaling_equation(&a, &r, target, 1e3);
        let expected = (7.0f64 / 3.5).ln() / 2.0;
        assert!((d - expected).abs() < 1e-13);
    }

    #[test]
    fn mixed_row_sums_satisfy_the_equation() {
        let a = [0.1, -0.5, 1.0, 0.0];
        let r = [0.5, 1.5, 3.0, 0.0];
        for target in [0.5, 1.5, 6.0, 20.0] {
            let d = solve_scaling_equation(&a, &r, target, 1e3);
            let (v, _) = log_sum_exp(&a, &r, d);
            assert!((v - target).abs() <= 1e-12, "{target}: {v}");
        }
    }

    #[test]
    fn unreachable_root_is_infinite() {
        // the left tail is bounded below by the r = 0 term
        assert_eq!(solve_scaling_equation(&[0.0, 0.0], &[0.0, 1.0], -1.0, 1e3), f64::NEG_INFINITY);
    }

    #[test]
    fn reaches_tolerance_on_nonnegative_design() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![1.0, (i % 3) as f64 * 0.5, ((i * 7) % 5) as f64 * 0.25, (i % 2) as f64])
            .collect();
        let x = DesignMatrix::from_rows(&rows, DesignMatrix::default_labels(4)).unwrap();
        let n: Vec<f64> = (0..12).map(|i| ((i * 3) % 7 + 1) as f64).collect();
        let inst = ProblemInstance::new(x, n, None).unwrap();
        let r = fit(
            &inst,
            &SolverConfig {
                eps_tol: 1e-8,
                ..SolverConfig::new(Variant::Iis)
            },
        )
        .unwrap();
        assert_eq!(r.termination, Termination::TolReached);
        let objs: Vec<f64> = r.trace.records.iter().map(|t| t.objective).collect();
        assert!(objs.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()));
    }
}
