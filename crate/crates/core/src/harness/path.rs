//! Warm-started `l1` regularization paths with EBIC model selection.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{self, Coefficients, ProblemInstance};
use crate::solvers::{fit, kkt_residual, SolverConfig, Termination, Variant};

#[derive(Debug, Clone, Serialize)]
pub struct PathSpec {
    pub grid_points: usize,
    /// Smallest grid value as a fraction of `lambda_max`.
    pub min_ratio: f64,
    /// EBIC weight on the model-space term.
    pub gamma: f64,
    pub eps_tol: f64,
    pub abs_tol: f64,
    pub max_iters: usize,
    pub t_max_secs: f64,
}

impl Default for PathSpec {
    fn default() -> Self {
        Self {
            grid_points: 50,
            min_ratio: 1e-3,
            gamma: 1.0,
            eps_tol: 1e-10,
            abs_tol: 1e-8,
            max_iters: 1_000_000,
            t_max_secs: 600.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub beta: Vec<f64>,
    /// Non-zero slope coefficients (intercept excluded).
    pub support_size: usize,
    pub deviance: f64,
    pub ebic: f64,
    /// `||KKT residual||_inf` at the returned coefficients.
    pub kkt: f64,
    pub termination: Termination,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathResult {
    pub lambda_max: f64,
    pub points: Vec<PathPoint>,
    /// Index of the EBIC minimizer in `points`.
    pub selected: usize,
}

/// `lambda_max = max_{j>=1} |<x_j, n - mu>|` at the intercept-only fit: the
/// smallest penalty whose solution has an empty slope support.
pub fn lambda_max(inst: &ProblemInstance) -> Result<f64> {
    let c = intercept_only(inst)?;
    let g = model::gradient(inst, &c);
    Ok(g[1..].iter().fold(0.0, |m, v| m.max(v.abs())))
}

fn intercept_only(inst: &ProblemInstance) -> Result<Coefficients> {
    let total = inst.require_intercept("l1_path")?;
    let mass: f64 = inst.offset().iter().sum();
    let mut beta = vec![0.0; inst.n_cols()];
    beta[0] = (total / mass).ln();
    Ok(Coefficients::new(inst, beta))
}

/// `G` log-spaced values from `lambda_max` down to `lambda_max * min_ratio`.
pub fn lambda_grid(lambda_max: f64, points: usize, min_ratio: f64) -> Result<Vec<f64>> {
    if points == 0 {
        return Err(Error::InvalidConfig("the lambda grid is empty".into()));
    }
    if !(lambda_max > 0.0) {
        return Err(Error::InvalidConfig(format!("lambda_max must be positive, got {lambda_max}")));
    }
    if !(min_ratio > 0.0 && min_ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("min_ratio must be in (0, 1), got {min_ratio}")));
    }
    if points == 1 {
        return Ok(vec![lambda_max]);
    }
    let step = min_ratio.ln() / (points - 1) as f64;
    Ok((0..points).map(|k| lambda_max * (step * k as f64).exp()).collect())
}

/// `2 l + k log N + 2 gamma k log(p - 1)`.
pub fn ebic(neg_log_lik: f64, support: usize, n_rows: usize, n_cols: usize, gamma: f64) -> f64 {
    let k = support as f64;
    let model_space = if n_cols > 2 { ((n_cols - 1) as f64).ln() } else { 0.0 };
    2.0 * neg_log_lik + k * (n_rows as f64).ln() + 2.0 * gamma * k * model_space
}

/// Fits the path on a binary design with an intercept, warm starting each
/// fit from the previous one.
pub fn l1_path(inst: &ProblemInstance, spec: &PathSpec) -> Result<PathResult> {
    let counts = inst
        .counts()
        .ok_or_else(|| Error::InvalidInstance("a regularization path needs observed counts".into()))?
        .to_vec();
    let lmax = lambda_max(inst)?;
    let grid = lambda_grid(lmax, spec.grid_points, spec.min_ratio)?;
    let mut warm = intercept_only(inst)?.beta;
    let mut points = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let cfg = SolverConfig {
            lambda,
            eps_tol: spec.eps_tol,
            abs_tol: Some(spec.abs_tol),
            max_iters: spec.max_iters,
            t_max_secs: spec.t_max_secs,
            beta_init: Some(warm.clone()),
            ..SolverConfig::new(Variant::L1Ips)
        };
        let r = fit(inst, &cfg)?;
        let c = Coefficients {
            beta: r.beta.clone(),
            mu: r.mu.clone(),
        };
        let l = model::neg_log_likelihood(inst, &c);
        let g = model::gradient(inst, &c);
        let kkt = kkt_residual(&g, &c.beta, lambda).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let support = c.beta[1..].iter().filter(|b| **b != 0.0).count();
        points.push(PathPoint {
            lambda,
            support_size: support,
            deviance: model::deviance(&counts, &c.mu),
            ebic: ebic(l, support, inst.n_rows(), inst.n_cols(), spec.gamma),
            kkt,
            termination: r.termination,
            beta: r.beta,
        });
        warm = c.beta;
    }
    let selected = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.ebic.total_cmp(&b.1.ebic))
        .map(|(k, _)| k)
        .expect("grid is non-empty");
    Ok(PathResult {
        lambda_max: lmax,
        points,
        selected,
    })
}

impl PathResult {
    /// `lambda,support_size,deviance,ebic` per grid point.
    pub fn write_path_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["lambda", "support_size", "deviance", "ebic"])?;
        for p in &self.points {
            wtr.write_record([fmt_f64(p.lambda), p.support_size.to_string(), fmt_f64(p.deviance), fmt_f64(p.ebic)])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// `column_label,estimate` at the selected penalty.
    pub fn write_selected_csv<W: Write>(&self, labels: &[String], w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["column_label", "estimate"])?;
        for (l, b) in labels.iter().zip(&self.points[self.selected].beta) {
            wtr.write_record([l.clone(), fmt_f64(*b)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_log_spaced_and_decreasing() {
        let g = lambda_grid(10.0, 4, 1e-3).unwrap();
        assert_eq!(g.len(), 4);
        assert!((g[0] - 10.0).abs() < 1e-12 && (g[3] - 0.01).abs() < 1e-12);
        assert!((g[1] / g[0] - g[2] / g[1]).abs() < 1e-12);
        assert!(lambda_grid(10.0, 0, 1e-3).is_err());
    }

    #[test]
    fn ebic_formula() {
        let v = ebic(10.0, 3, 100, 21, 1.0);
        assert!((v - (20.0 + 3.0 * 100f64.ln() + 6.0 * 20f64.ln())).abs() < 1e-12);
    }
}
