//! Majorizing surrogates of `l` (and of the profiled `L`) used to derive the
//! MM updates. Each takes the anchor `beta_minus` and returns the surrogate
//! value at `beta`; all touch the objective at the anchor.

use crate::error::{Error, Result};
use crate::model::{self, CurvatureBound, ProblemInstance};

fn linear_term(inst: &ProblemInstance, beta: &[f64]) -> f64 {
    inst.suff_stats().iter().zip(beta).map(|(s, b)| s * b).sum()
}

fn check(inst: &ProblemInstance, beta: &[f64], beta_minus: &[f64]) -> Result<Vec<f64>> {
    for v in [beta, beta_minus] {
        if v.len() != inst.n_cols() {
            return Err(Error::DimensionMismatch {
                what: "coefficient vector",
                expected: inst.n_cols(),
                got: v.len(),
            });
        }
    }
    Ok(model::mean_at(inst, beta_minus))
}

fn require_non_negative(inst: &ProblemInstance, what: &'static str) -> Result<()> {
    if inst.design().kind().is_non_negative() {
        Ok(())
    } else {
        Err(Error::Contract {
            solver: what,
            requirement: "a non-negative design".into(),
        })
    }
}

/// Equal-weight surrogate `-s^T beta + (1/p) sum_ij mu_i exp(p x_ij (beta_j - beta_j^-))`.
pub fn g1(inst: &ProblemInstance, beta: &[f64], beta_minus: &[f64]) -> Result<f64> {
    let mu = check(inst, beta, beta_minus)?;
    let p = inst.n_cols() as f64;
    let rows = inst.design().row_entries();
    let mut total = 0.0;
    for (i, row) in rows.iter().enumerate() {
        // entries with x_ij = 0 contribute mu_i / p each
        let zeros = inst.n_cols() - row.len();
        let mut acc = zeros as f64;
        for &(j, x) in row {
            acc += (p * x * (beta[j] - beta_minus[j])).exp();
        }
        total += mu[i] * acc / p;
    }
    Ok(total - linear_term(inst, beta))
}

/// Row-share surrogate `-s^T beta + sum_ij (x_ij / x_i+) mu_i exp(x_i+ (beta_j - beta_j^-))`.
pub fn g20(inst: &ProblemInstance, beta: &[f64], beta_minus: &[f64]) -> Result<f64> {
    require_non_negative(inst, "g20")?;
    let mu = check(inst, beta, beta_minus)?;
    let mut total = 0.0;
    for (i, row) in inst.design().row_entries().iter().enumerate() {
        let r: f64 = row.iter().map(|e| e.1).sum();
        total += mu[i] * row.iter().map(|&(j, x)| x / r * (r * (beta[j] - beta_minus[j])).exp()).sum::<f64>();
    }
    Ok(total - linear_term(inst, beta))
}

/// GIS surrogate with the common exponent `R = max_i x_i+`.
pub fn g2(inst: &ProblemInstance, beta: &[f64], beta_minus: &[f64]) -> Result<f64> {
    require_non_negative(inst, "g2")?;
    let mu = check(inst, beta, beta_minus)?;
    let big_r = inst.design().row_sum_max();
    let mut total = 0.0;
    for (i, row) in inst.design().row_entries().iter().enumerate() {
        let r: f64 = row.iter().map(|e| e.1).sum();
        total += mu[i]
            * row
                .iter()
                .map(|&(j, x)| x * (((big_r * (beta[j] - beta_minus[j])).exp() - 1.0) / big_r + 1.0 / r))
                .sum::<f64>();
    }
    Ok(total - linear_term(inst, beta))
}

/// Surrogate for signed designs with weights `|x_ij| / R`.
pub fn g3_general(inst: &ProblemInstance, beta: &[f64], beta_minus: &[f64]) -> Result<f64> {
    let mu = check(inst, beta, beta_minus)?;
    let big_r = inst.design().row_sum_max();
    let mut total = 0.0;
    for (i, row) in inst.design().row_entries().iter().enumerate() {
        let mut used = 0.0;
        let mut acc = 0.0;
        for &(j, x) in row {
            let w = x.abs() / big_r;
            used += w;
            acc += w * (x.signum() * big_r * (beta[j] - beta_minus[j])).exp();
        }
        total += mu[i] * (acc + (1.0 - used));
    }
    Ok(total - linear_term(inst, beta))
}

/// Block-separable surrogate for non-negative designs; `blocks` partitions
/// the columns.
pub fn g4(inst: &ProblemInstance, blocks: &[Vec<usize>], beta: &[f64], beta_minus: &[f64]) -> Result<f64> {
    require_non_negative(inst, "g4")?;
    let mu = check(inst, beta, beta_minus)?;
    let p = inst.n_cols();
    let mut owner = vec![usize::MAX; p];
    for (k, b) in blocks.iter().enumerate() {
        for &j in b {
            if j >= p || owner[j] != usize::MAX {
                return Err(Error::InvalidConfig("blocks must partition the columns".into()));
            }
            owner[j] = k;
        }
    }
    if owner.contains(&usize::MAX) {
        return Err(Error::InvalidConfig("blocks must partition the columns".into()));
    }
    let mut total = 0.0;
    let mut part = vec![0.0; blocks.len()];
    let mut shift = vec![0.0; blocks.len()];
    for (i, row) in inst.design().row_entries().iter().enumerate() {
        part.iter_mut().for_each(|v| *v = 0.0);
        shift.iter_mut().for_each(|v| *v = 0.0);
        let mut r = 0.0;
        for &(j, x) in row {
            part[owner[j]] += x;
            shift[owner[j]] += x * (beta[j] - beta_minus[j]);
            r += x;
        }
        for (pk, sk) in part.iter().zip(&shift) {
            if *pk > 0.0 {
                total += pk / r * mu[i] * (r / pk * sk).exp();
            }
        }
    }
    Ok(total - linear_term(inst, beta))
}

/// Quadratic surrogate of the profiled objective at `slope_minus` with a
/// fixed curvature bound `W`.
pub fn quadratic(inst: &ProblemInstance, w: &CurvatureBound, slope: &[f64], slope_minus: &[f64]) -> Result<f64> {
    let base = model::reparam_objective(inst, slope_minus)?;
    let g = model::reparam_gradient(inst, slope_minus)?;
    if slope.len() != slope_minus.len() {
        return Err(Error::DimensionMismatch {
            what: "slope vector",
            expected: slope_minus.len(),
            got: slope.len(),
        });
    }
    let d: Vec<f64> = slope.iter().zip(slope_minus).map(|(a, b)| a - b).collect();
    Ok(base + g.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() + 0.5 * w.quad_form(&d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_table_design, DesignMatrix, TableSchema};
    use crate::model::objective_at;

    fn table() -> ProblemInstance {
        let x = build_table_design(&TableSchema::uniform(2, 3, 2).unwrap()).unwrap();
        ProblemInstance::new(x, (1..=9).map(f64::from).collect(), None).unwrap()
    }

    #[test]
    fn all_touch_at_the_anchor() {
        let inst = table();
        let b: Vec<f64> = (0..inst.n_cols()).map(|j| 0.1 * j as f64 - 0.2).collect();
        let l = objective_at(&inst, &b);
        for v in [g1(&inst, &b, &b), g20(&inst, &b, &b), g2(&inst, &b, &b), g3_general(&inst, &b, &b)] {
            assert!((v.unwrap() - l).abs() < 1e-12 * l.abs());
        }
        let blocks = vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7, 8]];
        assert!((g4(&inst, &blocks, &b, &b).unwrap() - l).abs() < 1e-12 * l.abs());
    }

    #[test]
    fn g2_dominates_g20() {
        let inst = table();
        let a = vec![0.0; inst.n_cols()];
        let b: Vec<f64> = (0..inst.n_cols()).map(|j| ((j * 5) % 3) as f64 * 0.3 - 0.3).collect();
        assert!(g2(&inst, &b, &a).unwrap() >= g20(&inst, &b, &a).unwrap());
    }

    #[test]
    fn g4_rejects_bad_partitions() {
        let inst = table();
        let b = vec![0.0; inst.n_cols()];
        assert!(g4(&inst, &[vec![0, 1]], &b, &b).is_err());
    }

    #[test]
    fn signed_design_rejected_by_nonnegative_surrogates() {
        let x = DesignMatrix::from_rows(&[vec![1.0, -0.5], vec![1.0, 0.5]], DesignMatrix::default_labels(2)).unwrap();
        let inst = ProblemInstance::new(x, vec![1.0, 2.0], None).unwrap();
        let b = vec![0.0; 2];
        assert!(g2(&inst, &b, &b).is_err());
        assert!(g3_general(&inst, &b, &b).is_ok());
    }
}
