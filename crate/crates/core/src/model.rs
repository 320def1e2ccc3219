//! The Poisson log-affine model `mu = q * exp(X beta)`: objectives,
//! gradients, goodness-of-fit statistics, the intercept-profiled objective
//! and fixed curvature bounds for it.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::design::DesignMatrix;
use crate::error::{Error, Result};

/// Coordinates are kept inside `[-B, B]`; MLEs at infinity show up as
/// clamped coordinates.
pub const DEFAULT_CLAMP: f64 = 250.0;

/// Observed data together with the design and offset.
///
/// Rows with a zero offset are removed at construction. They cannot carry
/// any mass and do not affect the coefficient estimates.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    design: DesignMatrix,
    counts: Option<Vec<f64>>,
    offset: Vec<f64>,
    suff_stats: Vec<f64>,
    beta_true: Option<Vec<f64>>,
    dropped_rows: Vec<usize>,
    original_rows: usize,
}

impl ProblemInstance {
    /// Instance from observed counts `n` and an optional offset (default `q = 1`).
    pub fn new(design: DesignMatrix, counts: Vec<f64>, offset: Option<Vec<f64>>) -> Result<Self> {
        let n_rows = design.n_rows();
        if counts.len() != n_rows {
            return Err(Error::DimensionMismatch {
                what: "counts",
                expected: n_rows,
                got: counts.len(),
            });
        }
        if let Some(i) = counts.iter().position(|&c| !(c.is_finite() && c >= 0.0)) {
            return Err(Error::InvalidInstance(format!(
                "count at row {i} must be finite and non-negative, got {}",
                counts[i]
            )));
        }
        if counts.iter().all(|&c| c == 0.0) {
            return Err(Error::InvalidInstance("all counts are zero".into()));
        }
        let offset = offset.unwrap_or_else(|| vec![1.0; n_rows]);
        check_offset(&offset, n_rows)?;
        if let Some(i) = (0..n_rows).find(|&i| offset[i] == 0.0 && counts[i] > 0.0) {
            return Err(Error::InvalidInstance(format!(
                "row {i} has a positive count but a zero offset; the likelihood is infinite"
            )));
        }
        let keep: Vec<usize> = (0..n_rows).filter(|&i| offset[i] > 0.0).collect();
        let dropped: Vec<usize> = (0..n_rows).filter(|&i| offset[i] == 0.0).collect();
        let (design, counts, offset) = if dropped.is_empty() {
            (design, counts, offset)
        } else {
            let d = design.select_rows(&keep)?;
            let c = keep.iter().map(|&i| counts[i]).collect();
            let q = keep.iter().map(|&i| offset[i]).collect();
            (d, c, q)
        };
        let suff_stats = design.tr_mul_vec(&counts);
        Ok(Self {
            design,
            counts: Some(counts),
            offset,
            suff_stats,
            beta_true: None,
            dropped_rows: dropped,
            original_rows: n_rows,
        })
    }

    /// Instance known only through its sufficient statistics `s = X^T n`,
    /// as in raking where only margin targets are supplied.
    pub fn from_sufficient_stats(design: DesignMatrix, suff_stats: Vec<f64>, offset: Option<Vec<f64>>) -> Result<Self> {
        let n_rows = design.n_rows();
        if suff_stats.len() != design.n_cols() {
            return Err(Error::DimensionMismatch {
                what: "sufficient statistics",
                expected: design.n_cols(),
                got: suff_stats.len(),
            });
        }
        if let Some(j) = suff_stats.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInstance(format!("sufficient statistic {j} is not finite")));
        }
        if suff_stats.iter().all(|&s| s == 0.0) {
            return Err(Error::InvalidInstance("all sufficient statistics are zero".into()));
        }
        let offset = offset.unwrap_or_else(|| vec![1.0; n_rows]);
        check_offset(&offset, n_rows)?;
        let keep: Vec<usize> = (0..n_rows).filter(|&i| offset[i] > 0.0).collect();
        let dropped: Vec<usize> = (0..n_rows).filter(|&i| offset[i] == 0.0).collect();
        let (design, offset) = if dropped.is_empty() {
            (design, offset)
        } else {
            (design.select_rows(&keep)?, keep.iter().map(|&i| offset[i]).collect())
        };
        Ok(Self {
            design,
            counts: None,
            offset,
            suff_stats,
            beta_true: None,
            dropped_rows: dropped,
            original_rows: n_rows,
        })
    }

    /// Attaches the generating coefficients for estimation-error reporting.
    pub fn with_beta_true(mut self, beta: Vec<f64>) -> Result<Self> {
        if beta.len() != self.design.n_cols() {
            return Err(Error::DimensionMismatch {
                what: "true coefficients",
                expected: self.design.n_cols(),
                got: beta.len(),
            });
        }
        self.beta_true = Some(beta);
        Ok(self)
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn counts(&self) -> Option<&[f64]> {
        self.counts.as_deref()
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    /// `s = X^T n`.
    pub fn suff_stats(&self) -> &[f64] {
        &self.suff_stats
    }

    pub fn beta_true(&self) -> Option<&[f64]> {
        self.beta_true.as_deref()
    }

    pub fn n_rows(&self) -> usize {
        self.design.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.design.n_cols()
    }

    /// `<1, n>`. Taken from the intercept statistic when the design has one,
    /// otherwise from the counts.
    pub fn total(&self) -> Option<f64> {
        if self.design.has_intercept() {
            Some(self.suff_stats[0])
        } else {
            self.counts.as_ref().map(|c| c.iter().sum())
        }
    }

    /// Rows removed for having a zero offset (indices into the original rows).
    pub fn dropped_rows(&self) -> &[usize] {
        &self.dropped_rows
    }

    pub fn original_rows(&self) -> usize {
        self.original_rows
    }

    /// Re-inserts zeros for dropped rows so a fitted vector lines up with the
    /// original input rows.
    pub fn expand_rows(&self, values: &[f64]) -> Vec<f64> {
        if self.dropped_rows.is_empty() {
            return values.to_vec();
        }
        let mut out = Vec::with_capacity(self.original_rows);
        let mut src = values.iter();
        let mut dropped = self.dropped_rows.iter().peekable();
        for i in 0..self.original_rows {
            if dropped.peek() == Some(&&i) {
                dropped.next();
                out.push(0.0);
            } else {
                out.push(*src.next().expect("value per kept row"));
            }
        }
        out
    }

    /// Fails unless column 0 is the intercept.
    pub fn require_intercept(&self, what: &'static str) -> Result<f64> {
        if !self.design.has_intercept() {
            return Err(Error::Contract {
                solver: what,
                requirement: "a design whose first column is the intercept".into(),
            });
        }
        Ok(self.suff_stats[0])
    }
}

fn check_offset(offset: &[f64], n_rows: usize) -> Result<()> {
    if offset.len() != n_rows {
        return Err(Error::DimensionMismatch {
            what: "offset",
            expected: n_rows,
            got: offset.len(),
        });
    }
    if let Some(i) = offset.iter().position(|&q| !(q.is_finite() && q >= 0.0)) {
        return Err(Error::InvalidInstance(format!(
            "offset at row {i} must be finite and non-negative, got {}",
            offset[i]
        )));
    }
    if offset.iter().all(|&q| q == 0.0) {
        return Err(Error::InvalidInstance("every offset is zero".into()));
    }
    Ok(())
}

/// Coefficients `beta` with the fitted mean `mu = q * exp(X beta)` kept in step.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
}

impl Coefficients {
    pub fn new(inst: &ProblemInstance, beta: Vec<f64>) -> Self {
        let mu = mean_at(inst, &beta);
        Self { beta, mu }
    }

    pub fn zeros(inst: &ProblemInstance) -> Self {
        Self::new(inst, vec![0.0; inst.n_cols()])
    }

    /// `beta_0` when column 0 is the intercept.
    pub fn intercept(&self) -> f64 {
        self.beta[0]
    }

    /// Recomputes `mu` from `beta`, discarding accumulated round-off.
    pub fn resync(&mut self, inst: &ProblemInstance) {
        self.mu = mean_at(inst, &self.beta);
    }

    /// `max_i |log(mu_i / q_i) - x_i^T beta|`.
    pub fn consistency_error(&self, inst: &ProblemInstance) -> f64 {
        let eta = inst.design().mul_vec(&self.beta);
        self.mu
            .iter()
            .zip(inst.offset())
            .zip(&eta)
            .map(|((m, q), e)| ((m / q).ln() - e).abs())
            .fold(0.0, f64::max)
    }
}

/// `q * exp(X beta)`.
pub fn mean_at(inst: &ProblemInstance, beta: &[f64]) -> Vec<f64> {
    let eta = inst.design().mul_vec(beta);
    eta.iter().zip(inst.offset()).map(|(e, q)| q * e.exp()).collect()
}

/// `l(beta) = -<n, X beta> + <q, exp(X beta)>`, evaluated as `-<s, beta> + sum(mu)`.
///
/// Returns `+inf` when the mean overflows; callers should then switch to
/// the intercept-profiled solvers which work on a log-sum-exp scale.
pub fn neg_log_likelihood(inst: &ProblemInstance, c: &Coefficients) -> f64 {
    let linear: f64 = inst.suff_stats().iter().zip(&c.beta).map(|(s, b)| s * b).sum();
    let mass: f64 = c.mu.iter().sum();
    if !mass.is_finite() {
        log::debug!("fitted mean overflowed; objective reported as +inf");
        return f64::INFINITY;
    }
    mass - linear
}

/// `l(beta)` from scratch.
pub fn objective_at(inst: &ProblemInstance, beta: &[f64]) -> f64 {
    let c = Coefficients::new(inst, beta.to_vec());
    neg_log_likelihood(inst, &c)
}

/// `grad l = X^T mu - s`.
pub fn gradient(inst: &ProblemInstance, c: &Coefficients) -> Vec<f64> {
    let x = inst.design();
    (0..x.n_cols())
        .map(|j| x.column_dot(j, &c.mu) - inst.suff_stats()[j])
        .collect()
}

/// `X^T diag(mu) X`.
pub fn hessian(inst: &ProblemInstance, c: &Coefficients) -> DMatrix<f64> {
    let cols: Vec<usize> = (0..inst.n_cols()).collect();
    inst.design().block(&cols).weighted_gram(&c.mu)
}

/// `2 sum n_i log(n_i / mu_i)` with `0 log 0 = 0`; `+inf` if some `mu_i = 0 < n_i`.
pub fn g_squared(n: &[f64], mu: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&ni, &mi) in n.iter().zip(mu) {
        if ni > 0.0 {
            if mi <= 0.0 {
                return f64::INFINITY;
            }
            acc += ni * (ni / mi).ln();
        }
    }
    2.0 * acc
}

/// Likelihood-ratio form `2 sum [n log(n/mu) - n + mu]`, non-negative for
/// any pair of vectors. Equals [`g_squared`] when the totals match.
pub fn deviance(n: &[f64], mu: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&ni, &mi) in n.iter().zip(mu) {
        if ni > 0.0 {
            if mi <= 0.0 {
                return f64::INFINITY;
            }
            acc += ni * (ni / mi).ln() - ni + mi;
        } else {
            acc += mi;
        }
    }
    2.0 * acc
}

/// Pearson `sum (n_i - mu_i)^2 / mu_i`. Rows with `n_i = 0` contribute `mu_i`.
pub fn pearson_x2(n: &[f64], mu: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&ni, &mi) in n.iter().zip(mu) {
        if ni == 0.0 {
            acc += mi;
        } else if mi <= 0.0 {
            return f64::INFINITY;
        } else {
            acc += (ni - mi) * (ni - mi) / mi;
        }
    }
    acc
}

/// Quantities of the profiled objective at one slope vector, computed with
/// a log-sum-exp shift.
#[derive(Debug, Clone)]
pub struct SlopeEval {
    /// `log <q, exp(X0 slope)>`.
    pub log_mass: f64,
    /// `mu0 / <1, mu0>`, a probability vector over rows.
    pub weights: Vec<f64>,
}

/// Linear predictor of the slope columns `X0 slope` (column 0 skipped).
pub fn slope_predictor(x: &DesignMatrix, slope: &[f64]) -> Vec<f64> {
    let mut eta = vec![0.0; x.n_rows()];
    for (a, &b) in slope.iter().enumerate() {
        if b != 0.0 {
            x.column(a + 1).axpy(b, &mut eta);
        }
    }
    eta
}

/// Evaluates `log <q, exp(eta)>` and the normalized weights from a predictor.
pub fn eval_predictor(offset: &[f64], eta: &[f64]) -> SlopeEval {
    let log_q: Vec<f64> = offset.iter().map(|q| q.ln()).collect();
    eval_log_predictor(&log_q, eta)
}

/// [`eval_predictor`] with the offset given on the log scale.
pub(crate) fn eval_log_predictor(log_q: &[f64], eta: &[f64]) -> SlopeEval {
    let m = eta.iter().zip(log_q).fold(f64::NEG_INFINITY, |m, (e, l)| m.max(e + l));
    let mut weights: Vec<f64> = eta.iter().zip(log_q).map(|(e, l)| (e + l - m).exp()).collect();
    let z: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= z);
    SlopeEval {
        log_mass: m + z.ln(),
        weights,
    }
}

/// `log <q, exp(eta)>` alone, with the offset on the log scale.
pub(crate) fn log_mass(log_q: &[f64], eta: &[f64]) -> f64 {
    let m = eta.iter().zip(log_q).fold(f64::NEG_INFINITY, |m, (e, l)| m.max(e + l));
    let z: f64 = eta.iter().zip(log_q).map(|(e, l)| (e + l - m).exp()).sum();
    m + z.ln()
}

fn check_slope(inst: &ProblemInstance, slope: &[f64], what: &'static str) -> Result<f64> {
    let total = inst.require_intercept(what)?;
    if slope.len() + 1 != inst.n_cols() {
        return Err(Error::DimensionMismatch {
            what: "slope vector",
            expected: inst.n_cols() - 1,
            got: slope.len(),
        });
    }
    Ok(total)
}

pub fn eval_slope(inst: &ProblemInstance, slope: &[f64]) -> Result<SlopeEval> {
    check_slope(inst, slope, "slope evaluation")?;
    Ok(eval_predictor(inst.offset(), &slope_predictor(inst.design(), slope)))
}

/// Profiled objective `L(slope) = -<s0, slope> + <1,n> log <q, exp(X0 slope)>`.
pub fn reparam_objective(inst: &ProblemInstance, slope: &[f64]) -> Result<f64> {
    let total = check_slope(inst, slope, "reparam_objective")?;
    let ev = eval_predictor(inst.offset(), &slope_predictor(inst.design(), slope));
    Ok(profiled_value(inst, total, slope, ev.log_mass))
}

pub(crate) fn profiled_value(inst: &ProblemInstance, total: f64, slope: &[f64], log_mass: f64) -> f64 {
    let linear: f64 = inst.suff_stats()[1..].iter().zip(slope).map(|(s, b)| s * b).sum();
    total * log_mass - linear
}

/// `grad L = -X0^T n + <1,n> X0^T (mu0 / <1, mu0>)`.
pub fn reparam_gradient(inst: &ProblemInstance, slope: &[f64]) -> Result<Vec<f64>> {
    let total = check_slope(inst, slope, "reparam_gradient")?;
    let ev = eval_predictor(inst.offset(), &slope_predictor(inst.design(), slope));
    Ok(profiled_gradient(inst, total, &ev.weights))
}

pub(crate) fn profiled_gradient(inst: &ProblemInstance, total: f64, weights: &[f64]) -> Vec<f64> {
    let x = inst.design();
    (1..x.n_cols())
        .map(|j| total * x.column_dot(j, weights) - inst.suff_stats()[j])
        .collect()
}

/// Hessian of `L`: `<1,n> X0^T [diag(w) - w w^T] X0` with `w = mu0 / <1,mu0>`.
pub fn reparam_hessian(inst: &ProblemInstance, slope: &[f64]) -> Result<DMatrix<f64>> {
    let total = check_slope(inst, slope, "reparam_hessian")?;
    let ev = eval_predictor(inst.offset(), &slope_predictor(inst.design(), slope));
    let cols: Vec<usize> = (1..inst.n_cols()).collect();
    let block = inst.design().block(&cols);
    Ok(multinomial_curvature(&block, total, &ev.weights))
}

/// `total * X_k^T [diag(w) - w w^T] X_k` for a block and probability weights.
pub(crate) fn multinomial_curvature(block: &crate::design::ColumnBlock, total: f64, weights: &[f64]) -> DMatrix<f64> {
    multinomial_curvature_with(block, total, weights, &block.tr_mul(weights))
}

/// [`multinomial_curvature`] given `v = X_k^T w`.
pub(crate) fn multinomial_curvature_with(block: &crate::design::ColumnBlock, total: f64, weights: &[f64], v: &[f64]) -> DMatrix<f64> {
    let mut h = block.weighted_gram(weights);
    let g = v.len();
    for (b, col) in h.as_mut_slice().chunks_exact_mut(g).enumerate() {
        let vb = v[b];
        for (x, &va) in col.iter_mut().zip(v) {
            *x = total * (*x - va * vb);
        }
    }
    h
}

/// Intercept minimizing `l` for fixed slopes: `log <1,n> - log <q, exp(X0 slope)>`.
pub fn optimal_intercept(inst: &ProblemInstance, slope: &[f64]) -> Result<f64> {
    let total = check_slope(inst, slope, "optimal_intercept")?;
    let ev = eval_predictor(inst.offset(), &slope_predictor(inst.design(), slope));
    Ok(total.ln() - ev.log_mass)
}

/// Full coefficient vector `[beta_0*, slope]` with the optimal intercept.
pub fn with_optimal_intercept(inst: &ProblemInstance, slope: &[f64]) -> Result<Vec<f64>> {
    let b0 = optimal_intercept(inst, slope)?;
    let mut beta = Vec::with_capacity(slope.len() + 1);
    beta.push(b0);
    beta.extend_from_slice(slope);
    Ok(beta)
}

/// Which fixed curvature bound to use for the quadratic surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WChoice {
    /// `(<1,n> ||X0||_2^2 / 2) I`.
    Spectral,
    /// `X0^T (<1,n> I - 1 1^T) X0 / 2`.
    Bohning,
}

/// A fixed upper bound on the Hessian of `L`, with its factorization.
#[derive(Debug, Clone)]
pub struct CurvatureBound {
    pub matrix: DMatrix<f64>,
    pub choice: WChoice,
    /// A small ridge was added because the matrix was numerically singular.
    pub ridge_repaired: bool,
    /// The Böhning matrix failed validation and the spectral bound was used.
    pub fell_back: bool,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl CurvatureBound {
    /// `W^{-1} v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        self.chol.solve(&DVector::from_column_slice(v)).as_slice().to_vec()
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let v = DVector::from_column_slice(v);
        v.dot(&(&self.matrix * &v))
    }

    fn from_matrix(mut matrix: DMatrix<f64>, choice: WChoice) -> Result<Self> {
        let mut ridge_repaired = false;
        let dim = matrix.nrows().max(1) as f64;
        let mut bump = 1e-10 * matrix.trace().abs().max(f64::MIN_POSITIVE) / dim;
        for _ in 0..12 {
            if let Some(chol) = Cholesky::new(matrix.clone()) {
                let diag_min = chol.l().diagonal().iter().copied().fold(f64::INFINITY, f64::min);
                let diag_max = chol.l().diagonal().iter().copied().fold(0.0, f64::max);
                if diag_min > 1e-12 * diag_max.max(f64::MIN_POSITIVE) {
                    return Ok(Self {
                        matrix,
                        choice,
                        ridge_repaired,
                        fell_back: false,
                        chol,
                    });
                }
            }
            for i in 0..matrix.nrows() {
                matrix[(i, i)] += bump;
            }
            ridge_repaired = true;
            bump *= 10.0;
        }
        Err(Error::Numerical("curvature bound could not be factorized".into()))
    }

    /// Adds `lambda I` (ridge penalty curvature) and refactorizes.
    pub fn with_ridge(&self, lambda: f64) -> Result<Self> {
        if lambda == 0.0 {
            return Ok(self.clone());
        }
        let mut m = self.matrix.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += lambda;
        }
        let mut out = Self::from_matrix(m, self.choice)?;
        out.ridge_repaired |= self.ridge_repaired;
        out.fell_back = self.fell_back;
        Ok(out)
    }
}

fn slope_gram_and_sums(inst: &ProblemInstance) -> (DMatrix<f64>, DVector<f64>) {
    let cols: Vec<usize> = (1..inst.n_cols()).collect();
    let block = inst.design().block(&cols);
    let ones = vec![1.0; inst.n_rows()];
    (block.weighted_gram(&ones), DVector::from_vec(block.tr_mul(&ones)))
}

/// `X0^T (<1,n> I - 1 1^T) X0 / 2` as a raw matrix.
pub fn bohning_matrix(inst: &ProblemInstance) -> Result<DMatrix<f64>> {
    let total = inst.require_intercept("bohning_bound")?;
    let (gram, sums) = slope_gram_and_sums(inst);
    let mut w = gram * total;
    w -= &sums * sums.transpose();
    w *= 0.5;
    Ok(w)
}

/// Largest singular value of the slope columns `X0`, by power iteration on
/// `X0^T X0`.
pub fn slope_spectral_norm(inst: &ProblemInstance) -> f64 {
    let x = inst.design();
    let d = x.n_cols() - 1;
    if d == 0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..d).map(|a| 1.0 + (a as f64 * 0.618_033_988_75).fract()).collect();
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        let xv = slope_predictor(x, &v);
        let w: Vec<f64> = (1..x.n_cols()).map(|j| x.column_dot(j, &xv)).collect();
        let next = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        v = w;
        if (next - lambda).abs() <= 1e-14 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

/// `<1,n> ||X0||_2^2 / 2`, the scalar of the isotropic curvature bound.
pub fn spectral_bound(inst: &ProblemInstance) -> Result<f64> {
    let total = inst.require_intercept("spectral_bound")?;
    let sigma = slope_spectral_norm(inst);
    // power iteration converges from below; nudge up so the bound stays valid
    Ok(total * sigma * sigma / 2.0 * (1.0 + 1e-10))
}

/// Worst violation of `v^T (W - H(mu0)) v >= 0` over sampled directions `v`,
/// relative to `||v||^2`. For a fixed `v` the worst `mu0` puts half its mass
/// on each of the rows minimizing and maximizing `x0_i^T v`, so each sample is
/// checked against every admissible mean at once.
pub fn curvature_bound_violation(inst: &ProblemInstance, w: &DMatrix<f64>, samples: usize, seed: u64) -> Result<f64> {
    let total = inst.require_intercept("curvature bound validation")?;
    let d = inst.n_cols() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..samples + d {
        let v: Vec<f64> = if k < d {
            (0..d).map(|a| if a == k { 1.0 } else { 0.0 }).collect()
        } else {
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let norm2: f64 = v.iter().map(|a| a * a).sum();
        let z = slope_predictor(inst.design(), &v);
        let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let h_max = total * (hi - lo) * (hi - lo) / 4.0;
        let vd = DVector::from_vec(v);
        let wq = vd.dot(&(w * &vd));
        worst = worst.max((h_max - wq) / norm2);
    }
    Ok(worst)
}

/// Builds the requested curvature bound. The Böhning matrix is provably
/// valid when `<1,n> >= N`; otherwise it is validated by sampling and the
/// spectral bound is used if it fails.
pub fn curvature_bound(inst: &ProblemInstance, choice: WChoice) -> Result<CurvatureBound> {
    let total = inst.require_intercept("curvature_bound")?;
    let d = inst.n_cols() - 1;
    if d == 0 {
        return Err(Error::Contract {
            solver: "curvature_bound",
            requirement: "at least one slope column".into(),
        });
    }
    match choice {
        WChoice::Spectral => {
            let s = spectral_bound(inst)?;
            CurvatureBound::from_matrix(DMatrix::identity(d, d) * s, WChoice::Spectral)
        }
        WChoice::Bohning => {
            let w = bohning_matrix(inst)?;
            let valid = if total >= inst.n_rows() as f64 {
                true
            } else {
                let scale = w.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
                curvature_bound_violation(inst, &w, 200, 0x5eed)? <= 1e-9 * scale
            };
            if valid {
                CurvatureBound::from_matrix(w, WChoice::Bohning)
            } else {
                log::warn!(
                    "Böhning curvature bound is not valid for this instance (<1,n> = {total} < N = {}); using the spectral bound",
                    inst.n_rows()
                );
                let s = spectral_bound(inst)?;
                let mut b = CurvatureBound::from_matrix(DMatrix::identity(d, d) * s, WChoice::Spectral)?;
                b.fell_back = true;
                Ok(b)
            }
        }
    }
}
