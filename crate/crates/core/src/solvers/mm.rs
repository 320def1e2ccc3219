//! Synchronized majorization-minimization updates: binary MM (step `1/p`),
//! GIS (step `1/R`), the closed-form update for signed designs, and the
//! block-separable parallel update solved by Newton per block.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::newton::{minimize, NewtonOptions, SmoothProblem};
use super::{block_partition, clamp_coordinate, evaluate_coefficients, initial_beta, require_binary, require_non_negative, Engine, Eval, FitFlags, ObjectiveKind, SolverConfig, Variant};
use crate::design::ColumnBlock;
use crate::error::Result;
use crate::model::{Coefficients, ProblemInstance};

/// Applies `beta += delta` (clamped) and `mu *= exp(X delta)` in one pass.
/// Returns the number of clamped coordinates.
fn apply_synchronized(inst: &ProblemInstance, c: &mut Coefficients, targets: &[f64], clamp: f64) -> usize {
    let mut hits = 0;
    let delta: Vec<f64> = targets
        .iter()
        .zip(&c.beta)
        .map(|(&t, &b)| clamp_coordinate(t, clamp, &mut hits) - b)
        .collect();
    let shift = inst.design().mul_vec(&delta);
    for (m, s) in c.mu.iter_mut().zip(&shift) {
        *m *= s.exp();
    }
    for (b, d) in c.beta.iter_mut().zip(&delta) {
        *b += d;
    }
    hits
}

/// `beta += (1/c0) log(s / X^T mu)` for every coordinate at once.
fn scaled_step(inst: &ProblemInstance, c: &mut Coefficients, c0: f64, clamp: f64) -> usize {
    let x = inst.design();
    let targets: Vec<f64> = (0..x.n_cols())
        .map(|j| {
            let s = inst.suff_stats()[j];
            let a = x.column_dot(j, &c.mu);
            if s > 0.0 && a > 0.0 {
                c.beta[j] + (s / a).ln() / c0
            } else if s > 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    apply_synchronized(inst, c, &targets, clamp)
}

/// One binary-design MM step with step size `1/p`. Returns the number of
/// clamped coordinates.
pub fn mm_binary_step(inst: &ProblemInstance, c: &mut Coefficients, clamp: f64) -> usize {
    scaled_step(inst, c, inst.n_cols() as f64, clamp)
}

/// One GIS step with step size `1/R`, `R = max_i sum_j x_ij`.
pub fn gis_step(inst: &ProblemInstance, c: &mut Coefficients, clamp: f64) -> usize {
    scaled_step(inst, c, inst.design().row_sum_max(), clamp)
}

/// Minimizer of `-b D + a e^{R D} / R + c' e^{-R D} / R` over `D`, with
/// `a = <x^+, mu>`, `b = <x, n>`, `c' = <x^-, mu>`. Infinite when the
/// one-dimensional surrogate has no finite minimizer.
pub fn mm_general_delta(a: f64, b: f64, cn: f64, r: f64) -> f64 {
    if a > 0.0 {
        let disc = (b * b + 4.0 * a * cn).sqrt();
        // the positive root of a y^2 - b y - c' = 0, in a cancellation-free form
        let y = if b >= 0.0 { (b + disc) / (2.0 * a) } else { 2.0 * cn / (disc - b) };
        if y > 0.0 {
            y.ln() / r
        } else {
            f64::NEG_INFINITY
        }
    } else if b < 0.0 && cn > 0.0 {
        (cn / -b).ln() / r
    } else if b > 0.0 || cn > 0.0 {
        f64::INFINITY
    } else if b < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

/// One MM step for an arbitrary real design.
pub fn mm_general_step(inst: &ProblemInstance, c: &mut Coefficients, clamp: f64) -> usize {
    let x = inst.design();
    let r = x.row_sum_max();
    let targets: Vec<f64> = (0..x.n_cols())
        .map(|j| {
            let (a, cn) = x.column(j).split_dot(&c.mu);
            c.beta[j] + mm_general_delta(a, inst.suff_stats()[j], cn, r)
        })
        .collect();
    apply_synchronized(inst, c, &targets, clamp)
}

/// Precomputed layout of the parallel update.
pub(crate) struct ParallelBlocks {
    blocks: Vec<ColumnBlock>,
    /// `x_{i+,k} / x_{i+}` per block and row.
    shares: Vec<Vec<f64>>,
}

impl ParallelBlocks {
    pub(crate) fn new(inst: &ProblemInstance, partition: &[Vec<usize>]) -> Self {
        let x = inst.design();
        let totals = x.row_sums();
        let blocks: Vec<ColumnBlock> = partition.iter().map(|cols| x.block(cols)).collect();
        let shares = blocks
            .iter()
            .map(|b| b.row_sums().iter().zip(&totals).map(|(part, all)| part / all).collect())
            .collect();
        Self { blocks, shares }
    }
}

/// The block-`k` term of the separable surrogate, as a function of the
/// block displacement `d`.
struct BlockSurrogate<'a> {
    block: &'a ColumnBlock,
    share: &'a [f64],
    mu: &'a [f64],
    s: Vec<f64>,
    z: Vec<f64>,
}

impl BlockSurrogate<'_> {
    fn exponentials(&mut self, d: &[f64]) -> Vec<f64> {
        self.block.mul_into(d, &mut self.z);
        self.z
            .iter()
            .zip(self.share)
            .zip(self.mu)
            .map(|((&z, &w), &m)| if w > 0.0 { m * (z / w).exp() } else { 0.0 })
            .collect()
    }
}

impl SmoothProblem for BlockSurrogate<'_> {
    fn value(&mut self, d: &[f64]) -> f64 {
        let e = self.exponentials(d);
        let mass: f64 = e.iter().zip(self.share).map(|(e, w)| e * w).sum();
        mass - self.s.iter().zip(d).map(|(s, d)| s * d).sum::<f64>()
    }

    fn derivatives(&mut self, d: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
        let e = self.exponentials(d);
        let mass: f64 = e.iter().zip(self.share).map(|(e, w)| e * w).sum();
        let value = mass - self.s.iter().zip(d).map(|(s, d)| s * d).sum::<f64>();
        let g: Vec<f64> = self.block.tr_mul(&e).iter().zip(&self.s).map(|(a, s)| a - s).collect();
        let curv: Vec<f64> = e.iter().zip(self.share).map(|(&e, &w)| if w > 0.0 { e / w } else { 0.0 }).collect();
        (value, g, self.block.weighted_gram(&curv))
    }
}

/// Result of one parallel step.
#[derive(Debug, Clone, Default)]
pub(crate) struct ParallelReport {
    pub clamped: usize,
    pub failures: usize,
    pub zero_steps: usize,
}

pub(crate) fn parallel_step_with(inst: &ProblemInstance, c: &mut Coefficients, layout: &ParallelBlocks, opts: &NewtonOptions, clamp: f64) -> Result<ParallelReport> {
    let mu = &c.mu;
    let solved: Vec<Result<(Vec<f64>, bool, bool)>> = layout
        .blocks
        .par_iter()
        .zip(&layout.shares)
        .map(|(block, share)| {
            let s: Vec<f64> = block.columns().iter().map(|&j| inst.suff_stats()[j]).collect();
            let mut problem = BlockSurrogate {
                block,
                share,
                mu,
                s,
                z: vec![0.0; mu.len()],
            };
            let first = minimize(&mut problem, vec![0.0; block.len()], opts)?;
            if first.converged {
                return Ok((first.x, false, false));
            }
            // halve the displacement and try once more
            let half: Vec<f64> = first.x.iter().map(|v| 0.5 * v).collect();
            let second = minimize(&mut problem, half, opts)?;
            Ok((second.x, !second.converged, second.zero_step || first.zero_step))
        })
        .collect();
    let mut report = ParallelReport::default();
    let mut targets = c.beta.clone();
    for (block, out) in layout.blocks.iter().zip(solved) {
        let (d, failed, zero) = out?;
        report.failures += failed as usize;
        report.zero_steps += zero as usize;
        for (&j, dj) in block.columns().iter().zip(&d) {
            targets[j] += dj;
        }
    }
    report.clamped = apply_synchronized(inst, c, &targets, clamp);
    Ok(report)
}

/// One step of the block-separable MM update for non-negative designs:
/// every block minimizes its own surrogate term (in parallel), then all
/// blocks are applied together.
pub fn mm_parallel_step(inst: &ProblemInstance, c: &mut Coefficients, blocks: &[Vec<usize>], opts: &NewtonOptions, clamp: f64) -> Result<usize> {
    require_non_negative(inst, "mm-parallel")?;
    let layout = ParallelBlocks::new(inst, blocks);
    Ok(parallel_step_with(inst, c, &layout, opts, clamp)?.clamped)
}

enum Rule {
    Binary,
    Gis,
    General,
    Parallel(ParallelBlocks, NewtonOptions),
}

pub(crate) struct MmEngine<'a> {
    inst: &'a ProblemInstance,
    c: Coefficients,
    rule: Rule,
    clamp: f64,
    resync_every: usize,
    iters: usize,
    flags: FitFlags,
}

impl<'a> MmEngine<'a> {
    pub(crate) fn new(inst: &'a ProblemInstance, cfg: &SolverConfig) -> Result<Self> {
        let rule = match cfg.variant {
            Variant::MmBinary => {
                require_binary(inst, "mm-binary", "gis or mm-general")?;
                Rule::Binary
            }
            Variant::Gis => {
                require_non_negative(inst, "gis")?;
                Rule::Gis
            }
            Variant::MmParallel => {
                require_non_negative(inst, "mm-parallel")?;
                let sizes = block_partition(inst.n_cols(), cfg)?;
                let mut start = 0;
                let partition: Vec<Vec<usize>> = sizes
                    .iter()
                    .map(|&g| {
                        let cols = (start..start + g).collect();
                        start += g;
                        cols
                    })
                    .collect();
                let total = inst.suff_stats().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                let opts = NewtonOptions {
                    tol: cfg.inner_tol,
                    abs_tol: 1e-13 * total,
                    max_iters: cfg.inner_max_iters,
                    ..NewtonOptions::default()
                };
                Rule::Parallel(ParallelBlocks::new(inst, &partition), opts)
            }
            _ => Rule::General,
        };
        Ok(Self {
            inst,
            c: Coefficients::new(inst, initial_beta(inst, cfg)?),
            rule,
            clamp: cfg.clamp,
            resync_every: cfg.resync_every,
            iters: 0,
            flags: FitFlags::default(),
        })
    }
}

impl Engine for MmEngine<'_> {
    fn step(&mut self) -> Result<()> {
        let hits = match &self.rule {
            Rule::Binary => mm_binary_step(self.inst, &mut self.c, self.clamp),
            Rule::Gis => gis_step(self.inst, &mut self.c, self.clamp),
            Rule::General => mm_general_step(self.inst, &mut self.c, self.clamp),
            Rule::Parallel(layout, opts) => {
                let report = parallel_step_with(self.inst, &mut self.c, layout, opts, self.clamp)?;
                self.flags.subsolver_failures += report.failures;
                self.flags.zero_steps += report.zero_steps;
                report.clamped
            }
        };
        self.flags.divergent_coordinates += hits;
        self.iters += 1;
        if self.iters % self.resync_every == 0 {
            self.c.resync(self.inst);
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Eval {
        evaluate_coefficients(self.inst, &self.c, ObjectiveKind::Likelihood)
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
    use crate::model::{neg_log_likelihood, objective_at};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gis_and_binary_coincide_on_one_column() {
        let x = DesignMatrix::sparse_binary(3, vec![vec![0, 1, 2]], DesignMatrix::default_labels(1)).unwrap();
        let inst = ProblemInstance::new(x, vec![2.0, 3.0, 7.0], None).unwrap();
        let mut a = Coefficients::zeros(&inst);
        let mut b = Coefficients::zeros(&inst);
        mm_binary_step(&inst, &mut a, 250.0);
        gis_step(&inst, &mut b, 250.0);
        assert_eq!(a, b);
        assert!((a.beta[0] - (12.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn gis_step_is_larger_on_wide_main_effects() {
        let schema = TableSchema::new(
            vec![
                crate::design::Factor::new("A", 2),
                crate::design::Factor::new("B", 2),
                crate::design::Factor::new("C", 100),
            ],
            1,
        )
        .unwrap();
        let x = build_table_design(&schema).unwrap();
        assert_eq!((x.n_cols(), x.row_sum_max()), (102, 4.0));
        let n: Vec<f64> = (0..400).map(|i| (i % 7 + 1) as f64).collect();
        let inst = ProblemInstance::new(x, n, None).unwrap();
        let mut a = Coefficients::zeros(&inst);
        let mut b = Coefficients::zeros(&inst);
        mm_binary_step(&inst, &mut a, 250.0);
        gis_step(&inst, &mut b, 250.0);
        for j in 0..102 {
            if a.beta[j] != 0.0 {
                assert!((b.beta[j] / a.beta[j] - 25.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn general_delta_cases() {
        assert_eq!(mm_general_delta(1.0, 0.0, 1.0, 2.0), 0.0);
        // non-negative column reduces to GIS
        let d = mm_general_delta(3.0, 5.0, 0.0, 2.0);
        assert!((d - (5.0f64 / 3.0).ln() / 2.0).abs() < 1e-15);
        assert_eq!(mm_general_delta(0.0, 2.0, 0.0, 1.0), f64::INFINITY);
        assert!((mm_general_delta(0.0, -2.0, 4.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(0.01..10.0);
            let b: f64 = rng.random_range(-10.0..10.0);
            let c: f64 = rng.random_range(0.0..10.0);
            let r: f64 = rng.random_range(0.5..4.0);
            let d = mm_general_delta(a, b, c, r);
            let resid = -b + a * (r * d).exp() - c * (-r * d).exp();
            assert!(resid.abs() <= 1e-10 * (a + b.abs() + c), "{a} {b} {c}: {resid}");
        }
    }

    fn signed_instance(seed: u64) -> ProblemInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let mut r = vec![1.0];
                r.extend((0..4).map(|_| rng.random_range(-0.5..0.5)));
                r
            })
            .collect();
        let x = DesignMatrix::from_rows(&rows, DesignMatrix::default_labels(5)).unwrap();
        let n = (0..40).map(|_| rng.random_range(1..15) as f64).collect();
        ProblemInstance::new(x, n, None).unwrap()
    }

    #[test]
    fn general_step_descends() {
        let inst = signed_instance(4);
        let mut c = Coefficients::zeros(&inst);
        let mut last = neg_log_likelihood(&inst, &c);
        for _ in 0..200 {
            mm_general_step(&inst, &mut c, 250.0);
            let l = neg_log_likelihood(&inst, &c);
            assert!(l <= last + 1e-9 * (1.0 + last.abs()));
            last = l;
        }
    }

    fn nonneg_instance(seed: u64, n_rows: usize, d: usize) -> ProblemInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n_rows)
            .map(|_| {
                let mut r = vec![1.0];
                r.extend((0..d).map(|_| rng.random_range(0.0..0.6)));
                r
            })
            .collect();
        let x = DesignMatrix::from_rows(&rows, DesignMatrix::default_labels(d + 1)).unwrap();
        let n = (0..n_rows).map(|_| rng.random_range(1..15) as f64).collect();
        ProblemInstance::new(x, n, None).unwrap()
    }

    #[test]
    fn parallel_step_descends() {
        let inst = nonneg_instance(5, 30, 6);
        let mut c = Coefficients::zeros(&inst);
        let blocks = vec![vec![0, 1], vec![2, 3, 4], vec![5, 6]];
        let opts = NewtonOptions::default();
        let mut last = neg_log_likelihood(&inst, &c);
        for _ in 0..200 {
            mm_parallel_step(&inst, &mut c, &blocks, &opts, 250.0).unwrap();
            let l = neg_log_likelihood(&inst, &c);
            assert!(l <= last + 1e-9 * (1.0 + last.abs()));
            last = l;
        }
    }

    #[test]
    fn parallel_singletons_solve_per_coordinate_equations() {
        let inst = nonneg_instance(6, 25, 3);
        let c0 = Coefficients::new(&inst, vec![0.1, -0.2, 0.3, 0.05]);
        let mut c = c0.clone();
        let blocks: Vec<Vec<usize>> = (0..4).map(|j| vec![j]).collect();
        mm_parallel_step(&inst, &mut c, &blocks, &NewtonOptions::default(), 250.0).unwrap();
        let x = inst.design();
        let rs = x.row_sums();
        for j in 0..4 {
            let d = c.beta[j] - c0.beta[j];
            let lhs: f64 = (0..25).map(|i| x.entry(i, j) * c0.mu[i] * (rs[i] * d).exp()).sum();
            let rhs = inst.suff_stats()[j];
            assert!((lhs - rhs).abs() <= 1e-8 * rhs, "{j}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn parallel_single_block_on_identity_is_exact() {
        let rows: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect()).collect();
        let x = DesignMatrix::from_rows(&rows, DesignMatrix::default_labels(3)).unwrap();
        let inst = ProblemInstance::new(x, vec![2.0, 4.0, 1.0], None).unwrap();
        let mut c = Coefficients::zeros(&inst);
        mm_parallel_step(&inst, &mut c, &[vec![0, 1, 2]], &NewtonOptions::default(), 250.0).unwrap();
        for (m, n) in c.mu.iter().zip([2.0, 4.0, 1.0]) {
            assert!((m - n).abs() < 1e-9);
        }
    }

    #[test]
    fn binary_and_gis_descend() {
        let x = build_table_design(&TableSchema::uniform(3, 3, 2).unwrap()).unwrap();
        let n: Vec<f64> = (0..27).map(|i| ((i * 5) % 7 + 1) as f64).collect();
        let inst = ProblemInstance::new(x, n, None).unwrap();
        for gis in [false, true] {
            let mut c = Coefficients::zeros(&inst);
            let mut last = objective_at(&inst, &c.beta);
            for _ in 0..100 {
                if gis {
                    gis_step(&inst, &mut c, 250.0);
                } else {
                    mm_binary_step(&inst, &mut c, 250.0);
                }
                let l = neg_log_likelihood(&inst, &c);
                assert!(l <= last + 1e-9 * (1.0 + last.abs()));
                last = l;
            }
        }
    }
}
