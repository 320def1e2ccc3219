//! Block coordinate descent on the profiled objective. Each outer iteration
//! draws a random partition of the slope coordinates and minimizes `L`
//! exactly over one block at a time by damped Newton.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::newton::{minimize, NewtonOptions, SmoothProblem};
use super::{clamp_coordinate, evaluate_coefficients, initial_beta, profiled_coefficients, Engine, Eval, FitFlags, ObjectiveKind, SolverConfig};
use crate::design::ColumnBlock;
use crate::error::{Error, Result};
use crate::model::{eval_log_predictor, log_mass, multinomial_curvature_with, slope_predictor, ProblemInstance};

/// Block sizes covering `n` coordinates: the explicit sizes if configured
/// (they must sum to `n`), otherwise blocks of `block_size` with the
/// remainder last.
pub fn block_partition(n: usize, cfg: &SolverConfig) -> Result<Vec<usize>> {
    if let Some(sizes) = &cfg.block_sizes {
        let sum: usize = sizes.iter().sum();
        if sum != n || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "block sizes must be positive and sum to {n} (got sum {sum})"
            )));
        }
        return Ok(sizes.clone());
    }
    if cfg.block_size == 0 {
        return Err(Error::InvalidConfig("block_size must be positive".into()));
    }
    let mut out = vec![cfg.block_size; n / cfg.block_size];
    if n % cfg.block_size != 0 {
        out.push(n % cfg.block_size);
    }
    Ok(out)
}

/// `f(d) = -s_k^T d + T log <q, exp(eta + X_k d)>` for one block.
struct BlockObjective<'a> {
    block: &'a ColumnBlock,
    eta: &'a [f64],
    log_q: &'a [f64],
    s: Vec<f64>,
    total: f64,
    scratch: Vec<f64>,
}

impl BlockObjective<'_> {
    /// `eta + X_k d` into the scratch buffer.
    fn predictor(&mut self, d: &[f64]) {
        self.block.mul_into(d, &mut self.scratch);
        for (z, e) in self.scratch.iter_mut().zip(self.eta) {
            *z += e;
        }
    }

    fn linear(&self, d: &[f64]) -> f64 {
        self.s.iter().zip(d).map(|(s, d)| s * d).sum()
    }
}

impl SmoothProblem for BlockObjective<'_> {
    fn value(&mut self, d: &[f64]) -> f64 {
        self.predictor(d);
        self.total * log_mass(self.log_q, &self.scratch) - self.linear(d)
    }

    fn derivatives(&mut self, d: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
        self.predictor(d);
        let ev = eval_log_predictor(self.log_q, &self.scratch);
        let value = self.total * ev.log_mass - self.linear(d);
        let v = self.block.tr_mul(&ev.weights);
        let g = v.iter().zip(&self.s).map(|(a, s)| self.total * a - s).collect();
        (value, g, multinomial_curvature_with(self.block, self.total, &ev.weights, &v))
    }
}

pub(crate) struct BipsEngine<'a> {
    inst: &'a ProblemInstance,
    slope: Vec<f64>,
    eta: Vec<f64>,
    log_q: Vec<f64>,
    sizes: Vec<usize>,
    rng: ChaCha8Rng,
    total: f64,
    opts: NewtonOptions,
    clamp: f64,
    resync_every: usize,
    iters: usize,
    flags: FitFlags,
}

impl<'a> BipsEngine<'a> {
    pub(crate) fn new(inst: &'a ProblemInstance, cfg: &SolverConfig) -> Result<Self> {
        let total = inst.require_intercept("b-ips")?;
        let d = inst.n_cols() - 1;
        let sizes = block_partition(d, cfg)?;
        let slope = initial_beta(inst, cfg)?[1..].to_vec();
        Ok(Self {
            inst,
            eta: slope_predictor(inst.design(), &slope),
            log_q: inst.offset().iter().map(|q| q.ln()).collect(),
            slope,
            sizes,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            total,
            opts: NewtonOptions {
                tol: cfg.inner_tol,
                abs_tol: 1e-12 * total,
                max_iters: cfg.inner_max_iters,
                max_backtracks: 30,
                ..NewtonOptions::default()
            },
            clamp: cfg.clamp,
            resync_every: cfg.resync_every,
            iters: 0,
            flags: FitFlags::default(),
        })
    }
}

impl Engine for BipsEngine<'_> {
    fn step(&mut self) -> Result<()> {
        let x = self.inst.design();
        let mut order: Vec<usize> = (0..self.slope.len()).collect();
        order.shuffle(&mut self.rng);
        let mut start = 0;
        let mut shift = vec![0.0; x.n_rows()];
        for &size in &self.sizes {
            let mut members = order[start..start + size].to_vec();
            start += size;
            members.sort_unstable();
            let cols: Vec<usize> = members.iter().map(|a| a + 1).collect();
            let block = x.block(&cols);
            let mut problem = BlockObjective {
                block: &block,
                eta: &self.eta,
                log_q: &self.log_q,
                s: cols.iter().map(|&j| self.inst.suff_stats()[j]).collect(),
                total: self.total,
                scratch: vec![0.0; x.n_rows()],
            };
            let out = minimize(&mut problem, vec![0.0; size], &self.opts)?;
            if out.zero_step {
                self.flags.zero_steps += 1;
            } else if !out.converged {
                self.flags.subsolver_failures += 1;
            }
            let mut d = out.x;
            for (&a, da) in members.iter().zip(d.iter_mut()) {
                let b = self.slope[a];
                let next = clamp_coordinate(b + *da, self.clamp, &mut self.flags.divergent_coordinates);
                *da = next - b;
                self.slope[a] = next;
            }
            block.mul_into(&d, &mut shift);
            for (e, s) in self.eta.iter_mut().zip(&shift) {
                *e += s;
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
    use crate::design::{build_table_design, TableSchema};
    use crate::model::reparam_hessian;
    use crate::solvers::{fit, ClockMode, Termination, Variant};

    fn table_instance() -> ProblemInstance {
        let x = build_table_design(&TableSchema::uniform(3, 4, 2).unwrap()).unwrap();
        let n: Vec<f64> = (0..64).map(|i| ((i * 7) % 13 + 1) as f64).collect();
        ProblemInstance::new(x, n, None).unwrap()
    }

    #[test]
    fn partition_sizes() {
        let cfg = SolverConfig {
            block_size: 4,
            ..SolverConfig::default()
        };
        assert_eq!(block_partition(10, &cfg).unwrap(), vec![4, 4, 2]);
        assert_eq!(block_partition(8, &cfg).unwrap(), vec![4, 4]);
        let explicit = SolverConfig {
            block_sizes: Some(vec![3, 7]),
            ..SolverConfig::default()
        };
        assert_eq!(block_partition(10, &explicit).unwrap(), vec![3, 7]);
        assert!(block_partition(11, &explicit).is_err());
    }

    #[test]
    fn single_block_is_newton_on_the_profile() {
        let inst = table_instance();
        let r = fit(
            &inst,
            &SolverConfig {
                eps_tol: 1e-10,
                block_size: 1000,
                ..SolverConfig::new(Variant::BIps)
            },
        )
        .unwrap();
        assert_eq!(r.termination, Termination::TolReached);
        assert!(r.iterations <= 2, "{} outer iterations", r.iterations);
    }

    #[test]
    fn profile_hessian_is_psd() {
        let inst = table_instance();
        let slope: Vec<f64> = (0..inst.n_cols() - 1).map(|a| ((a * 37) % 11) as f64 * 0.1 - 0.5).collect();
        let h = reparam_hessian(&inst, &slope).unwrap();
        let eig = h.symmetric_eigenvalues();
        let scale = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(eig.iter().all(|&v| v >= -1e-10 * scale));
    }

    #[test]
    fn objective_never_increases() {
        let inst = table_instance();
        let r = fit(
            &inst,
            &SolverConfig {
                eps_tol: 1e-9,
                block_size: 5,
                clock: ClockMode::Iterations,
                ..SolverConfig::new(Variant::BIps)
            },
        )
        .unwrap();
        assert_eq!(r.termination, Termination::TolReached);
        let objs: Vec<f64> = r.trace.records.iter().map(|t| t.objective).collect();
        assert!(objs.windows(2).all(|w| w[1] <= w[0] + 1e-10 * w[0].abs()));
    }
}
