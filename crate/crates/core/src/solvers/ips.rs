//! Coordinate-descent scaling: classic cyclic IPS, the randomized A-IPS,
//! the Pearson-`X^2` variant and the l1-thresholded IPS.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{clamp_coordinate, evaluate_coefficients, initial_beta, require_binary, Engine, Eval, FitFlags, ObjectiveKind, SolverConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{Coefficients, ProblemInstance};

/// Moves `beta_j` to `target` (clamped) and rescales `mu` on the column support.
/// Returns whether the clamp was hit.
fn move_coordinate(inst: &ProblemInstance, c: &mut Coefficients, j: usize, target: f64, clamp: f64) -> bool {
    let mut hits = 0;
    let new = clamp_coordinate(target, clamp, &mut hits);
    let delta = new - c.beta[j];
    inst.design().column(j).scale_exp(delta, &mut c.mu);
    c.beta[j] = new;
    hits > 0
}

/// Exact minimization of `l` over `beta_j` for a binary column:
/// `beta_j += log(<x_j, n> / <x_j, mu>)`. Returns whether the clamp was hit.
pub fn ips_coordinate_update(inst: &ProblemInstance, c: &mut Coefficients, j: usize, clamp: f64) -> bool {
    let s = inst.suff_stats()[j];
    let a = inst.design().column(j).dot(&c.mu);
    let target = if s > 0.0 && a > 0.0 {
        c.beta[j] + (s / a).ln()
    } else if s > 0.0 {
        f64::INFINITY
    } else {
        f64::NEG_INFINITY
    };
    move_coordinate(inst, c, j, target, clamp)
}

/// Outcome of one thresholded coordinate update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L1Update {
    Active,
    Zero,
    Clamped,
}

/// Exact minimization of `l + lambda |beta_j|` over `beta_j` for a binary
/// column `j >= 1`; column 0 is the unpenalized intercept and gets the plain
/// scaling update. A tie `|delta_j| = lambda > 0` takes the zero branch.
pub fn l1_threshold_update(inst: &ProblemInstance, c: &mut Coefficients, j: usize, lambda: f64, clamp: f64) -> L1Update {
    if j == 0 {
        return if ips_coordinate_update(inst, c, 0, clamp) {
            L1Update::Clamped
        } else {
            L1Update::Active
        };
    }
    let s = inst.suff_stats()[j];
    let a = inst.design().column(j).dot(&c.mu);
    let delta = s - a * (-c.beta[j]).exp();
    if delta.abs() < lambda || (lambda > 0.0 && delta.abs() == lambda) {
        move_coordinate(inst, c, j, 0.0, clamp);
        return L1Update::Zero;
    }
    let sign = if delta > 0.0 {
        1.0
    } else if delta < 0.0 {
        -1.0
    } else {
        0.0
    };
    let num = s - lambda * sign;
    let target = if num > 0.0 && a > 0.0 {
        c.beta[j] + (num / a).ln()
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        f64::NEG_INFINITY
    };
    if move_coordinate(inst, c, j, target, clamp) {
        L1Update::Clamped
    } else {
        L1Update::Active
    }
}

/// Sweep order of the coordinate solvers.
pub(crate) enum SweepOrder {
    Cyclic,
    Shuffled(ChaCha8Rng),
}

/// IPS, A-IPS and l1-IPS.
pub(crate) struct CoordinateEngine<'a> {
    inst: &'a ProblemInstance,
    c: Coefficients,
    kind: ObjectiveKind,
    order: Vec<usize>,
    sweep_order: SweepOrder,
    lambda: Option<f64>,
    clamp: f64,
    resync_every: usize,
    sweeps: usize,
    flags: FitFlags,
}

impl<'a> CoordinateEngine<'a> {
    pub(crate) fn new(inst: &'a ProblemInstance, cfg: &SolverConfig) -> Result<Self> {
        let name = match cfg.variant {
            Variant::AIps => "a-ips",
            Variant::L1Ips => "l1-ips",
            _ => "ips",
        };
        require_binary(inst, name, "mm-general")?;
        let lambda = if cfg.variant == Variant::L1Ips {
            inst.require_intercept("l1-ips")?;
            Some(cfg.lambda)
        } else {
            None
        };
        let sweep_order = if cfg.variant == Variant::AIps {
            SweepOrder::Shuffled(ChaCha8Rng::seed_from_u64(cfg.seed))
        } else {
            SweepOrder::Cyclic
        };
        Ok(Self::with_order(inst, cfg, initial_beta(inst, cfg)?, sweep_order, lambda))
    }

    pub(crate) fn with_order(inst: &'a ProblemInstance, cfg: &SolverConfig, beta: Vec<f64>, sweep_order: SweepOrder, lambda: Option<f64>) -> Self {
        Self {
            inst,
            c: Coefficients::new(inst, beta),
            kind: cfg.variant.objective_kind(cfg.lambda),
            order: (0..inst.n_cols()).collect(),
            sweep_order,
            lambda,
            clamp: cfg.clamp,
            resync_every: cfg.resync_every,
            sweeps: 0,
            flags: FitFlags::default(),
        }
    }
}

impl Engine for CoordinateEngine<'_> {
    fn step(&mut self) -> Result<()> {
        if let SweepOrder::Shuffled(rng) = &mut self.sweep_order {
            for (k, o) in self.order.iter_mut().enumerate() {
                *o = k;
            }
            self.order.shuffle(rng);
        }
        for &j in &self.order {
            let clamped = match self.lambda {
                Some(lambda) => l1_threshold_update(self.inst, &mut self.c, j, lambda, self.clamp) == L1Update::Clamped,
                None => ips_coordinate_update(self.inst, &mut self.c, j, self.clamp),
            };
            self.flags.divergent_coordinates += clamped as usize;
        }
        self.sweeps += 1;
        if self.sweeps % self.resync_every == 0 {
            self.c.resync(self.inst);
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Eval {
        evaluate_coefficients(self.inst, &self.c, self.kind)
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

/// Cyclic coordinate descent on Pearson's `X^2`:
/// `beta_j += 0.5 log(<x_j, n^2 / mu> / <x_j, mu>)`.
pub(crate) struct PearsonEngine<'a> {
    inst: &'a ProblemInstance,
    n_sq: Vec<f64>,
    c: Coefficients,
    clamp: f64,
    resync_every: usize,
    sweeps: usize,
    flags: FitFlags,
}

impl<'a> PearsonEngine<'a> {
    pub(crate) fn new(inst: &'a ProblemInstance, cfg: &SolverConfig) -> Result<Self> {
        require_binary(inst, "x2-ips", "mm-general")?;
        let n = inst.counts().ok_or_else(|| Error::Contract {
            solver: "x2-ips",
            requirement: "observed counts, not only sufficient statistics".into(),
        })?;
        Ok(Self {
            inst,
            n_sq: n.iter().map(|v| v * v).collect(),
            c: Coefficients::new(inst, initial_beta(inst, cfg)?),
            clamp: cfg.clamp,
            resync_every: cfg.resync_every,
            sweeps: 0,
            flags: FitFlags::default(),
        })
    }
}

impl Engine for PearsonEngine<'_> {
    fn step(&mut self) -> Result<()> {
        let x = self.inst.design();
        for j in 0..x.n_cols() {
            let col = x.column(j);
            let mut num = 0.0;
            let mut den = 0.0;
            col.for_each_nonzero(|i, _| {
                num += self.n_sq[i] / self.c.mu[i];
                den += self.c.mu[i];
            });
            let target = if num > 0.0 && den > 0.0 {
                self.c.beta[j] + 0.5 * (num / den).ln()
            } else if num > 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            };
            if move_coordinate(self.inst, &mut self.c, j, target, self.clamp) {
                self.flags.divergent_coordinates += 1;
            }
        }
        self.sweeps += 1;
        if self.sweeps % self.resync_every == 0 {
            self.c.resync(self.inst);
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Eval {
        evaluate_coefficients(self.inst, &self.c, ObjectiveKind::Pearson)
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
    use crate::model::{g_squared, pearson_x2};
    use crate::solvers::{drive, fit, Termination};
    use approx::assert_relative_eq;

    fn two_by_two() -> ProblemInstance {
        let x = build_table_design(&TableSchema::uniform(2, 2, 1).unwrap()).unwrap();
        ProblemInstance::new(x, vec![10.0, 20.0, 50.0, 20.0], None).unwrap()
    }

    fn cfg(variant: Variant, eps: f64) -> SolverConfig {
        SolverConfig {
            eps_tol: eps,
            ..SolverConfig::new(variant)
        }
    }

    #[test]
    fn identity_design_fits_in_one_sweep() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
        let x = DesignMatrix::from_rows(&rows, DesignMatrix::default_labels(4)).unwrap();
        let n = vec![3.0, 1.0, 7.0, 2.0];
        let inst = ProblemInstance::new(x, n.clone(), None).unwrap();
        let c = SolverConfig {
            max_iters: 1,
            ..cfg(Variant::Ips, 1e-12)
        };
        let r = fit(&inst, &c).unwrap();
        for (m, v) in r.mu.iter().zip(&n) {
            assert_relative_eq!(m, v, max_relative = 1e-14);
        }
    }

    #[test]
    fn independence_table() {
        let inst = two_by_two();
        let r = fit(&inst, &cfg(Variant::Ips, 1e-12)).unwrap();
        assert_eq!(r.termination, Termination::TolReached);
        // closed form r_i c_j / n_++
        let rows = [30.0, 70.0];
        let cols = [60.0, 40.0];
        let expect: Vec<f64> = rows.iter().flat_map(|r| cols.iter().map(move |c| r * c / 100.0)).collect();
        assert_eq!(expect, vec![18.0, 12.0, 42.0, 28.0]);
        for (m, e) in r.mu.iter().zip(&expect) {
            assert!((m - e).abs() < 1e-9);
        }
    }

    #[test]
    fn g_squared_decreases_after_intercept_updates() {
        let x = build_table_design(&TableSchema::uniform(3, 3, 2).unwrap()).unwrap();
        let n: Vec<f64> = (0..27).map(|i| ((i * 7) % 11 + 1) as f64).collect();
        let inst = ProblemInstance::new(x, n.clone(), None).unwrap();
        let mut c = Coefficients::zeros(&inst);
        let mut last = f64::INFINITY;
        for _ in 0..30 {
            ips_coordinate_update(&inst, &mut c, 0, 250.0);
            let g2 = g_squared(&n, &c.mu);
            assert!(g2 <= last + 1e-9 * (1.0 + last.abs().min(1e300)));
            last = g2;
            for j in 1..inst.n_cols() {
                ips_coordinate_update(&inst, &mut c, j, 250.0);
            }
        }
    }

    #[test]
    fn identity_stream_matches_cyclic() {
        let inst = two_by_two();
        let c = SolverConfig {
            clock: super::super::ClockMode::Iterations,
            ..cfg(Variant::AIps, 1e-10)
        };
        let mut a = CoordinateEngine::with_order(&inst, &c, vec![0.0; 3], SweepOrder::Cyclic, None);
        let ra = drive(&inst, &c, &mut a).unwrap();
        let rb = fit(&inst, &SolverConfig { variant: Variant::Ips, ..c.clone() }).unwrap();
        assert_eq!(ra.trace, rb.trace);
        assert_eq!(ra.beta, rb.beta);
    }

    #[test]
    fn shuffled_sweeps_are_seeded() {
        let x = build_table_design(&TableSchema::uniform(3, 3, 2).unwrap()).unwrap();
        let n: Vec<f64> = (0..27).map(|i| ((i * 5) % 9 + 1) as f64).collect();
        let inst = ProblemInstance::new(x, n, None).unwrap();
        let c = SolverConfig {
            seed: 7,
            clock: super::super::ClockMode::Iterations,
            ..cfg(Variant::AIps, 1e-8)
        };
        let a = fit(&inst, &c).unwrap();
        let b = fit(&inst, &c).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.beta, b.beta);
        let other = fit(&inst, &SolverConfig { seed: 8, ..c }).unwrap();
        assert_ne!(a.trace, other.trace);
    }

    #[test]
    fn non_binary_design_is_rejected() {
        let x = DesignMatrix::from_rows(&[vec![1.0, 0.5], vec![1.0, 2.0]], DesignMatrix::default_labels(2)).unwrap();
        let inst = ProblemInstance::new(x, vec![1.0, 2.0], None).unwrap();
        for v in [Variant::Ips, Variant::AIps, Variant::X2Ips, Variant::L1Ips] {
            assert!(matches!(fit(&inst, &SolverConfig::new(v)), Err(Error::Contract { .. })));
        }
    }

    #[test]
    fn lemma_zero_case() {
        // column 1 duplicates the intercept; with beta_0 fixed at 0 the
        // coordinate problem is the univariate lemma
        let x = DesignMatrix::sparse_binary(2, vec![vec![0, 1], vec![0, 1]], DesignMatrix::default_labels(2)).unwrap();
        let inst = ProblemInstance::new(x, vec![1.0, 1.0], None).unwrap();
        let mut c = Coefficients::zeros(&inst);
        assert_eq!(l1_threshold_update(&inst, &mut c, 1, 1.0, 250.0), L1Update::Zero);
        assert_eq!(c.beta[1], 0.0);
    }

    #[test]
    fn lemma_active_case() {
        let x = DesignMatrix::sparse_binary(2, vec![vec![0, 1], vec![0, 1]], DesignMatrix::default_labels(2)).unwrap();
        let inst = ProblemInstance::new(x, vec![3.0, 3.0], None).unwrap();
        let mut c = Coefficients::zeros(&inst);
        assert_eq!(l1_threshold_update(&inst, &mut c, 1, 2.0, 250.0), L1Update::Active);
        assert_relative_eq!(c.beta[1], 2f64.ln(), max_relative = 1e-15);
        // KKT: <x, mu> - <x, n> + lambda sgn(beta) = 0
        let kkt = c.mu.iter().sum::<f64>() - 6.0 + 2.0;
        assert!(kkt.abs() <= 1e-10);
    }

    #[test]
    fn lemma_tie_takes_zero_branch() {
        let x = DesignMatrix::sparse_binary(2, vec![vec![0, 1], vec![0, 1]], DesignMatrix::default_labels(2)).unwrap();
        // <x, n - q> = 4 - 2 = 2 = lambda
        let inst = ProblemInstance::new(x, vec![2.0, 2.0], None).unwrap();
        let mut c = Coefficients::zeros(&inst);
        assert_eq!(l1_threshold_update(&inst, &mut c, 1, 2.0, 250.0), L1Update::Zero);
    }

    #[test]
    fn zero_penalty_is_plain_ips() {
        let x = build_table_design(&TableSchema::uniform(3, 3, 2).unwrap()).unwrap();
        let n: Vec<f64> = (0..27).map(|i| ((i * 3) % 13 + 1) as f64).collect();
        let inst = ProblemInstance::new(x, n, None).unwrap();
        let c = SolverConfig {
            clock: super::super::ClockMode::Iterations,
            resync_every: 3,
            ..cfg(Variant::Ips, 1e-9)
        };
        let a = fit(&inst, &c).unwrap();
        let b = fit(&inst, &SolverConfig { variant: Variant::L1Ips, lambda: 0.0, ..c }).unwrap();
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn pearson_variant() {
        let inst = two_by_two();
        // fixed point when n equals the mean
        let x = build_table_design(&TableSchema::uniform(2, 2, 1).unwrap()).unwrap();
        let exact = ProblemInstance::new(x, vec![18.0, 12.0, 42.0, 28.0], None).unwrap();
        let r = fit(&exact, &cfg(Variant::X2Ips, 1e-10)).unwrap();
        assert!(pearson_x2(exact.counts().unwrap(), &r.mu) < 1e-12);

        let r = fit(&inst, &SolverConfig { clock: super::super::ClockMode::Iterations, ..cfg(Variant::X2Ips, 1e-12) }).unwrap();
        assert_eq!(r.termination, Termination::TolReached);
        let n = inst.counts().unwrap();
        for j in 0..3 {
            let col = inst.design().column(j);
            let mut res = 0.0;
            col.for_each_nonzero(|i, _| res += r.mu[i] - n[i] * n[i] / r.mu[i]);
            assert!(res.abs() <= 1e-8, "column {j}: {res}");
        }
        for w in r.trace.records.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-12);
        }
        let mle = fit(&inst, &cfg(Variant::Ips, 1e-12)).unwrap();
        assert!(pearson_x2(n, &r.mu) <= pearson_x2(n, &mle.mu));
    }

    #[test]
    fn zero_margin_clamps() {
        let x = build_table_design(&TableSchema::uniform(2, 2, 1).unwrap()).unwrap();
        // second row level is never observed
        let inst = ProblemInstance::new(x, vec![4.0, 6.0, 0.0, 0.0], None).unwrap();
        let r = fit(&inst, &SolverConfig { max_iters: 20, ..cfg(Variant::Ips, 1e-10) }).unwrap();
        assert!(r.flags.divergent_coordinates > 0);
        assert_eq!(r.beta[1], -250.0);
        assert!(r.mu[2] < 1e-100 && r.mu[3] < 1e-100);
    }
}
