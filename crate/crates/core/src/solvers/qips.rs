//! Accelerated quadratic-surrogate updates on the profiled objective, with
//! a fixed curvature bound `W` and an adaptive restart. The ridge variant
//! adds `lambda/2 ||slope||^2`.

use super::{clamp_coordinate, evaluate_coefficients, initial_beta, profiled_coefficients, Engine, Eval, FitFlags, SolverConfig, Variant};
use crate::error::Result;
use crate::model::{curvature_bound, eval_predictor, profiled_gradient, slope_predictor, CurvatureBound, ProblemInstance};

/// Consecutive increases that trigger a momentum restart.
const RESTART_AFTER: usize = 5;
const RESTART_REL: f64 = 1e-6;

/// Momentum schedule: the positive root of `t^2 = (1 - t) theta^2`.
pub fn next_theta(theta: f64) -> f64 {
    let t2 = theta * theta;
    ((t2 * t2 + 4.0 * t2).sqrt() - t2) / 2.0
}

fn mix(a: &[f64], b: &[f64], theta: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - theta) * x + theta * y).collect()
}

pub(crate) struct QipsEngine<'a> {
    inst: &'a ProblemInstance,
    w: CurvatureBound,
    kind: super::ObjectiveKind,
    lambda: f64,
    total: f64,
    clamp: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
    z_beta: Vec<f64>,
    z_eta: Vec<f64>,
    theta: f64,
    last_value: f64,
    increases: usize,
    resync_every: usize,
    iters: usize,
    flags: FitFlags,
}

impl<'a> QipsEngine<'a> {
    pub(crate) fn new(inst: &'a ProblemInstance, cfg: &SolverConfig) -> Result<Self> {
        let total = inst.require_intercept(cfg.variant.name())?;
        let lambda = if cfg.variant == Variant::RidgeQIps { cfg.lambda } else { 0.0 };
        let w = curvature_bound(inst, cfg.w_choice)?.with_ridge(lambda)?;
        let flags = FitFlags {
            bound_ridge_repaired: w.ridge_repaired,
            bound_fell_back: w.fell_back,
            ..FitFlags::default()
        };
        let beta = initial_beta(inst, cfg)?[1..].to_vec();
        let z = slope_predictor(inst.design(), &beta);
        let mut engine = Self {
            inst,
            w,
            kind: cfg.variant.objective_kind(cfg.lambda),
            lambda,
            total,
            clamp: cfg.clamp,
            eta: beta.clone(),
            z_eta: z.clone(),
            beta,
            z_beta: z,
            theta: 1.0,
            last_value: f64::NAN,
            increases: 0,
            resync_every: cfg.resync_every,
            iters: 0,
            flags,
        };
        engine.last_value = engine.value_at_beta();
        Ok(engine)
    }

    fn value_at_beta(&self) -> f64 {
        let ev = eval_predictor(self.inst.offset(), &self.z_beta);
        let linear: f64 = self.inst.suff_stats()[1..].iter().zip(&self.beta).map(|(s, b)| s * b).sum();
        let penalty: f64 = self.beta.iter().map(|b| b * b).sum();
        self.total * ev.log_mass - linear + 0.5 * self.lambda * penalty
    }

    fn resync(&mut self) {
        self.z_beta = slope_predictor(self.inst.design(), &self.beta);
        self.z_eta = slope_predictor(self.inst.design(), &self.eta);
    }
}

impl Engine for QipsEngine<'_> {
    fn step(&mut self) -> Result<()> {
        let theta = self.theta;
        let alpha = mix(&self.beta, &self.eta, theta);
        let z_alpha = mix(&self.z_beta, &self.z_eta, theta);
        let ev = eval_predictor(self.inst.offset(), &z_alpha);
        let mut g = profiled_gradient(self.inst, self.total, &ev.weights);
        for (gj, a) in g.iter_mut().zip(&alpha) {
            *gj += self.lambda * a;
        }
        let step = self.w.solve(&g);
        let z_step = slope_predictor(self.inst.design(), &step);
        for (e, s) in self.eta.iter_mut().zip(&step) {
            *e -= s / theta;
        }
        for (e, s) in self.z_eta.iter_mut().zip(&z_step) {
            *e -= s / theta;
        }
        self.beta = mix(&self.beta, &self.eta, theta);
        self.z_beta = mix(&self.z_beta, &self.z_eta, theta);
        self.theta = next_theta(theta);

        let before = self.flags.divergent_coordinates;
        for v in self.beta.iter_mut().chain(self.eta.iter_mut()) {
            *v = clamp_coordinate(*v, self.clamp, &mut self.flags.divergent_coordinates);
        }
        self.iters += 1;
        if self.flags.divergent_coordinates > before || self.iters % self.resync_every == 0 {
            self.resync();
        }

        let value = self.value_at_beta();
        if value > self.last_value + RESTART_REL * self.last_value.abs() {
            self.increases += 1;
        } else {
            self.increases = 0;
        }
        self.last_value = value;
        if self.increases >= RESTART_AFTER {
            self.theta = 1.0;
            self.eta = self.beta.clone();
            self.z_eta = self.z_beta.clone();
            self.increases = 0;
            self.flags.momentum_restarts += 1;
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Eval {
        let c = profiled_coefficients(self.inst, &self.beta, &self.z_beta);
        evaluate_coefficients(self.inst, &c, self.kind)
    }

    fn current_beta(&self) -> Vec<f64> {
        profiled_coefficients(self.inst, &self.beta, &self.z_beta).beta
    }

    fn finish(&mut self) -> (Vec<f64>, Vec<f64>) {
        let c = profiled_coefficients(self.inst, &self.beta, &self.z_beta);
        (c.beta, c.mu)
    }

    fn flags(&self) -> FitFlags {
        self.flags.clone()
    }
}
