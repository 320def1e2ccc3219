//! Synthetic instances: contingency tables with sparse interaction effects
//! and Poisson regressions on AR(1)-correlated Gaussian designs.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{build_observed_table_design, build_table_design, DesignMatrix, TableSchema};
use crate::error::{Error, Result};
use crate::model::ProblemInstance;
use crate::solvers::{ClockMode, Variant};

/// Largest mean accepted before Poisson sampling.
const MAX_MEAN: f64 = 1e15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// `10^4` cells, four factors, two-way model.
    TableModerate,
    /// `10^5` cells, five factors, three-way model.
    TableLarge,
    /// Non-negative design, `N = 1000`, `p = 100`.
    NonnegSmall,
    /// Non-negative design, `N = 20000`, `p = 2000`.
    NonnegLarge,
    /// Signed design, `N = 50000`, `p = 1000`.
    General,
    /// Partially observed table with a sparse truth, for regularization paths.
    L1Path,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::TableModerate,
        Scenario::TableLarge,
        Scenario::NonnegSmall,
        Scenario::NonnegLarge,
        Scenario::General,
        Scenario::L1Path,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::TableModerate => "table-moderate",
            Scenario::TableLarge => "table-large",
            Scenario::NonnegSmall => "nonneg-small",
            Scenario::NonnegLarge => "nonneg-large",
            Scenario::General => "general",
            Scenario::L1Path => "l1-path",
        }
    }

    pub fn is_table(self) -> bool {
        matches!(self, Scenario::TableModerate | Scenario::TableLarge | Scenario::L1Path)
    }

    /// Full-scale `(N, p)` of the Gaussian scenarios, `p` counting the intercept.
    fn gaussian_dims(self) -> Option<(usize, usize)> {
        match self {
            Scenario::NonnegSmall => Some((1000, 100)),
            Scenario::NonnegLarge => Some((20_000, 2000)),
            Scenario::General => Some((50_000, 1000)),
            _ => None,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Scenario::ALL.into_iter().find(|v| v.name() == key).ok_or_else(|| {
            let names: Vec<&str> = Scenario::ALL.iter().map(|v| v.name()).collect();
            Error::InvalidConfig(format!("unknown scenario '{s}'; expected one of {}", names.join(", ")))
        })
    }
}

/// One experiment: a scenario, its size, the solvers to compare and the
/// replication protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub replications: usize,
    /// In `(0, 1]`; shrinks table levels or Gaussian `N` and `p`.
    pub scale_factor: f64,
    pub roster: Vec<Variant>,
    pub seed: u64,
    /// Extra randomly placed non-zero table coefficients (20 for the denser setting).
    pub extra_active: usize,
    /// Overrides of the Gaussian dimensions (`p` counts the intercept).
    pub n_rows: Option<usize>,
    pub n_cols: Option<usize>,
    pub eps_tol: f64,
    pub t_max_secs: f64,
    pub block_size: usize,
    pub clock: ClockMode,
    /// Points of the common time grid used for averaging.
    pub grid_points: usize,
    /// Replications run concurrently.
    pub jobs: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::TableModerate,
            replications: 20,
            scale_factor: 1.0,
            roster: vec![Variant::Ips],
            seed: 0,
            extra_active: 0,
            n_rows: None,
            n_cols: None,
            eps_tol: 1e-4,
            t_max_secs: 600.0,
            block_size: 200,
            clock: ClockMode::Wall,
            grid_points: 101,
            jobs: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be at least 1".into()));
        }
        if self.roster.is_empty() {
            return Err(Error::InvalidConfig("the solver roster is empty".into()));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!("scale_factor must be in (0, 1], got {}", self.scale_factor)));
        }
        if self.grid_points < 2 || self.jobs == 0 {
            return Err(Error::InvalidConfig("grid_points must be >= 2 and jobs >= 1".into()));
        }
        if self.n_cols.is_some_and(|p| p < 2) || self.n_rows.is_some_and(|n| n < 2) {
            return Err(Error::InvalidConfig("n_rows and n_cols must be at least 2".into()));
        }
        Ok(())
    }

    /// Generator for replication `rep`: the spec seed selects the key and
    /// the replication selects the stream.
    pub fn rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng
    }
}

/// Table schema of a table scenario at the given scale. Levels shrink so
/// that the cell count scales by roughly `scale`.
pub fn table_schema(scenario: Scenario, scale: f64) -> Result<TableSchema> {
    let (r, levels, order) = match scenario {
        Scenario::TableModerate => (4, 10, 2),
        Scenario::TableLarge => (5, 10, 3),
        Scenario::L1Path => (4, 6, 2),
        other => return Err(Error::InvalidConfig(format!("{other} is not a table scenario"))),
    };
    let m = ((levels as f64) * scale.powf(1.0 / r as f64)).round().max(2.0) as usize;
    TableSchema::uniform(r, m, order)
}

fn mixture(rng: &mut ChaCha8Rng, a: f64, b: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    if rng.random_bool(0.5) {
        a + z
    } else {
        b + z
    }
}

fn sample_counts(mu: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    mu.iter()
        .enumerate()
        .map(|(i, &m)| {
            if !(m.is_finite() && m <= MAX_MEAN) {
                return Err(Error::InvalidConfig(format!(
                    "true mean of row {i} is {m:e}, beyond the sampling limit {MAX_MEAN:e}; reduce the coefficients or design scale"
                )));
            }
            if m == 0.0 {
                return Ok(0.0);
            }
            let d = Poisson::new(m).map_err(|e| Error::Numerical(format!("Poisson({m}): {e}")))?;
            Ok(d.sample(rng))
        })
        .collect()
}

fn finish(design: DesignMatrix, beta: Vec<f64>, rng: &mut ChaCha8Rng) -> Result<ProblemInstance> {
    let mu: Vec<f64> = design.mul_vec(&beta).iter().map(|e| e.exp()).collect();
    let counts = sample_counts(&mu, rng)?;
    ProblemInstance::new(design, counts, None)?.with_beta_true(beta)
}

/// Table instance for replication `rep`: `beta*` is zero except the last
/// coordinates (plus `extra_active` random ones), `n_i ~ Poisson(mu*_i)`.
pub fn gen_table_instance(spec: &ExperimentSpec, rep: usize) -> Result<ProblemInstance> {
    let mut rng = spec.rng(rep);
    let schema = table_schema(spec.scenario, spec.scale_factor)?;
    if spec.scenario == Scenario::L1Path {
        return gen_partial_table(&schema, &mut rng);
    }
    let design = build_table_design(&schema)?;
    let p = design.n_cols();
    let mut beta = vec![0.0; p];
    match spec.scenario {
        Scenario::TableModerate => {
            beta[0] = 2.0;
            let last = 10.min(p - 1);
            for b in &mut beta[p - last..] {
                *b = mixture(&mut rng, 1.0, 3.0);
            }
            let pool = p - 1 - last;
            for k in sample(&mut rng, pool, spec.extra_active.min(pool)).into_vec() {
                beta[1 + k] = mixture(&mut rng, 1.0, 3.0);
            }
        }
        _ => {
            beta[0] = 5.0;
            let last = ((2000.0 * (p - 1) as f64 / 8145.0).round() as usize).clamp(1, p - 1);
            let normal = Normal::new(1.0, 1.0).expect("valid normal");
            for b in &mut beta[p - last..] {
                *b = normal.sample(&mut rng);
            }
        }
    }
    finish(design, beta, &mut rng)
}

/// A table where only about 70% of the cells are observed, with ten
/// non-zero effects of either sign.
fn gen_partial_table(schema: &TableSchema, rng: &mut ChaCha8Rng) -> Result<ProblemInstance> {
    let cells: Vec<Vec<usize>> = schema.all_cells()?.into_iter().filter(|_| rng.random_bool(0.7)).collect();
    let (design, _) = build_observed_table_design(schema, &cells)?;
    let p = design.n_cols();
    let mut beta = vec![0.0; p];
    beta[0] = 2.0;
    for k in sample(rng, p - 1, 10.min(p - 1)).into_vec() {
        beta[1 + k] = 0.5 * mixture(rng, 1.5, -1.5);
    }
    finish(design, beta, rng)
}

/// Rows of `N(0, [rho^|j-k|])` built by the AR(1) recursion, column-major.
pub fn ar1_rows(n: usize, d: usize, rho: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = vec![0.0; n * d];
    let tail = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        let mut prev = 0.0;
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            let v = if j == 0 { z } else { rho * prev + tail * z };
            x[j * n + i] = v;
            prev = v;
        }
    }
    x
}

/// Gaussian-design instance for replication `rep`: AR(1) rows with
/// `rho = 0.8`, then the scenario's shift, scale and row-jitter steps, an
/// intercept column, and `beta*_j ~ 0.5 N(10,1) + 0.5 N(-10,1)`.
pub fn gen_gaussian_instance(spec: &ExperimentSpec, rep: usize) -> Result<ProblemInstance> {
    let (full_n, full_p) = spec
        .scenario
        .gaussian_dims()
        .ok_or_else(|| Error::InvalidConfig(format!("{} is not a Gaussian scenario", spec.scenario)))?;
    let n = spec.n_rows.unwrap_or_else(|| ((full_n as f64 * spec.scale_factor).round() as usize).max(10));
    let p = spec.n_cols.unwrap_or_else(|| ((full_p as f64 * spec.scale_factor).round() as usize).max(3));
    let d = p - 1;
    let mut rng = spec.rng(rep);
    let mut x = ar1_rows(n, d, 0.8, &mut rng);
    let (divisor, shift, jitter, b0) = match spec.scenario {
        Scenario::NonnegSmall => (50.0, true, true, 1.0),
        Scenario::NonnegLarge => (20.0, true, true, 10.0),
        _ => (100.0, false, false, 10.0),
    };
    if shift {
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        x.iter_mut().for_each(|v| *v -= min);
    }
    let max_abs = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    x.iter_mut().for_each(|v| *v /= divisor * max_abs);
    if jitter {
        for i in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let factor = 1.0 + z.abs();
            for j in 0..d {
                x[j * n + i] *= factor;
            }
        }
    }
    let mut values = vec![1.0; n];
    values.extend_from_slice(&x);
    let design = DesignMatrix::from_columns(n, p, values, DesignMatrix::default_labels(p))?;
    let mut beta = vec![b0];
    beta.extend((0..d).map(|_| mixture(&mut rng, 10.0, -10.0)));
    finish(design, beta, &mut rng)
}

/// Instance of any scenario for replication `rep`.
pub fn generate(spec: &ExperimentSpec, rep: usize) -> Result<ProblemInstance> {
    if spec.scenario.is_table() {
        gen_table_instance(spec, rep)
    } else {
        gen_gaussian_instance(spec, rep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        let err = "bogus".parse::<Scenario>().unwrap_err().to_string();
        assert!(err.contains("table-moderate"));
    }

    #[test]
    fn table_scaling() {
        assert_eq!(table_schema(Scenario::TableModerate, 1.0).unwrap().factors[0].levels, 10);
        assert_eq!(table_schema(Scenario::TableModerate, 0.1).unwrap().factors[0].levels, 6);
        assert_eq!(table_schema(Scenario::TableLarge, 0.01).unwrap().factors[0].levels, 4);
    }

    #[test]
    fn moderate_truth_layout() {
        let spec = ExperimentSpec {
            scale_factor: 0.1,
            ..ExperimentSpec::new(Scenario::TableModerate)
        };
        let inst = generate(&spec, 0).unwrap();
        let b = inst.beta_true().unwrap();
        assert_eq!(b[0], 2.0);
        assert_eq!(b.iter().skip(1).filter(|v| **v != 0.0).count(), 10);
        assert!(b[b.len() - 10..].iter().all(|v| *v != 0.0));
        let dense = ExperimentSpec { extra_active: 20, ..spec };
        let b = generate(&dense, 0).unwrap().beta_true().unwrap().to_vec();
        assert_eq!(b.iter().skip(1).filter(|v| **v != 0.0).count(), 30);
    }

    #[test]
    fn replications_differ_and_repeat() {
        let spec = ExperimentSpec {
            scale_factor: 0.05,
            ..ExperimentSpec::new(Scenario::TableModerate)
        };
        let a = generate(&spec, 0).unwrap();
        let b = generate(&spec, 0).unwrap();
        let c = generate(&spec, 1).unwrap();
        assert_eq!(a.counts(), b.counts());
        assert_ne!(a.counts(), c.counts());
    }

    #[test]
    fn nonneg_pipeline_bounds() {
        let spec = ExperimentSpec {
            n_rows: Some(300),
            n_cols: Some(11),
            ..ExperimentSpec::new(Scenario::NonnegSmall)
        };
        let inst = generate(&spec, 0).unwrap();
        assert!(inst.design().kind().is_non_negative());
        assert_eq!(inst.beta_true().unwrap()[0], 1.0);
    }
}
