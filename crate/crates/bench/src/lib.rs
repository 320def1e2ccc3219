//! Benchmark fixtures shared by the criterion benches.

use ipscale::harness::{generate, ExperimentSpec, Scenario};
use ipscale::ProblemInstance;

/// Replication 0 of a scenario at the given scale.
pub fn instance(scenario: Scenario, scale: f64) -> ProblemInstance {
    let spec = ExperimentSpec {
        scale_factor: scale,
        ..ExperimentSpec::new(scenario)
    };
    generate(&spec, 0).expect("scenario generates")
}
