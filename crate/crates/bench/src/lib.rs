//! Benchmark fixtures shared by the criterion targets.

use splitflow::samplers::initial_point;
use splitflow::{GaussianData, LinearBetaSchedule};

use splitflow::DMatrix;

/// The 2-D benchmark problem.
pub fn problem() -> (GaussianData, LinearBetaSchedule) {
    (GaussianData::benchmark(), LinearBetaSchedule::default())
}

/// `n` standard-normal start points as columns.
pub fn start_batch(n: usize, seed: u64) -> DMatrix<f64> {
    let cols: Vec<_> = (0..n).map(|i| initial_point(2, seed, i as u64)).collect();
    DMatrix::from_columns(&cols)
}
