//! Evaluation metrics and the Monte Carlo replication harness.

mod ari;
mod bench;

pub use ari::adjusted_rand_index;
pub use bench::{
    population_value, run_benchmark, run_replication, BenchConfig, BenchResult, Failure, Method, MethodSummary, Replication,
};
