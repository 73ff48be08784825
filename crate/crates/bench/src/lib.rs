//! Fixtures shared by the simulator benchmarks.

use disagg_core::config::WorkloadConfig;
use disagg_core::experiments;
use disagg_core::{ExperimentConfig, Request, WorkloadClass};

fn resize(mut cfg: ExperimentConfig, n: usize) -> ExperimentConfig {
    match &mut cfg.workload {
        WorkloadConfig::Single(s) => s.n_requests = n,
        WorkloadConfig::Phases { phases } => phases.iter_mut().for_each(|p| p.n_requests = n),
    }
    cfg
}

/// Disaggregated 1P+1D config over `n` requests of `class`.
pub fn disaggregated(class: WorkloadClass, n: usize, seed: u64) -> ExperimentConfig {
    resize(experiments::disaggregated(class, seed), n)
}

/// Same workload on one coupled instance.
pub fn coupled(class: WorkloadClass, n: usize, seed: u64) -> ExperimentConfig {
    resize(experiments::coupled(class, seed), n)
}

pub fn requests(cfg: &ExperimentConfig) -> Vec<Request> {
    cfg.requests().expect("built-in configs are valid")
}
