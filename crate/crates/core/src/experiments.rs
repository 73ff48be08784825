//! Ready-made experiment configurations for the comparisons the simulator
//! is meant to reproduce.

use crate::cluster::SystemKind;
use crate::config::{ExperimentConfig, TopologyConfig, WorkloadConfig};
use crate::control::FlipPolicy;
use crate::decode::{DecodePolicy, ReserveBound};
use crate::prefill::{DispatchPolicy, PrefillOrder, PrefillPolicy};
use crate::workload::{ArrivalProcess, LengthDist, WorkloadClass, WorkloadSpec};

/// Requests per end-to-end and prefill experiment.
pub const E2E_REQUESTS: usize = 128;

fn with_workload(name: &str, seed: u64, spec: WorkloadSpec) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        seed,
        workload: WorkloadConfig::Single(spec),
        ..Default::default()
    }
}

/// Disaggregated 1 prefill + 1 decode with the default policy stack.
pub fn disaggregated(class: WorkloadClass, seed: u64) -> ExperimentConfig {
    let mut cfg = with_workload(
        "disaggregated",
        seed,
        WorkloadSpec::new(class, E2E_REQUESTS),
    );
    cfg.cluster = TopologyConfig {
        system: SystemKind::Disaggregated,
        prefill: 1,
        decode: 1,
        coupled: 0,
    };
    cfg
}

/// One coupled instance on the same workload.
pub fn coupled(class: WorkloadClass, seed: u64) -> ExperimentConfig {
    let mut cfg = with_workload("coupled", seed, WorkloadSpec::new(class, E2E_REQUESTS));
    cfg.cluster = TopologyConfig {
        system: SystemKind::Coupled,
        prefill: 0,
        decode: 0,
        coupled: 1,
    };
    cfg
}

/// Prefill scheduling study: a mixed workload on 1 prefill + 1 decode with
/// the given order and scheduling batch.
pub fn prefill_study(order: PrefillOrder, sched_batch: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = disaggregated(WorkloadClass::Mixed, seed);
    cfg.name = format!("prefill-{order:?}-{sched_batch}").to_lowercase();
    cfg.policies.prefill = PrefillPolicy::new(order, sched_batch);
    cfg
}

/// Decode requests per instance in the inter-decode study.
pub const INTER_DECODE_PER_INSTANCE: usize = 32;

/// Inter-decode load balancing: `n_decode` decode instances, 32 requests each,
/// light prompts with a mix of light and heavy decodes.
pub fn inter_decode(n_decode: u32, policy: DispatchPolicy, seed: u64) -> ExperimentConfig {
    let mut spec = WorkloadSpec::new(
        WorkloadClass::Mixed,
        INTER_DECODE_PER_INSTANCE * n_decode as usize,
    );
    spec.mixture = [0.5, 0.5, 0.0, 0.0];
    let mut cfg = with_workload("inter-decode", seed, spec);
    cfg.cluster = TopologyConfig {
        system: SystemKind::Disaggregated,
        prefill: 1,
        decode: n_decode,
        coupled: 0,
    };
    cfg.policies.dispatcher = policy;
    cfg.policies.flip = FlipPolicy::disabled();
    cfg
}

/// Tokens of KV memory on the decode instance in the intra-decode study.
pub const INTRA_DECODE_CAPACITY: u64 = 40_000;

/// Intra-decode admission: closed-loop light-prompt heavy-decode requests whose
/// final KV footprint is about 1.5x the decode instance's memory.
pub fn intra_decode(
    policy: DecodePolicy,
    bound: ReserveBound,
    accuracy: f64,
    seed: u64,
) -> ExperimentConfig {
    let mut spec = WorkloadSpec::new(WorkloadClass::Lphd, 128);
    spec.lengths.heavy_decode = LengthDist::new(450.0, 0.1);
    let mut cfg = with_workload("intra-decode", seed, spec);
    cfg.cost.mem_capacity_tokens = INTRA_DECODE_CAPACITY;
    cfg.policies.decode.policy = policy;
    cfg.policies.decode.bound = bound;
    cfg.policies.predictor.accuracy = Some(accuracy);
    cfg.policies.flip = FlipPolicy::disabled();
    cfg
}

/// A demand shift for instance flipping: two minutes of decode-heavy traffic
/// followed by a burst of long prompts, on 2 prefill + 2 decode instances.
pub fn flip_study(seed: u64) -> ExperimentConfig {
    let mut decode_heavy = WorkloadSpec::new(WorkloadClass::Lphd, 600);
    decode_heavy.arrival = ArrivalProcess::Poisson { rate_per_sec: 5.0 };
    let mut prompt_heavy = WorkloadSpec::new(WorkloadClass::Hpld, 1200);
    prompt_heavy.arrival = ArrivalProcess::Poisson { rate_per_sec: 12.0 };
    prompt_heavy.start_us = 130_000_000;
    let mut cfg = ExperimentConfig {
        name: "flip".into(),
        seed,
        workload: WorkloadConfig::Phases {
            phases: vec![decode_heavy, prompt_heavy],
        },
        ..Default::default()
    };
    cfg.cluster = TopologyConfig {
        system: SystemKind::Disaggregated,
        prefill: 2,
        decode: 2,
        coupled: 0,
    };
    cfg.policies.flip = FlipPolicy::default();
    cfg
}
