use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::error::ConfigError;
use crate::workload::{Request, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillOrder {
    Fcfs,
    Sjf,
    Ljf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefillPolicy {
    pub order: PrefillOrder,
    /// Raw requests sorted per scheduling round.
    pub sched_batch: usize,
}

impl Default for PrefillPolicy {
    fn default() -> Self {
        PrefillPolicy {
            order: PrefillOrder::Sjf,
            sched_batch: 16,
        }
    }
}

impl PrefillPolicy {
    pub fn new(order: PrefillOrder, sched_batch: usize) -> Self {
        PrefillPolicy { order, sched_batch }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sched_batch == 0 {
            return Err(ConfigError::invalid(
                "policies.prefill.sched_batch",
                "must be >= 1",
            ));
        }
        Ok(())
    }
}

/// What the prefill scheduler sees of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillJob {
    pub id: RequestId,
    pub arrival: SimTime,
    pub prompt_len: u32,
}

impl From<&Request> for PrefillJob {
    fn from(r: &Request) -> Self {
        PrefillJob {
            id: r.id,
            arrival: r.arrival,
            prompt_len: r.prompt_len,
        }
    }
}

/// Move up to `sched_batch` requests from the head of `raw` into
/// `scheduled`, ordered by the policy. Requests left in `raw` wait for the
/// next round, so a long prompt can be overtaken by at most
/// `sched_batch - 1` shorter ones.
pub fn sort_raw_queue(
    policy: &PrefillPolicy,
    raw: &mut VecDeque<PrefillJob>,
    scheduled: &mut Vec<PrefillJob>,
) -> usize {
    let take = policy.sched_batch.min(raw.len());
    let mut round: Vec<PrefillJob> = raw.drain(..take).collect();
    match policy.order {
        PrefillOrder::Fcfs => {}
        PrefillOrder::Sjf => round.sort_by_key(|j| (j.prompt_len, j.arrival, j.id)),
        PrefillOrder::Ljf => {
            round.sort_by_key(|j| (std::cmp::Reverse(j.prompt_len), j.arrival, j.id))
        }
    }
    scheduled.extend(round);
    take
}
