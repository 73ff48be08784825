//! Instance flipping: when to change an instance's role, and the busy-time
//! bookkeeping that drives the decision.

use serde::{Deserialize, Serialize};

use crate::control::load::{InstanceId, Role};
use crate::engine::SimTime;
use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlipPolicy {
    pub enabled: bool,
    /// Flip an instance whose utilization stayed below this...
    pub threshold: f64,
    /// ...over this trailing window.
    pub window_us: u64,
    /// Only flip when the other role is at least this busy on average.
    pub min_peer_utilization: f64,
    pub latency_min_us: u64,
    pub latency_max_us: u64,
}

impl Default for FlipPolicy {
    fn default() -> Self {
        FlipPolicy {
            enabled: true,
            threshold: 0.10,
            window_us: 60_000_000,
            min_peer_utilization: 0.5,
            latency_min_us: 5_000,
            latency_max_us: 7_000,
        }
    }
}

impl FlipPolicy {
    pub fn disabled() -> Self {
        FlipPolicy {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ConfigError::invalid(
                "policies.flip.threshold",
                "must be in (0, 1)",
            ));
        }
        if self.window_us == 0 {
            return Err(ConfigError::invalid(
                "policies.flip.window_us",
                "must be > 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.min_peer_utilization) {
            return Err(ConfigError::invalid(
                "policies.flip.min_peer_utilization",
                "must be in [0, 1]",
            ));
        }
        if self.latency_min_us > self.latency_max_us {
            return Err(ConfigError::invalid(
                "policies.flip.latency_min_us",
                "must not exceed latency_max_us",
            ));
        }
        Ok(())
    }

    pub fn window(&self) -> SimTime {
        SimTime(self.window_us)
    }
}

/// Disjoint busy intervals of one instance, merged when contiguous.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BusyLog {
    spans: Vec<(SimTime, SimTime)>,
}

impl BusyLog {
    pub fn record(&mut self, start: SimTime, end: SimTime) {
        debug_assert!(end >= start);
        if let Some(last) = self.spans.last_mut() {
            debug_assert!(start >= last.1, "busy spans overlap");
            if start == last.1 {
                last.1 = end;
                return;
            }
        }
        self.spans.push((start, end));
    }

    pub fn first_start(&self) -> Option<SimTime> {
        self.spans.first().map(|s| s.0)
    }

    pub fn last_end(&self) -> Option<SimTime> {
        self.spans.last().map(|s| s.1)
    }

    /// Busy time inside `[from, to)`.
    pub fn busy_between(&self, from: SimTime, to: SimTime) -> SimTime {
        let mut total = 0;
        for &(s, e) in self.spans.iter().rev() {
            if e <= from {
                break;
            }
            let lo = s.max(from);
            let hi = e.min(to);
            if hi > lo {
                total += (hi - lo).0;
            }
        }
        SimTime(total)
    }

    pub fn total(&self) -> SimTime {
        SimTime(self.spans.iter().map(|(s, e)| (*e - *s).0).sum())
    }

    pub fn utilization(&self, from: SimTime, to: SimTime) -> f64 {
        if to <= from {
            return 0.0;
        }
        self.busy_between(from, to).0 as f64 / (to - from).0 as f64
    }
}

/// What the flip policy needs to know about one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipCandidate {
    pub id: InstanceId,
    pub role: Role,
    pub utilization: f64,
    /// Time since the instance took its current role.
    pub tenure: SimTime,
    pub busy_flipping: bool,
}

/// Pick at most one instance to flip. An instance qualifies when it has held
/// its role for a full window, stayed under the threshold, is not the last
/// of its role, and the other role is busy enough to want help.
pub fn choose_flip(
    policy: &FlipPolicy,
    candidates: &[FlipCandidate],
) -> Option<(InstanceId, Role)> {
    if !policy.enabled || candidates.iter().any(|c| c.busy_flipping) {
        return None;
    }
    let mean = |role: Role| {
        let us: Vec<f64> = candidates
            .iter()
            .filter(|c| c.role == role)
            .map(|c| c.utilization)
            .collect();
        if us.is_empty() {
            None
        } else {
            Some(us.iter().sum::<f64>() / us.len() as f64)
        }
    };
    let count = |role: Role| candidates.iter().filter(|c| c.role == role).count();
    candidates
        .iter()
        .filter(|c| c.role != Role::Coupled)
        .filter(|c| count(c.role) >= 2)
        .filter(|c| c.tenure >= policy.window() && c.utilization < policy.threshold)
        .filter(|c| mean(c.role.opposite()).is_some_and(|u| u >= policy.min_peer_utilization))
        .min_by(|a, b| {
            a.utilization
                .total_cmp(&b.utilization)
                .then(a.id.cmp(&b.id))
        })
        .map(|c| (c.id, c.role.opposite()))
}

/// One completed role change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub instance: InstanceId,
    pub from: Role,
    pub to: Role,
    pub requested_at: SimTime,
    pub drained_at: SimTime,
    pub completed_at: SimTime,
    /// Role-switch latency after draining.
    pub switch_us: u64,
}
