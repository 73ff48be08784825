//! Coupled baseline: prefill and decode share one engine. Whole prompts are
//! prefilled in the same continuous-batching iteration as running decodes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::control::InstanceId;
use crate::cost::{CostModel, PrefillWork};
use crate::decode::{DecodeConfig, DecodeCore, DecodePolicy, DecodingRequest, IterationRecord};
use crate::engine::SimTime;
use crate::error::{ConfigError, SimError};
use crate::workload::{Request, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoupledConfig {
    /// Most new prompts prefilled in one iteration.
    pub prefill_batch: u32,
    /// Most sequences running at once.
    pub max_batch: u32,
}

impl Default for CoupledConfig {
    fn default() -> Self {
        CoupledConfig {
            prefill_batch: 16,
            max_batch: 16,
        }
    }
}

impl CoupledConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.prefill_batch == 0 {
            return Err(ConfigError::invalid(
                "policies.coupled.prefill_batch",
                "must be >= 1",
            ));
        }
        if self.max_batch == 0 {
            return Err(ConfigError::invalid(
                "policies.coupled.max_batch",
                "must be >= 1",
            ));
        }
        Ok(())
    }
}

/// Outcome of starting one coupled iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoupledStep {
    pub record: IterationRecord,
    /// Requests whose prompt is prefilled by this iteration.
    pub prefilled: Vec<RequestId>,
}

/// Results of a finished coupled iteration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoupledFinish {
    pub first_tokens: Vec<RequestId>,
    pub completed: Vec<DecodingRequest>,
}

#[derive(Debug, Clone)]
pub struct CoupledInstance {
    pub id: InstanceId,
    cfg: CoupledConfig,
    core: DecodeCore,
    fresh: VecDeque<DecodingRequest>,
    prefilling: Vec<DecodingRequest>,
    stepping: bool,
}

impl CoupledInstance {
    pub fn new(id: InstanceId, cfg: CoupledConfig, cost: &CostModel) -> Self {
        let decode = DecodeConfig {
            max_batch: Some(cfg.max_batch),
            ..DecodeConfig::new(DecodePolicy::Greedy)
        };
        CoupledInstance {
            id,
            cfg,
            core: DecodeCore::new(decode, cost.capacity_pages()),
            fresh: VecDeque::new(),
            prefilling: Vec::new(),
            stepping: false,
        }
    }

    pub fn core(&self) -> &DecodeCore {
        &self.core
    }

    pub fn core_mut(&mut self) -> &mut DecodeCore {
        &mut self.core
    }

    pub fn is_stepping(&self) -> bool {
        self.stepping
    }

    pub fn queued_tokens(&self) -> u64 {
        self.fresh.iter().map(|r| r.prompt_len as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.fresh.is_empty() && self.prefilling.is_empty() && self.core.is_empty()
    }

    pub fn enqueue(&mut self, req: &Request) {
        self.fresh.push_back(DecodingRequest::new(
            req.id,
            req.prompt_len,
            req.true_decode_len,
            None,
        ));
    }

    /// Start one iteration: swapped decodes come back first, running decodes
    /// grow, then new prompts join while memory and the batch cap allow.
    pub fn start_step(
        &mut self,
        cost: &CostModel,
        now: SimTime,
    ) -> Result<Option<CoupledStep>, SimError> {
        if self.stepping {
            return Ok(None);
        }
        let swap_in = self.core.admit_waiting(cost)?;
        let growth = self.core.grow(cost)?;
        if self.core.waiting().is_empty() {
            while let Some(head) = self.fresh.front() {
                let occupied = self.core.running().len() + self.prefilling.len();
                if self.prefilling.len() >= self.cfg.prefill_batch as usize
                    || occupied >= self.cfg.max_batch as usize
                {
                    break;
                }
                let need = cost.pages_needed(head.prompt_len as u64 + 1);
                if need > self.core.store().capacity() {
                    return Err(SimError::RequestExceedsCapacity {
                        request: head.id.0,
                        needed: need,
                        capacity: self.core.store().capacity(),
                    });
                }
                if need > self.core.store().free() {
                    break;
                }
                let req = self.fresh.pop_front().expect("peeked");
                self.core
                    .store_mut()
                    .grow_to(req.id, cost.pages_needed(req.prompt_len as u64))?;
                self.prefilling.push(req);
            }
        }
        let batch = self.core.running().len() as u64;
        let prefill = PrefillWork {
            tokens: self.prefilling.iter().map(|r| r.prompt_len as u64).sum(),
            requests: self.prefilling.len() as u64,
        };
        if batch == 0 && prefill.requests == 0 {
            return Ok(None);
        }
        let kv: u64 = self.core.running().iter().map(|r| r.kv_tokens()).sum();
        let latency = cost.mixed_iter_latency(prefill, batch, kv)
            + cost.swap_latency(swap_in + growth.swap_out_pages);
        let record = IterationRecord {
            start: now,
            batch: batch as u32,
            kv_tokens: kv,
            prefill_tokens: prefill.tokens,
            latency,
            swap_out_pages: growth.swap_out_pages,
            swap_in_pages: swap_in,
        };
        self.core.note(record);
        self.stepping = true;
        Ok(Some(CoupledStep {
            record,
            prefilled: self.prefilling.iter().map(|r| r.id).collect(),
        }))
    }

    pub fn finish_step(&mut self) -> CoupledFinish {
        debug_assert!(self.stepping);
        self.stepping = false;
        let completed = self.core.finish_step();
        let mut first_tokens = Vec::with_capacity(self.prefilling.len());
        for r in self.prefilling.drain(..) {
            first_tokens.push(r.id);
            self.core.push_running(r);
        }
        CoupledFinish {
            first_tokens,
            completed,
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        self.core.check()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::DecodeInstance;

    fn cost() -> CostModel {
        CostModel::default()
    }

    #[test]
    fn empty_system_does_nothing() {
        let c = cost();
        let mut inst = CoupledInstance::new(InstanceId(0), CoupledConfig::default(), &c);
        assert!(inst.start_step(&c, SimTime::ZERO).unwrap().is_none());
        assert!(!inst.is_stepping());
    }

    #[test]
    fn prompt_joins_running_decodes() {
        let c = cost();
        let mut inst = CoupledInstance::new(InstanceId(0), CoupledConfig::default(), &c);
        for i in 0..8 {
            inst.enqueue(&Request::new(RequestId(i), SimTime::ZERO, 18, 50));
        }
        let first = inst.start_step(&c, SimTime::ZERO).unwrap().unwrap();
        assert_eq!(first.prefilled.len(), 8);
        assert_eq!(first.record.batch, 0);
        let fin = inst.finish_step();
        assert_eq!(fin.first_tokens.len(), 8);
        let light = inst
            .start_step(&c, SimTime::ZERO)
            .unwrap()
            .unwrap()
            .record
            .latency;
        inst.finish_step();
        inst.enqueue(&Request::new(RequestId(99), SimTime::ZERO, 512, 50));
        let mixed = inst.start_step(&c, SimTime::ZERO).unwrap().unwrap();
        assert_eq!(mixed.prefilled, vec![RequestId(99)]);
        assert_eq!(mixed.record.batch, 8);
        assert_eq!(
            mixed.record.latency,
            c.prefill_latency(512, 1, false) + c.decode_iter_latency(8, 8 * (18 + 1))
        );
        assert!(mixed.record.latency.0 >= 3 * light.0);
    }

    #[test]
    fn batch_cap_holds_back_prompts() {
        let c = cost();
        let cfg = CoupledConfig {
            prefill_batch: 4,
            max_batch: 6,
        };
        let mut inst = CoupledInstance::new(InstanceId(0), cfg, &c);
        for i in 0..10 {
            inst.enqueue(&Request::new(RequestId(i), SimTime::ZERO, 18, 50));
        }
        assert_eq!(
            inst.start_step(&c, SimTime::ZERO)
                .unwrap()
                .unwrap()
                .prefilled
                .len(),
            4
        );
        inst.finish_step();
        assert_eq!(
            inst.start_step(&c, SimTime::ZERO)
                .unwrap()
                .unwrap()
                .prefilled
                .len(),
            2
        );
    }

    #[test]
    fn decode_only_matches_greedy_decode_instance() {
        let c = cost();
        let mut coupled = CoupledInstance::new(InstanceId(0), CoupledConfig::default(), &c);
        let greedy = DecodeConfig::new(DecodePolicy::Greedy);
        let mut decode = DecodeInstance::new(InstanceId(1), greedy, &c);
        for i in 0..12u32 {
            let r = DecodingRequest::new(RequestId(i), 20 + 37 * i, 5 + 3 * i, None);
            coupled.core_mut().enqueue(r.clone());
            decode.expect_transfer();
            decode.receive(r);
        }
        let mut t = SimTime::ZERO;
        loop {
            let a = coupled.start_step(&c, t).unwrap().map(|s| s.record);
            let b = decode.start_step(&c, t).unwrap();
            assert_eq!(a, b);
            let Some(rec) = a else { break };
            t += rec.latency;
            coupled.finish_step();
            decode.finish_step();
        }
        assert!(coupled.is_empty());
    }
}
