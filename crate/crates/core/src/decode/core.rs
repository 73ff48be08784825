//! Continuous-batching decode loop shared by decode instances and the
//! coupled baseline.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::decode::policy::{DecodeConfig, DecodePolicy, ReserveBound};
use crate::decode::store::PagedKvStore;
use crate::engine::SimTime;
use crate::error::SimError;
use crate::prefill::predictor::LengthBucket;
use crate::workload::RequestId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodingRequest {
    pub id: RequestId,
    pub prompt_len: u32,
    /// Hidden from policies; ends the request.
    pub true_decode_len: u32,
    pub generated: u32,
    pub bucket: Option<LengthBucket>,
    pub swaps: u32,
}

impl DecodingRequest {
    pub fn new(
        id: RequestId,
        prompt_len: u32,
        true_decode_len: u32,
        bucket: Option<LengthBucket>,
    ) -> Self {
        DecodingRequest {
            id,
            prompt_len,
            true_decode_len,
            generated: 0,
            bucket,
            swaps: 0,
        }
    }

    pub fn kv_tokens(&self) -> u64 {
        self.prompt_len as u64 + self.generated as u64
    }

    pub fn predicted_heavy(&self) -> bool {
        self.bucket.map(|b| b.is_heavy()).unwrap_or(false)
    }

    fn bound_tokens(&self, bound: ReserveBound) -> u64 {
        match (self.bucket, bound) {
            (None, _) => 0,
            (Some(b), ReserveBound::Lower) => b.lower() as u64,
            (Some(b), ReserveBound::Upper) => b.upper() as u64,
        }
    }

    /// Tokens still expected according to the prediction; zero once the
    /// request has outlived it.
    fn predicted_remaining(&self, bound: ReserveBound) -> u64 {
        self.bound_tokens(bound)
            .saturating_sub(self.generated as u64)
    }

    /// Pages the reserve policies budget for this request.
    fn reserved_pages(&self, bound: ReserveBound, cost: &CostModel) -> u64 {
        let tokens = self.bound_tokens(bound).max(self.generated as u64 + 1);
        cost.pages_needed(self.prompt_len as u64 + tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    Deferred,
}

/// Admission test for `req` against the running batch. Pure: the caller
/// allocates on `Admitted`.
pub fn admit(
    req: &DecodingRequest,
    cfg: &DecodeConfig,
    store: &PagedKvStore,
    running: &[DecodingRequest],
    cost: &CostModel,
) -> Admission {
    if let Some(max) = cfg.max_batch {
        if running.len() >= max as usize {
            return Admission::Deferred;
        }
    }
    let next_token = cost.pages_needed(req.kv_tokens() + 1);
    if store.free() + store.resident_pages(req.id) < next_token {
        return Admission::Deferred;
    }
    let fits = match cfg.policy {
        DecodePolicy::Greedy => true,
        DecodePolicy::ReserveStatic => {
            let reserved: u64 = running
                .iter()
                .map(|r| {
                    store
                        .resident_pages(r.id)
                        .max(r.reserved_pages(cfg.bound, cost))
                })
                .sum();
            let available = store.capacity().saturating_sub(reserved);
            available >= req.reserved_pages(cfg.bound, cost)
        }
        DecodePolicy::ReserveDynamic => {
            let horizon = running
                .iter()
                .map(|r| r.predicted_remaining(cfg.bound))
                .min()
                .unwrap_or(0);
            let projected: u64 = running
                .iter()
                .map(|r| cost.pages_needed(r.kv_tokens() + horizon))
                .sum();
            store.capacity().saturating_sub(projected) >= req.reserved_pages(cfg.bound, cost)
        }
    };
    if fits {
        Admission::Admitted
    } else {
        Admission::Deferred
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub iterations: u64,
    pub tokens: u64,
    pub swap_out_events: u64,
    pub swap_out_pages: u64,
    pub swap_in_pages: u64,
    pub max_batch: u32,
}

/// One decode (or mixed) iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub start: SimTime,
    pub batch: u32,
    pub kv_tokens: u64,
    pub prefill_tokens: u64,
    pub latency: SimTime,
    pub swap_out_pages: u64,
    pub swap_in_pages: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Growth {
    pub swap_out_pages: u64,
    pub evicted: Vec<RequestId>,
}

#[derive(Debug, Clone)]
pub struct DecodeCore {
    cfg: DecodeConfig,
    store: PagedKvStore,
    waiting: VecDeque<DecodingRequest>,
    running: Vec<DecodingRequest>,
    stats: DecodeStats,
    records: Option<Vec<IterationRecord>>,
}

impl DecodeCore {
    pub fn new(cfg: DecodeConfig, capacity_pages: u64) -> Self {
        DecodeCore {
            cfg,
            store: PagedKvStore::new(capacity_pages),
            waiting: VecDeque::new(),
            running: Vec::new(),
            stats: DecodeStats::default(),
            records: None,
        }
    }

    pub fn with_records(mut self) -> Self {
        self.records = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.cfg
    }

    pub fn store(&self) -> &PagedKvStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut PagedKvStore {
        &mut self.store
    }

    pub fn waiting(&self) -> &VecDeque<DecodingRequest> {
        &self.waiting
    }

    pub fn running(&self) -> &[DecodingRequest] {
        &self.running
    }

    pub fn stats(&self) -> &DecodeStats {
        &self.stats
    }

    pub fn records(&self) -> Option<&[IterationRecord]> {
        self.records.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.waiting.is_empty() && self.running.is_empty()
    }

    pub fn enqueue(&mut self, req: DecodingRequest) {
        self.waiting.push_back(req);
    }

    /// Put an already-resident request straight into the running batch.
    pub fn push_running(&mut self, req: DecodingRequest) {
        self.running.push(req);
    }

    pub fn has_swapped_waiting(&self) -> bool {
        self.waiting
            .iter()
            .any(|r| self.store.swapped_pages(r.id) > 0)
    }

    /// Admit from the head of the waiting queue until the first deferral.
    /// When nothing is running the head is admitted if it physically fits,
    /// so an over-cautious prediction cannot stall the instance. Returns
    /// pages swapped back in.
    pub fn admit_waiting(&mut self, cost: &CostModel) -> Result<u64, SimError> {
        let mut swapped_in = 0;
        while let Some(head) = self.waiting.front() {
            let verdict = admit(head, &self.cfg, &self.store, &self.running, cost);
            let next_token = cost.pages_needed(head.kv_tokens() + 1);
            let forced = verdict == Admission::Deferred && self.running.is_empty() && {
                if next_token > self.store.capacity() {
                    return Err(SimError::RequestExceedsCapacity {
                        request: head.id.0,
                        needed: next_token,
                        capacity: self.store.capacity(),
                    });
                }
                next_token <= self.store.free()
            };
            if verdict == Admission::Deferred && !forced {
                break;
            }
            let req = self.waiting.pop_front().expect("peeked");
            if self.store.swapped_pages(req.id) > 0 {
                swapped_in += self.store.restore(req.id)?;
            } else {
                self.store
                    .grow_to(req.id, cost.pages_needed(req.kv_tokens()))?;
            }
            self.running.push(req);
        }
        self.stats.swap_in_pages += swapped_in;
        Ok(swapped_in)
    }

    /// Allocate next-token pages for every running request, evicting the
    /// largest other residents when memory runs out.
    pub fn grow(&mut self, cost: &CostModel) -> Result<Growth, SimError> {
        let mut growth = Growth::default();
        let ids: Vec<RequestId> = self.running.iter().map(|r| r.id).collect();
        for id in ids {
            let Some(idx) = self.running.iter().position(|r| r.id == id) else {
                continue;
            };
            let target = cost.pages_needed(self.running[idx].kv_tokens() + 1);
            let need = target.saturating_sub(self.store.resident_pages(id));
            if need > self.store.free() {
                let victims = self.store.swap_out(need, Some(id));
                for (victim, pages) in victims {
                    growth.swap_out_pages += pages;
                    growth.evicted.push(victim);
                    self.stats.swap_out_events += 1;
                    if let Some(pos) = self.running.iter().position(|r| r.id == victim) {
                        let mut r = self.running.remove(pos);
                        r.swaps += 1;
                        self.waiting.push_front(r);
                    }
                }
                if need > self.store.free() {
                    return Err(SimError::RequestExceedsCapacity {
                        request: id.0,
                        needed: target,
                        capacity: self.store.capacity(),
                    });
                }
            }
            self.store.grow_to(id, target)?;
        }
        self.stats.swap_out_pages += growth.swap_out_pages;
        Ok(growth)
    }

    /// Admit, allocate and price one pure decode iteration. `None` when
    /// nothing can run.
    pub fn begin_step(
        &mut self,
        cost: &CostModel,
        now: SimTime,
    ) -> Result<Option<IterationRecord>, SimError> {
        let swap_in = self.admit_waiting(cost)?;
        let growth = self.grow(cost)?;
        if self.running.is_empty() {
            return Ok(None);
        }
        let batch = self.running.len() as u32;
        let kv: u64 = self.running.iter().map(|r| r.kv_tokens()).sum();
        let latency = cost.decode_iter_latency(batch as u64, kv)
            + cost.swap_latency(swap_in + growth.swap_out_pages);
        let rec = IterationRecord {
            start: now,
            batch,
            kv_tokens: kv,
            prefill_tokens: 0,
            latency,
            swap_out_pages: growth.swap_out_pages,
            swap_in_pages: swap_in,
        };
        self.note(rec);
        Ok(Some(rec))
    }

    pub(crate) fn note(&mut self, rec: IterationRecord) {
        self.stats.iterations += 1;
        self.stats.max_batch = self.stats.max_batch.max(rec.batch);
        if let Some(records) = self.records.as_mut() {
            records.push(rec);
        }
    }

    /// Every running request emits one token; finished ones free their pages.
    pub fn finish_step(&mut self) -> Vec<DecodingRequest> {
        let mut done = Vec::new();
        let mut still = Vec::with_capacity(self.running.len());
        for mut r in self.running.drain(..) {
            r.generated += 1;
            self.stats.tokens += 1;
            if r.generated >= r.true_decode_len {
                self.store.release(r.id);
                done.push(r);
            } else {
                still.push(r);
            }
        }
        self.running = still;
        done
    }

    /// Pages promised to requests that are queued but not resident.
    pub fn promised_pages(&self, cost: &CostModel) -> u64 {
        self.waiting
            .iter()
            .map(|r| cost.pages_needed(r.kv_tokens()))
            .sum()
    }

    pub fn check(&self) -> Result<(), SimError> {
        self.store.check()?;
        for r in &self.running {
            if !self.store.is_resident(r.id) {
                return Err(SimError::Invariant(format!(
                    "running request {} is not resident",
                    r.id
                )));
            }
            if r.generated > r.true_decode_len {
                return Err(SimError::Invariant(format!(
                    "request {} overran its length",
                    r.id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModelParams;

    fn cost_with(capacity_tokens: u64) -> CostModel {
        CostModel::new(CostModelParams {
            mem_capacity_tokens: capacity_tokens,
            ..Default::default()
        })
        .unwrap()
    }

    fn bucket(index: u32, g: u32) -> Option<LengthBucket> {
        Some(LengthBucket {
            index,
            granularity: g,
        })
    }

    fn req(id: u32, prompt: u32, len: u32, b: Option<LengthBucket>) -> DecodingRequest {
        DecodingRequest::new(RequestId(id), prompt, len, b)
    }

    #[test]
    fn empty_instance_admits_under_every_policy() {
        let cost = cost_with(1600);
        for policy in [
            DecodePolicy::Greedy,
            DecodePolicy::ReserveStatic,
            DecodePolicy::ReserveDynamic,
        ] {
            let store = PagedKvStore::new(100);
            let r = req(1, 100, 50, bucket(0, 200));
            assert_eq!(
                admit(&r, &DecodeConfig::new(policy), &store, &[], &cost),
                Admission::Admitted
            );
        }
    }

    #[test]
    fn reserve_static_threshold() {
        // 10 free pages; 100 prompt + 76 lower bound = 176 tokens = 11 pages.
        let cost = cost_with(160);
        let store = PagedKvStore::new(10);
        let cfg = DecodeConfig::new(DecodePolicy::ReserveStatic);
        let r = req(
            1,
            100,
            90,
            Some(LengthBucket {
                index: 1,
                granularity: 76,
            }),
        );
        assert_eq!(admit(&r, &cfg, &store, &[], &cost), Admission::Deferred);
        let r = req(
            1,
            100,
            90,
            Some(LengthBucket {
                index: 1,
                granularity: 60,
            }),
        );
        assert_eq!(admit(&r, &cfg, &store, &[], &cost), Admission::Admitted);
    }

    #[test]
    fn greedy_admits_what_static_defers() {
        let cost = cost_with(1600);
        let prompt = 32;
        let capacity = cost.pages_needed(prompt) + 1;
        let store = PagedKvStore::new(capacity);
        // lower bound = 2 pages of tokens.
        let r = req(
            1,
            prompt as u32,
            40,
            Some(LengthBucket {
                index: 1,
                granularity: 32,
            }),
        );
        let greedy = admit(
            &r,
            &DecodeConfig::new(DecodePolicy::Greedy),
            &store,
            &[],
            &cost,
        );
        let fixed = admit(
            &r,
            &DecodeConfig::new(DecodePolicy::ReserveStatic),
            &store,
            &[],
            &cost,
        );
        assert_eq!(greedy, Admission::Admitted);
        assert_eq!(fixed, Admission::Deferred);
    }

    #[test]
    fn dynamic_counts_on_shortest_job_growth() {
        let cost = cost_with(1600);
        let cfg = DecodeConfig::new(DecodePolicy::ReserveDynamic);
        let mut store = PagedKvStore::new(20);
        // Running: 64 KV tokens, 32 predicted to go -> 6 pages at its end.
        let running = vec![req(
            1,
            64,
            100,
            Some(LengthBucket {
                index: 1,
                granularity: 32,
            }),
        )];
        store.grow_to(RequestId(1), 4).unwrap();
        // New request needs pages(160 + 32) = 12; projected free is 20 - 6 = 14.
        let r = req(
            2,
            160,
            50,
            Some(LengthBucket {
                index: 1,
                granularity: 32,
            }),
        );
        assert_eq!(
            admit(&r, &cfg, &store, &running, &cost),
            Admission::Admitted
        );
        // pages(208 + 32) = 15 > 14.
        let r = req(
            2,
            208,
            50,
            Some(LengthBucket {
                index: 1,
                granularity: 32,
            }),
        );
        assert_eq!(
            admit(&r, &cfg, &store, &running, &cost),
            Admission::Deferred
        );
    }

    #[test]
    fn step_latency_matches_formula() {
        let cost = cost_with(16_000);
        let mut core = DecodeCore::new(DecodeConfig::new(DecodePolicy::Greedy), 1000);
        core.enqueue(req(1, 100, 5, None));
        core.enqueue(req(2, 200, 5, None));
        let rec = core.begin_step(&cost, SimTime::ZERO).unwrap().unwrap();
        assert_eq!(rec.batch, 2);
        assert_eq!(rec.kv_tokens, 300);
        assert_eq!(rec.latency, cost.decode_iter_latency(2, 300));
        assert_eq!(
            rec.latency.0,
            (2_000.0 + 2.0 * 150.0 + 300.0 * 0.18f64).round() as u64
        );
    }

    #[test]
    fn last_token_completes_and_frees() {
        let cost = cost_with(16_000);
        let mut core = DecodeCore::new(DecodeConfig::new(DecodePolicy::Greedy), 1000);
        core.enqueue(req(1, 100, 1, None));
        core.begin_step(&cost, SimTime::ZERO).unwrap().unwrap();
        let done = core.finish_step();
        assert_eq!(done.len(), 1);
        assert_eq!(core.store().used(), 0);
        assert!(core.is_empty());
        assert!(core.begin_step(&cost, SimTime::ZERO).unwrap().is_none());
    }

    #[test]
    fn growth_evicts_largest_other_resident() {
        let cost = cost_with(16_000);
        let mut core = DecodeCore::new(DecodeConfig::new(DecodePolicy::Greedy), 10);
        // 16 tokens = 1 page, next token needs 2. 80 tokens = 5 pages -> 6.
        core.enqueue(req(1, 16, 50, None));
        core.enqueue(req(2, 80, 50, None));
        let rec = core.begin_step(&cost, SimTime::ZERO).unwrap().unwrap();
        assert_eq!(rec.batch, 2);
        assert_eq!(core.store().used(), 8);
        core.finish_step();
        // Grow both to the page edge without crossing into swaps.
        for _ in 0..15 {
            core.begin_step(&cost, SimTime::ZERO).unwrap().unwrap();
            core.finish_step();
        }
        // Request 1 now at 32 tokens needing 3 pages, request 2 at 96 needing 7: 10 total.
        let rec = core.begin_step(&cost, SimTime::ZERO).unwrap().unwrap();
        assert_eq!(rec.swap_out_pages, 0);
        core.finish_step();
        for _ in 0..15 {
            core.begin_step(&cost, SimTime::ZERO).unwrap().unwrap();
            core.finish_step();
        }
        let before = core.stats().swap_out_events;
        let rec = core.begin_step(&cost, SimTime::ZERO).unwrap().unwrap();
        assert!(core.stats().swap_out_events > before);
        assert!(rec.swap_out_pages > 0);
        assert_eq!(
            rec.latency,
            cost.decode_iter_latency(rec.batch as u64, rec.kv_tokens)
                + cost.swap_latency(rec.swap_out_pages)
        );
        core.check().unwrap();
    }

    #[test]
    fn oversized_request_is_a_capacity_error() {
        let cost = cost_with(16_000);
        let mut core = DecodeCore::new(DecodeConfig::new(DecodePolicy::Greedy), 2);
        core.enqueue(req(1, 100, 5, None));
        assert!(matches!(
            core.begin_step(&cost, SimTime::ZERO),
            Err(SimError::RequestExceedsCapacity { .. })
        ));
    }

    #[test]
    fn max_batch_caps_running() {
        let cost = cost_with(16_000);
        let cfg = DecodeConfig {
            max_batch: Some(2),
            ..DecodeConfig::new(DecodePolicy::Greedy)
        };
        let mut core = DecodeCore::new(cfg, 1000);
        for i in 0..5 {
            core.enqueue(req(i, 10, 5, None));
        }
        assert_eq!(
            core.begin_step(&cost, SimTime::ZERO)
                .unwrap()
                .unwrap()
                .batch,
            2
        );
        assert_eq!(core.waiting().len(), 3);
    }
}
