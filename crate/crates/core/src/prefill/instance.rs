use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::control::{DecodeLoad, InstanceId};
use crate::cost::CostModel;
use crate::engine::SimTime;
use crate::prefill::chunker::{chunkify, Chunk};
use crate::prefill::predictor::PredictorMode;
use crate::prefill::scheduler::{sort_raw_queue, PrefillJob, PrefillPolicy};
use crate::workload::RequestId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillStats {
    pub rounds: u64,
    pub chunks: u64,
    pub pad_tokens: u64,
    pub prompt_tokens: u64,
    pub max_queue_depth: usize,
}

/// What happened when a chunk was started.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkStart {
    pub latency: SimTime,
    /// Requests whose first prompt token is in this chunk.
    pub started: Vec<RequestId>,
}

/// A prefill-only instance: raw queue, per-round scheduled queue cut into
/// chunks, and the snapshot of decode loads its dispatcher works from.
#[derive(Debug, Clone)]
pub struct PrefillInstance {
    pub id: InstanceId,
    policy: PrefillPolicy,
    predictor: PredictorMode,
    raw: VecDeque<PrefillJob>,
    chunks: VecDeque<Chunk>,
    running: Option<Chunk>,
    /// Prompt tokens not yet prefilled, per request of the current round.
    remaining: BTreeMap<RequestId, u32>,
    round_fresh: bool,
    queued_tokens: u64,
    snapshot: Vec<DecodeLoad>,
    snapshot_time: SimTime,
    /// Prefilled requests waiting for a decode instance to appear.
    pub parked: VecDeque<RequestId>,
    draining: bool,
    stats: PrefillStats,
}

impl PrefillInstance {
    pub fn new(id: InstanceId, policy: PrefillPolicy, predictor: PredictorMode) -> Self {
        PrefillInstance {
            id,
            policy,
            predictor,
            raw: VecDeque::new(),
            chunks: VecDeque::new(),
            running: None,
            remaining: BTreeMap::new(),
            round_fresh: false,
            queued_tokens: 0,
            snapshot: Vec::new(),
            snapshot_time: SimTime::ZERO,
            parked: VecDeque::new(),
            draining: false,
            stats: PrefillStats::default(),
        }
    }

    pub fn enqueue(&mut self, job: PrefillJob) {
        self.queued_tokens += job.prompt_len as u64;
        self.raw.push_back(job);
        let depth = self.raw.len() + self.remaining.len();
        self.stats.max_queue_depth = self.stats.max_queue_depth.max(depth);
    }

    /// Prompt tokens routed here and not yet prefilled.
    pub fn queued_tokens(&self) -> u64 {
        self.queued_tokens
    }

    pub fn is_busy(&self) -> bool {
        self.running.is_some()
    }

    /// No queued, scheduled or running work.
    pub fn is_idle(&self) -> bool {
        self.running.is_none() && self.chunks.is_empty() && self.raw.is_empty()
    }

    pub fn is_drained(&self) -> bool {
        self.is_idle() && self.parked.is_empty()
    }

    pub fn draining(&self) -> bool {
        self.draining
    }

    pub fn set_draining(&mut self, on: bool) {
        self.draining = on;
    }

    pub fn stats(&self) -> &PrefillStats {
        &self.stats
    }

    pub fn snapshot(&self) -> &[DecodeLoad] {
        &self.snapshot
    }

    pub fn snapshot_mut(&mut self) -> &mut Vec<DecodeLoad> {
        &mut self.snapshot
    }

    pub fn snapshot_time(&self) -> SimTime {
        self.snapshot_time
    }

    pub fn receive_broadcast(&mut self, loads: Vec<DecodeLoad>, at: SimTime) {
        self.snapshot = loads;
        self.snapshot_time = at;
    }

    /// Stop dispatching to `id` before the next broadcast.
    pub fn forget_decode(&mut self, id: InstanceId) {
        self.snapshot.retain(|l| l.id != id);
    }

    /// Start the next chunk if idle and work is available. A new scheduling
    /// round is cut when the previous round's chunks are exhausted.
    pub fn start_next(&mut self, cost: &CostModel) -> Option<ChunkStart> {
        if self.running.is_some() {
            return None;
        }
        if self.chunks.is_empty() {
            if self.raw.is_empty() {
                return None;
            }
            let mut scheduled = Vec::new();
            sort_raw_queue(&self.policy, &mut self.raw, &mut scheduled);
            for job in &scheduled {
                self.remaining.insert(job.id, job.prompt_len);
            }
            self.chunks = chunkify(&scheduled, cost.chunk_size()).into();
            self.stats.rounds += 1;
            self.round_fresh = true;
        }
        let chunk = self.chunks.pop_front()?;
        let started: Vec<RequestId> = chunk
            .slices
            .iter()
            .filter(|s| s.start == 0)
            .map(|s| s.request)
            .collect();
        let real = chunk.real_tokens() as u64;
        let mut latency = cost.prefill_latency(
            real + chunk.padded as u64,
            started.len() as u64,
            self.predictor == PredictorMode::Parallel,
        );
        if self.round_fresh && self.predictor == PredictorMode::Sequential {
            latency += cost.sequential_predictor_latency();
        }
        self.round_fresh = false;
        self.stats.chunks += 1;
        self.stats.pad_tokens += chunk.padded as u64;
        self.stats.prompt_tokens += real;
        self.running = Some(chunk);
        Some(ChunkStart { latency, started })
    }

    /// Complete the running chunk; returns requests whose last prompt token
    /// was in it, in slice order.
    pub fn on_chunk_done(&mut self) -> Vec<RequestId> {
        let chunk = self
            .running
            .take()
            .expect("chunk completion without a running chunk");
        let mut finished = Vec::new();
        for s in &chunk.slices {
            self.queued_tokens -= s.len as u64;
            let left = self
                .remaining
                .get_mut(&s.request)
                .expect("slice of a scheduled request");
            *left -= s.len;
            if *left == 0 {
                self.remaining.remove(&s.request);
                finished.push(s.request);
            }
        }
        finished
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModelParams;
    use crate::prefill::scheduler::PrefillOrder;

    fn job(id: u32, len: u32) -> PrefillJob {
        PrefillJob {
            id: RequestId(id),
            arrival: SimTime::ZERO,
            prompt_len: len,
        }
    }

    fn cost() -> CostModel {
        CostModel::new(CostModelParams::default()).unwrap()
    }

    #[test]
    fn runs_rounds_chunk_by_chunk() {
        let c = cost();
        let mut p = PrefillInstance::new(
            InstanceId(0),
            PrefillPolicy::new(PrefillOrder::Sjf, 16),
            PredictorMode::Off,
        );
        for (i, len) in [900, 18, 512, 100].into_iter().enumerate() {
            p.enqueue(job(i as u32, len));
        }
        assert_eq!(p.queued_tokens(), 1530);
        let first = p.start_next(&c).unwrap();
        assert_eq!(
            first.started,
            vec![RequestId(1), RequestId(3), RequestId(2)]
        );
        // One full chunk plus three per-request overheads.
        assert_eq!(first.latency, SimTime(50_000 + 3 * 5_000));
        assert!(p.start_next(&c).is_none(), "one chunk at a time");
        assert_eq!(p.on_chunk_done(), vec![RequestId(1), RequestId(3)]);
        p.start_next(&c).unwrap();
        assert_eq!(p.on_chunk_done(), vec![RequestId(2)]);
        p.start_next(&c).unwrap();
        assert_eq!(p.on_chunk_done(), vec![RequestId(0)]);
        assert!(p.is_idle());
        assert_eq!(p.queued_tokens(), 0);
        assert_eq!(p.stats().chunks, 3);
        assert_eq!(p.stats().pad_tokens, 6);
        assert_eq!(p.stats().rounds, 1);
    }

    #[test]
    fn predictor_modes_change_latency() {
        let c = cost();
        let mut latencies = Vec::new();
        for mode in [
            PredictorMode::Off,
            PredictorMode::Parallel,
            PredictorMode::Sequential,
        ] {
            let mut p = PrefillInstance::new(InstanceId(0), PrefillPolicy::default(), mode);
            p.enqueue(job(0, 512));
            latencies.push(p.start_next(&c).unwrap().latency.0);
        }
        assert_eq!(latencies, vec![55_000, 60_500, 60_000]);
    }

    #[test]
    fn later_arrivals_wait_for_next_round() {
        let c = cost();
        let mut p = PrefillInstance::new(
            InstanceId(0),
            PrefillPolicy::new(PrefillOrder::Sjf, 16),
            PredictorMode::Off,
        );
        p.enqueue(job(0, 1000));
        p.start_next(&c).unwrap();
        p.enqueue(job(1, 5));
        p.on_chunk_done();
        let next = p.start_next(&c).unwrap();
        // Second half of request 0 runs before the newcomer.
        assert!(next.started.is_empty());
        assert_eq!(p.on_chunk_done(), vec![RequestId(0)]);
        assert_eq!(p.start_next(&c).unwrap().started, vec![RequestId(1)]);
    }
}
