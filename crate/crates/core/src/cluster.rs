//! The simulated cluster: instances, control plane and the event handlers
//! that tie them together.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{
    choose_flip, route_request, BusyLog, DecodeLoad, FlipCandidate, FlipPolicy, FlipRecord,
    InstanceId, RequestRow, RequestStatusTable, Role,
};
use crate::cost::CostModel;
use crate::coupled::{CoupledConfig, CoupledInstance};
use crate::decode::{DecodeConfig, DecodeInstance, DecodeStats, DecodingRequest, IterationRecord};
use crate::engine::{
    Engine, EntityId, Event, EventHandle, EventKind, RngStreams, SimTime, StreamId, TraceRecord,
};
use crate::error::SimError;
use crate::prefill::{
    record_dispatch, DispatchPolicy, Dispatcher, LengthBucket, LengthPredictor, PredictorConfig,
    PredictorModel, PrefillInstance, PrefillJob, PrefillPolicy, PrefillStats,
};
use crate::workload::{Phase, Request, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Disaggregated,
    Coupled,
}

pub const DEFAULT_MONITOR_PERIOD: SimTime = SimTime::from_ms(100);

/// Everything needed to build a cluster.
#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub system: SystemKind,
    pub n_prefill: u32,
    pub n_decode: u32,
    pub n_coupled: u32,
    pub prefill: PrefillPolicy,
    pub decode: DecodeConfig,
    pub dispatch: DispatchPolicy,
    pub predictor: PredictorConfig,
    pub flip: FlipPolicy,
    pub coupled: CoupledConfig,
    pub cost: CostModel,
    pub monitor_period: SimTime,
    pub max_events: u64,
    pub trace: bool,
    pub record_iterations: bool,
}

impl ClusterSpec {
    pub fn disaggregated(n_prefill: u32, n_decode: u32) -> Self {
        ClusterSpec {
            system: SystemKind::Disaggregated,
            n_prefill,
            n_decode,
            n_coupled: 0,
            prefill: PrefillPolicy::default(),
            decode: DecodeConfig::default(),
            dispatch: DispatchPolicy::PowerOfTwo,
            predictor: PredictorConfig::default(),
            flip: FlipPolicy::disabled(),
            coupled: CoupledConfig::default(),
            cost: CostModel::default(),
            monitor_period: DEFAULT_MONITOR_PERIOD,
            max_events: crate::engine::DEFAULT_MAX_EVENTS,
            trace: false,
            record_iterations: false,
        }
    }

    pub fn coupled(n: u32) -> Self {
        ClusterSpec {
            system: SystemKind::Coupled,
            n_prefill: 0,
            n_decode: 0,
            n_coupled: n,
            ..Self::disaggregated(0, 0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEvent {
    Arrival(RequestId),
    ChunkDone,
    KvArrived {
        request: RequestId,
        source: InstanceId,
    },
    DecodeStepDone,
    CoupledStepDone,
    MonitorTick,
    FlipComplete,
}

impl EventKind for SimEvent {
    fn kind(&self) -> &'static str {
        match self {
            SimEvent::Arrival(_) => "arrival",
            SimEvent::ChunkDone => "chunk_done",
            SimEvent::KvArrived { .. } => "kv_arrived",
            SimEvent::DecodeStepDone => "decode_step_done",
            SimEvent::CoupledStepDone => "coupled_step_done",
            SimEvent::MonitorTick => "monitor_tick",
            SimEvent::FlipComplete => "flip_complete",
        }
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Prefill(PrefillInstance, Dispatcher),
    Decode(DecodeInstance),
    Coupled(CoupledInstance),
}

impl Slot {
    fn role(&self) -> Role {
        match self {
            Slot::Prefill(..) => Role::Prefill,
            Slot::Decode(_) => Role::Decode,
            Slot::Coupled(_) => Role::Coupled,
        }
    }
}

/// Work counters of one role epoch of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpochStats {
    Prefill(PrefillStats),
    Decode(DecodeStats),
}

/// A stretch of time during which an instance held one role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub role: Role,
    pub start: SimTime,
    pub end: Option<SimTime>,
    pub first_work: Option<SimTime>,
    pub last_work: Option<SimTime>,
    pub busy_us: u64,
    pub stats: Option<EpochStats>,
}

impl Epoch {
    /// Wall time charged to the workload: first work start to last work end.
    pub fn usage(&self) -> SimTime {
        match (self.first_work, self.last_work) {
            (Some(s), Some(e)) => e - s,
            _ => SimTime::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub id: InstanceId,
    pub epochs: Vec<Epoch>,
}

#[derive(Debug, Clone, Copy)]
struct PendingFlip {
    to: Role,
    requested_at: SimTime,
    drained_at: Option<SimTime>,
}

#[derive(Debug, Clone)]
struct InstanceState {
    slot: Slot,
    role_since: SimTime,
    busy: BusyLog,
    closed: Vec<Epoch>,
    flip: Option<PendingFlip>,
}

impl InstanceState {
    fn new(slot: Slot) -> Self {
        InstanceState {
            slot,
            role_since: SimTime::ZERO,
            busy: BusyLog::default(),
            closed: Vec::new(),
            flip: None,
        }
    }

    fn epoch(&self, end: Option<SimTime>) -> Epoch {
        let stats = match &self.slot {
            Slot::Prefill(p, _) => Some(EpochStats::Prefill(*p.stats())),
            Slot::Decode(d) => Some(EpochStats::Decode(*d.core().stats())),
            Slot::Coupled(c) => Some(EpochStats::Decode(*c.core().stats())),
        };
        Epoch {
            role: self.slot.role(),
            start: self.role_since,
            end,
            first_work: self.busy.first_start(),
            last_work: self.busy.last_end(),
            busy_us: self.busy.total().0,
            stats,
        }
    }

    fn accepting(&self) -> bool {
        self.flip.is_none()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterCounters {
    pub dispatches: u64,
    pub dispatch_fallbacks: u64,
    pub rerouted: u64,
    pub parked_arrivals: u64,
    pub parked_dispatches: u64,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub system: SystemKind,
    pub rows: Vec<RequestRow>,
    pub instances: Vec<InstanceReport>,
    pub flips: Vec<FlipRecord>,
    pub counters: ClusterCounters,
    pub events_fired: u64,
    pub final_clock: SimTime,
    pub trace: Option<Vec<TraceRecord>>,
    pub iterations: BTreeMap<InstanceId, Vec<IterationRecord>>,
}

struct World {
    spec: ClusterSpec,
    requests: BTreeMap<RequestId, Request>,
    table: RequestStatusTable,
    instances: Vec<InstanceState>,
    predictor: Option<LengthPredictor>,
    predictor_rng: ChaCha8Rng,
    dispatch_rng: ChaCha8Rng,
    flip_rng: ChaCha8Rng,
    parked: VecDeque<RequestId>,
    arrivals_left: usize,
    monitor: Option<EventHandle>,
    flips: Vec<FlipRecord>,
    counters: ClusterCounters,
    iterations: BTreeMap<InstanceId, Vec<IterationRecord>>,
}

fn entity(id: InstanceId) -> EntityId {
    id.entity()
}

impl World {
    fn new(
        spec: ClusterSpec,
        requests: Vec<Request>,
        streams: RngStreams,
    ) -> Result<Self, SimError> {
        // Prefill instances take the low ids, decode instances follow.
        let slots: Vec<Slot> = match spec.system {
            SystemKind::Disaggregated => (0..spec.n_prefill)
                .map(|i| Self::prefill_slot(&spec, InstanceId(i)))
                .chain((spec.n_prefill..spec.n_prefill + spec.n_decode).map(|i| {
                    Slot::Decode(DecodeInstance::new(InstanceId(i), spec.decode, &spec.cost))
                }))
                .collect(),
            SystemKind::Coupled => (0..spec.n_coupled)
                .map(|i| {
                    Slot::Coupled(CoupledInstance::new(
                        InstanceId(i),
                        spec.coupled,
                        &spec.cost,
                    ))
                })
                .collect(),
        };
        let instances: Vec<InstanceState> = slots.into_iter().map(InstanceState::new).collect();
        let predictor = if spec.system == SystemKind::Disaggregated
            && spec.predictor.mode != crate::prefill::PredictorMode::Off
        {
            let model = PredictorModel::from_config(&spec.predictor)
                .map_err(|e| SimError::Invariant(format!("predictor config: {e}")))?;
            Some(LengthPredictor::new(model))
        } else {
            None
        };
        let mut table = RequestStatusTable::new();
        let mut map = BTreeMap::new();
        for r in requests {
            table.insert(&r)?;
            map.insert(r.id, r);
        }
        Ok(World {
            arrivals_left: map.len(),
            spec,
            requests: map,
            table,
            instances,
            predictor,
            predictor_rng: streams.stream(StreamId::Predictor),
            dispatch_rng: streams.stream(StreamId::Dispatcher),
            flip_rng: streams.stream(StreamId::Flip),
            parked: VecDeque::new(),
            monitor: None,
            flips: Vec::new(),
            counters: ClusterCounters::default(),
            iterations: BTreeMap::new(),
        })
    }

    fn prefill_slot(spec: &ClusterSpec, id: InstanceId) -> Slot {
        Slot::Prefill(
            PrefillInstance::new(id, spec.prefill, spec.predictor.mode),
            Dispatcher::new(spec.dispatch),
        )
    }

    fn state(&mut self, id: InstanceId) -> Result<&mut InstanceState, SimError> {
        self.instances
            .get_mut(id.0 as usize)
            .ok_or_else(|| SimError::Invariant(format!("unknown instance {id}")))
    }

    fn handle(&mut self, eng: &mut Engine<SimEvent>, ev: Event<SimEvent>) -> Result<(), SimError> {
        let target = InstanceId(ev.target.0);
        match ev.payload {
            SimEvent::Arrival(id) => {
                self.arrivals_left -= 1;
                self.on_arrival(eng, id)?;
            }
            SimEvent::ChunkDone => self.on_chunk_done(eng, target)?,
            SimEvent::KvArrived { request, source } => {
                self.on_kv_arrived(eng, target, request, source)?
            }
            SimEvent::DecodeStepDone => self.on_decode_step_done(eng, target)?,
            SimEvent::CoupledStepDone => self.on_coupled_step_done(eng, target)?,
            SimEvent::MonitorTick => self.on_monitor_tick(eng)?,
            SimEvent::FlipComplete => self.on_flip_complete(eng, target)?,
        }
        if ev.target != EntityId::CONTROL {
            self.check_instance(target)?;
        }
        if self.table.all_done() {
            if let Some(h) = self.monitor.take() {
                eng.cancel(h);
            }
        }
        Ok(())
    }

    fn on_arrival(&mut self, eng: &mut Engine<SimEvent>, id: RequestId) -> Result<(), SimError> {
        let loads: Vec<(InstanceId, u64)> = self
            .instances
            .iter()
            .filter(|s| s.accepting())
            .filter_map(|s| match &s.slot {
                Slot::Prefill(p, _) => Some((p.id, p.queued_tokens())),
                Slot::Coupled(c) => Some((c.id, c.queued_tokens())),
                Slot::Decode(_) => None,
            })
            .collect();
        let Some(chosen) = route_request(&loads) else {
            self.parked.push_back(id);
            self.counters.parked_arrivals += 1;
            return Ok(());
        };
        self.table.row_mut(id)?.prefill_instance = Some(chosen);
        let req = self.requests[&id].clone();
        match &mut self.state(chosen)?.slot {
            Slot::Prefill(p, _) => {
                p.enqueue(PrefillJob::from(&req));
                self.try_start_prefill(eng, chosen)
            }
            Slot::Coupled(c) => {
                c.enqueue(&req);
                self.try_start_coupled(eng, chosen)
            }
            Slot::Decode(_) => unreachable!("routing only considers prefill-capable instances"),
        }
    }

    fn try_start_prefill(
        &mut self,
        eng: &mut Engine<SimEvent>,
        id: InstanceId,
    ) -> Result<(), SimError> {
        let now = eng.now();
        let cost = self.spec.cost.clone();
        let st = self.state(id)?;
        let Slot::Prefill(p, _) = &mut st.slot else {
            return Ok(());
        };
        let Some(start) = p.start_next(&cost) else {
            return Ok(());
        };
        st.busy.record(now, now + start.latency);
        eng.schedule(now + start.latency, entity(id), SimEvent::ChunkDone)?;
        for r in start.started {
            self.table.advance(r, Phase::Prefilling)?;
            self.table.row_mut(r)?.prefill_start = Some(now);
        }
        Ok(())
    }

    fn on_chunk_done(
        &mut self,
        eng: &mut Engine<SimEvent>,
        id: InstanceId,
    ) -> Result<(), SimError> {
        let now = eng.now();
        let finished = match &mut self.state(id)?.slot {
            Slot::Prefill(p, _) => p.on_chunk_done(),
            _ => {
                return Err(SimError::Invariant(format!(
                    "chunk completion on non-prefill instance {id}"
                )))
            }
        };
        for r in finished {
            self.table.record_first_token(r, now)?;
            self.table.advance(r, Phase::Transferring)?;
            let bucket = self.predict(r);
            self.table.row_mut(r)?.predicted_bucket = bucket.map(|b| b.index);
            self.dispatch_from(eng, id, r)?;
        }
        self.try_start_prefill(eng, id)?;
        self.check_drain(eng, id)
    }

    fn predict(&mut self, id: RequestId) -> Option<LengthBucket> {
        let len = self.requests[&id].true_decode_len;
        self.predictor
            .as_mut()
            .map(|p| p.predict_bucket(id, len, &mut self.predictor_rng))
    }

    fn dispatch_from(
        &mut self,
        eng: &mut Engine<SimEvent>,
        src: InstanceId,
        rid: RequestId,
    ) -> Result<(), SimError> {
        let prompt = self.requests[&rid].prompt_len;
        let bucket = self.predictor.as_ref().and_then(|p| p.get(rid));
        let pages = self.spec.cost.pages_needed(prompt as u64);
        let rng = &mut self.dispatch_rng;
        let st = self
            .instances
            .get_mut(src.0 as usize)
            .ok_or_else(|| SimError::Invariant(format!("unknown instance {src}")))?;
        let Slot::Prefill(p, dispatcher) = &mut st.slot else {
            return Err(SimError::Invariant(format!(
                "dispatch from non-prefill instance {src}"
            )));
        };
        let Some(decision) = dispatcher.dispatch(prompt, bucket, p.snapshot(), rng) else {
            p.parked.push_back(rid);
            self.counters.parked_dispatches += 1;
            return Ok(());
        };
        if let Some(load) = p
            .snapshot_mut()
            .iter_mut()
            .find(|l| l.id == decision.chosen)
        {
            record_dispatch(load, pages, bucket);
        }
        self.counters.dispatches += 1;
        if decision.fallback {
            self.counters.dispatch_fallbacks += 1;
        }
        self.send_kv(eng, src, rid, decision.chosen)
    }

    fn send_kv(
        &mut self,
        eng: &mut Engine<SimEvent>,
        src: InstanceId,
        rid: RequestId,
        dst: InstanceId,
    ) -> Result<(), SimError> {
        let prompt = self.requests[&rid].prompt_len;
        let latency = self.spec.cost.transfer_latency(prompt as u64);
        match &mut self.state(dst)?.slot {
            Slot::Decode(d) => d.expect_transfer(),
            _ => {
                return Err(SimError::Invariant(format!(
                    "KV sent to non-decode instance {dst}"
                )))
            }
        }
        self.table.row_mut(rid)?.decode_instance = Some(dst);
        eng.schedule(
            eng.now() + latency,
            entity(dst),
            SimEvent::KvArrived {
                request: rid,
                source: src,
            },
        )?;
        Ok(())
    }

    fn on_kv_arrived(
        &mut self,
        eng: &mut Engine<SimEvent>,
        dst: InstanceId,
        rid: RequestId,
        source: InstanceId,
    ) -> Result<(), SimError> {
        let req = self.requests[&rid].clone();
        let bucket = self.predictor.as_ref().and_then(|p| p.get(rid));
        let is_decode = matches!(self.state(dst)?.slot, Slot::Decode(_));
        if !is_decode {
            return self.reroute(eng, source, rid);
        }
        if let Slot::Decode(d) = &mut self.state(dst)?.slot {
            d.receive(DecodingRequest::new(
                rid,
                req.prompt_len,
                req.true_decode_len,
                bucket,
            ));
        }
        self.table.advance(rid, Phase::Decoding)?;
        self.try_start_decode(eng, dst)
    }

    /// A transfer landed on an instance that no longer decodes: send it to the
    /// decode instance with the most free memory.
    fn reroute(
        &mut self,
        eng: &mut Engine<SimEvent>,
        source: InstanceId,
        rid: RequestId,
    ) -> Result<(), SimError> {
        let now = eng.now();
        let cost = self.spec.cost.clone();
        let target = self
            .instances
            .iter()
            .filter(|s| s.accepting())
            .filter_map(|s| match &s.slot {
                Slot::Decode(d) => Some(d.load(&cost, now)),
                _ => None,
            })
            .max_by(|a, b| a.free_kv_pages.cmp(&b.free_kv_pages).then(b.id.cmp(&a.id)));
        self.counters.rerouted += 1;
        self.table.row_mut(rid)?.rerouted = true;
        match target {
            Some(load) => self.send_kv(eng, source, rid, load.id),
            None => Err(SimError::Invariant(format!(
                "no decode instance left to take request {rid}"
            ))),
        }
    }

    fn try_start_decode(
        &mut self,
        eng: &mut Engine<SimEvent>,
        id: InstanceId,
    ) -> Result<(), SimError> {
        let now = eng.now();
        let cost = self.spec.cost.clone();
        let record = self.spec.record_iterations;
        let st = self.state(id)?;
        let Slot::Decode(d) = &mut st.slot else {
            return Ok(());
        };
        let Some(rec) = d.start_step(&cost, now)? else {
            return Ok(());
        };
        st.busy.record(now, now + rec.latency);
        eng.schedule(now + rec.latency, entity(id), SimEvent::DecodeStepDone)?;
        if record {
            self.iterations.entry(id).or_default().push(rec);
        }
        Ok(())
    }

    fn on_decode_step_done(
        &mut self,
        eng: &mut Engine<SimEvent>,
        id: InstanceId,
    ) -> Result<(), SimError> {
        let now = eng.now();
        let done = match &mut self.state(id)?.slot {
            Slot::Decode(d) => d.finish_step(),
            _ => {
                return Err(SimError::Invariant(format!(
                    "decode step on non-decode instance {id}"
                )))
            }
        };
        for r in done {
            self.table.row_mut(r.id)?.swaps = r.swaps;
            self.table.record_completion(r.id, now)?;
        }
        self.try_start_decode(eng, id)?;
        self.check_drain(eng, id)
    }

    fn try_start_coupled(
        &mut self,
        eng: &mut Engine<SimEvent>,
        id: InstanceId,
    ) -> Result<(), SimError> {
        let now = eng.now();
        let cost = self.spec.cost.clone();
        let record = self.spec.record_iterations;
        let st = self.state(id)?;
        let Slot::Coupled(c) = &mut st.slot else {
            return Ok(());
        };
        let Some(step) = c.start_step(&cost, now)? else {
            return Ok(());
        };
        st.busy.record(now, now + step.record.latency);
        eng.schedule(
            now + step.record.latency,
            entity(id),
            SimEvent::CoupledStepDone,
        )?;
        for r in step.prefilled {
            self.table.advance(r, Phase::Prefilling)?;
            let row = self.table.row_mut(r)?;
            row.prefill_start = Some(now);
            row.decode_instance = Some(id);
        }
        if record {
            self.iterations.entry(id).or_default().push(step.record);
        }
        Ok(())
    }

    fn on_coupled_step_done(
        &mut self,
        eng: &mut Engine<SimEvent>,
        id: InstanceId,
    ) -> Result<(), SimError> {
        let now = eng.now();
        let fin = match &mut self.state(id)?.slot {
            Slot::Coupled(c) => c.finish_step(),
            _ => {
                return Err(SimError::Invariant(format!(
                    "coupled step on instance {id}"
                )))
            }
        };
        for r in fin.first_tokens {
            self.table.record_first_token(r, now)?;
            self.table.advance(r, Phase::Decoding)?;
        }
        for r in fin.completed {
            self.table.row_mut(r.id)?.swaps = r.swaps;
            self.table.record_completion(r.id, now)?;
        }
        self.try_start_coupled(eng, id)
    }

    fn decode_loads(&self, now: SimTime) -> Vec<DecodeLoad> {
        self.instances
            .iter()
            .filter(|s| s.accepting())
            .filter_map(|s| match &s.slot {
                Slot::Decode(d) => Some(d.load(&self.spec.cost, now)),
                _ => None,
            })
            .collect()
    }

    fn has_activity(&self) -> bool {
        self.arrivals_left > 0
            || self.instances.iter().any(|s| {
                s.flip.is_some()
                    || match &s.slot {
                        Slot::Prefill(p, _) => !p.is_idle(),
                        Slot::Decode(d) => !d.is_drained(),
                        Slot::Coupled(c) => !c.is_empty(),
                    }
            })
    }

    fn on_monitor_tick(&mut self, eng: &mut Engine<SimEvent>) -> Result<(), SimError> {
        let now = eng.now();
        let loads = self.decode_loads(now);
        let mut with_parked = Vec::new();
        for st in &mut self.instances {
            if let Slot::Prefill(p, _) = &mut st.slot {
                p.receive_broadcast(loads.clone(), now);
                if !p.parked.is_empty() && !loads.is_empty() {
                    with_parked.push(p.id);
                }
            }
        }
        for id in with_parked {
            let parked: Vec<RequestId> = match &mut self.state(id)?.slot {
                Slot::Prefill(p, _) => p.parked.drain(..).collect(),
                _ => Vec::new(),
            };
            for rid in parked {
                self.dispatch_from(eng, id, rid)?;
            }
            self.check_drain(eng, id)?;
        }
        self.evaluate_flips(eng)?;
        self.monitor = None;
        if !self.table.all_done() && self.has_activity() {
            self.monitor = Some(eng.schedule(
                now + self.spec.monitor_period,
                EntityId::CONTROL,
                SimEvent::MonitorTick,
            )?);
        }
        Ok(())
    }

    fn evaluate_flips(&mut self, eng: &mut Engine<SimEvent>) -> Result<(), SimError> {
        if !self.spec.flip.enabled || self.spec.system != SystemKind::Disaggregated {
            return Ok(());
        }
        let now = eng.now();
        let window = self.spec.flip.window();
        let from = now.saturating_sub(window);
        let candidates: Vec<FlipCandidate> = self
            .instances
            .iter()
            .enumerate()
            .map(|(i, s)| FlipCandidate {
                id: InstanceId(i as u32),
                role: s.slot.role(),
                utilization: s.busy.utilization(from, now),
                tenure: now.saturating_sub(s.role_since),
                busy_flipping: s.flip.is_some(),
            })
            .collect();
        let Some((id, to)) = choose_flip(&self.spec.flip, &candidates) else {
            return Ok(());
        };
        log::debug!("{now}: flipping {id} to {to}");
        let st = self.state(id)?;
        st.flip = Some(PendingFlip {
            to,
            requested_at: now,
            drained_at: None,
        });
        match &mut st.slot {
            Slot::Prefill(p, _) => p.set_draining(true),
            Slot::Decode(d) => d.set_draining(true),
            Slot::Coupled(_) => unreachable!("coupled instances never flip"),
        }
        if to == Role::Prefill {
            for st in &mut self.instances {
                if let Slot::Prefill(p, _) = &mut st.slot {
                    p.forget_decode(id);
                }
            }
        }
        self.check_drain(eng, id)
    }

    fn check_drain(&mut self, eng: &mut Engine<SimEvent>, id: InstanceId) -> Result<(), SimError> {
        let now = eng.now();
        let (lo, hi) = (self.spec.flip.latency_min_us, self.spec.flip.latency_max_us);
        let st = self.state(id)?;
        let Some(pending) = st.flip.as_mut() else {
            return Ok(());
        };
        if pending.drained_at.is_some() {
            return Ok(());
        }
        let drained = match &st.slot {
            Slot::Prefill(p, _) => p.is_drained(),
            Slot::Decode(d) => d.is_drained(),
            Slot::Coupled(_) => false,
        };
        if !drained {
            return Ok(());
        }
        pending.drained_at = Some(now);
        let switch = SimTime(self.flip_rng.gen_range(lo..=hi));
        eng.schedule(now + switch, entity(id), SimEvent::FlipComplete)?;
        Ok(())
    }

    fn on_flip_complete(
        &mut self,
        eng: &mut Engine<SimEvent>,
        id: InstanceId,
    ) -> Result<(), SimError> {
        let now = eng.now();
        let spec = self.spec.clone();
        let st = self.state(id)?;
        let pending = st.flip.take().ok_or_else(|| {
            SimError::Invariant(format!("flip completion without a flip on {id}"))
        })?;
        let drained_at = pending
            .drained_at
            .expect("flip completes only after draining");
        let from = st.slot.role();
        let epoch = st.epoch(Some(now));
        st.closed.push(epoch);
        st.slot = match pending.to {
            Role::Prefill => Self::prefill_slot(&spec, id),
            Role::Decode => Slot::Decode(DecodeInstance::new(id, spec.decode, &spec.cost)),
            Role::Coupled => unreachable!(),
        };
        st.role_since = now;
        st.busy = BusyLog::default();
        if pending.to == Role::Prefill {
            // Seed the new prefill instance with the current view of decodes.
            let loads = self.decode_loads(now);
            if let Slot::Prefill(p, _) = &mut self.state(id)?.slot {
                p.receive_broadcast(loads, now);
            }
        }
        self.flips.push(FlipRecord {
            instance: id,
            from,
            to: pending.to,
            requested_at: pending.requested_at,
            drained_at,
            completed_at: now,
            switch_us: (now - drained_at).0,
        });
        if pending.to == Role::Prefill {
            let parked: Vec<RequestId> = self.parked.drain(..).collect();
            for rid in parked {
                self.on_arrival(eng, rid)?;
            }
        }
        Ok(())
    }

    fn check_instance(&self, id: InstanceId) -> Result<(), SimError> {
        let Some(st) = self.instances.get(id.0 as usize) else {
            return Ok(());
        };
        match &st.slot {
            Slot::Decode(d) => d.check(),
            Slot::Coupled(c) => c.check(),
            Slot::Prefill(..) => Ok(()),
        }
    }

    fn finish(
        self,
        stats: crate::engine::RunStats,
        trace: Option<Vec<TraceRecord>>,
    ) -> Result<RunOutput, SimError> {
        if !self.table.all_done() {
            return Err(SimError::Invariant(format!(
                "{} of {} requests never completed",
                self.table.len() - self.table.completed(),
                self.table.len()
            )));
        }
        let instances = self
            .instances
            .iter()
            .enumerate()
            .map(|(i, st)| {
                let mut epochs = st.closed.clone();
                epochs.push(st.epoch(None));
                InstanceReport {
                    id: InstanceId(i as u32),
                    epochs,
                }
            })
            .collect();
        Ok(RunOutput {
            system: self.spec.system,
            rows: self.table.rows().cloned().collect(),
            instances,
            flips: self.flips,
            counters: self.counters,
            events_fired: stats.events_fired,
            final_clock: stats.final_clock,
            trace,
            iterations: self.iterations,
        })
    }
}

/// Run `requests` through a cluster built from `spec` until every request
/// completes.
pub fn simulate(
    spec: &ClusterSpec,
    requests: Vec<Request>,
    seed: u64,
) -> Result<RunOutput, SimError> {
    validate_topology(spec)?;
    let mut eng: Engine<SimEvent> = Engine::new().with_max_events(spec.max_events);
    if spec.trace {
        eng = eng.with_trace();
    }
    let mut world = World::new(spec.clone(), requests, RngStreams::new(seed))?;
    if spec.system == SystemKind::Disaggregated {
        world.monitor =
            Some(eng.schedule(SimTime::ZERO, EntityId::CONTROL, SimEvent::MonitorTick)?);
    }
    let mut order: Vec<(SimTime, RequestId)> =
        world.requests.values().map(|r| (r.arrival, r.id)).collect();
    order.sort();
    for (t, id) in order {
        eng.schedule(t, EntityId::CONTROL, SimEvent::Arrival(id))?;
    }
    let stats = eng.run_until(SimTime::MAX, |eng, ev| world.handle(eng, ev))?;
    let trace = eng.take_trace();
    world.finish(stats, trace)
}

fn validate_topology(spec: &ClusterSpec) -> Result<(), SimError> {
    let ok = match spec.system {
        SystemKind::Disaggregated => spec.n_prefill >= 1 && spec.n_decode >= 1,
        SystemKind::Coupled => spec.n_coupled >= 1,
    };
    if !ok {
        return Err(SimError::Invariant(format!(
            "{:?} system needs at least one instance of each role it uses",
            spec.system
        )));
    }
    Ok(())
}
