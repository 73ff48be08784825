use std::collections::BTreeMap;

use crate::control::load::InstanceId;
use crate::engine::SimTime;
use crate::error::SimError;
use crate::workload::{Phase, Request, RequestId};

/// Control-plane view of one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRow {
    pub id: RequestId,
    pub arrival: SimTime,
    pub prompt_len: u32,
    pub decode_len: u32,
    pub sla: Option<SimTime>,
    pub phase: Phase,
    pub prefill_instance: Option<InstanceId>,
    pub decode_instance: Option<InstanceId>,
    pub prefill_start: Option<SimTime>,
    pub first_token: Option<SimTime>,
    pub completion: Option<SimTime>,
    pub predicted_bucket: Option<u32>,
    pub swaps: u32,
    pub rerouted: bool,
}

impl RequestRow {
    pub fn ttft(&self) -> Option<SimTime> {
        self.first_token.map(|t| t - self.arrival)
    }

    pub fn jct(&self) -> Option<SimTime> {
        self.completion.map(|t| t - self.arrival)
    }

    pub fn prefill_wait(&self) -> Option<SimTime> {
        self.prefill_start.map(|t| t - self.arrival)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RequestStatusTable {
    rows: BTreeMap<RequestId, RequestRow>,
    completed: usize,
}

impl RequestStatusTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, req: &Request) -> Result<(), SimError> {
        let row = RequestRow {
            id: req.id,
            arrival: req.arrival,
            prompt_len: req.prompt_len,
            decode_len: req.true_decode_len,
            sla: req.sla,
            phase: Phase::Queued,
            prefill_instance: None,
            decode_instance: None,
            prefill_start: None,
            first_token: None,
            completion: None,
            predicted_bucket: None,
            swaps: 0,
            rerouted: false,
        };
        if self.rows.insert(req.id, row).is_some() {
            return Err(SimError::Invariant(format!(
                "request {} inserted twice",
                req.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn all_done(&self) -> bool {
        self.completed == self.rows.len()
    }

    pub fn get(&self, id: RequestId) -> Option<&RequestRow> {
        self.rows.get(&id)
    }

    pub fn row_mut(&mut self, id: RequestId) -> Result<&mut RequestRow, SimError> {
        self.rows
            .get_mut(&id)
            .ok_or_else(|| SimError::Invariant(format!("unknown request {id}")))
    }

    pub fn rows(&self) -> impl Iterator<Item = &RequestRow> {
        self.rows.values()
    }

    /// Forward-only phase change.
    pub fn advance(&mut self, id: RequestId, to: Phase) -> Result<(), SimError> {
        let row = self.row_mut(id)?;
        if to < row.phase {
            return Err(SimError::Invariant(format!(
                "request {id} moved back from {:?} to {to:?}",
                row.phase
            )));
        }
        row.phase = to;
        Ok(())
    }

    /// The request's final prompt chunk finished at `at`.
    pub fn record_first_token(&mut self, id: RequestId, at: SimTime) -> Result<(), SimError> {
        let row = self.row_mut(id)?;
        if row.first_token.is_some() {
            return Err(SimError::Invariant(format!(
                "request {id} produced a first token twice"
            )));
        }
        row.first_token = Some(at);
        Ok(())
    }

    pub fn record_completion(
        &mut self,
        id: RequestId,
        at: SimTime,
    ) -> Result<&RequestRow, SimError> {
        let row = self
            .rows
            .get_mut(&id)
            .ok_or_else(|| SimError::Invariant(format!("unknown request {id}")))?;
        if row.completion.is_some() || row.phase == Phase::Done {
            return Err(SimError::Invariant(format!("request {id} completed twice")));
        }
        if row.first_token.is_none() {
            return Err(SimError::Invariant(format!(
                "request {id} completed before its first token"
            )));
        }
        row.phase = Phase::Done;
        row.completion = Some(at);
        self.completed += 1;
        Ok(row)
    }
}

/// Least-queued-prompt-tokens routing; ties go to the lower id.
pub fn route_request(loads: &[(InstanceId, u64)]) -> Option<InstanceId> {
    loads
        .iter()
        .min_by_key(|(id, tokens)| (*tokens, *id))
        .map(|(id, _)| *id)
}
