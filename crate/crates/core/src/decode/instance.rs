use crate::control::{DecodeLoad, InstanceId};
use crate::cost::CostModel;
use crate::decode::core::{DecodeCore, DecodingRequest, IterationRecord};
use crate::decode::policy::DecodeConfig;
use crate::engine::SimTime;
use crate::error::SimError;

/// A decode-only instance: the shared decode loop plus the bookkeeping the
/// cluster needs (transfers in flight, draining, load snapshots).
#[derive(Debug, Clone)]
pub struct DecodeInstance {
    pub id: InstanceId,
    core: DecodeCore,
    stepping: bool,
    in_flight: u32,
    draining: bool,
}

impl DecodeInstance {
    pub fn new(id: InstanceId, cfg: DecodeConfig, cost: &CostModel) -> Self {
        DecodeInstance {
            id,
            core: DecodeCore::new(cfg, cost.capacity_pages()),
            stepping: false,
            in_flight: 0,
            draining: false,
        }
    }

    pub fn core(&self) -> &DecodeCore {
        &self.core
    }

    pub fn is_stepping(&self) -> bool {
        self.stepping
    }

    pub fn draining(&self) -> bool {
        self.draining
    }

    pub fn set_draining(&mut self, on: bool) {
        self.draining = on;
    }

    pub fn in_flight(&self) -> u32 {
        self.in_flight
    }

    /// A KV transfer towards this instance has started.
    pub fn expect_transfer(&mut self) {
        self.in_flight += 1;
    }

    /// The transfer landed; the request joins the admission queue.
    pub fn receive(&mut self, req: DecodingRequest) {
        self.in_flight = self.in_flight.saturating_sub(1);
        self.core.enqueue(req);
    }

    /// A transfer that was headed here has been redirected elsewhere.
    pub fn cancel_transfer(&mut self) {
        self.in_flight = self.in_flight.saturating_sub(1);
    }

    pub fn is_drained(&self) -> bool {
        !self.stepping && self.in_flight == 0 && self.core.is_empty()
    }

    /// Start an iteration if idle and there is work. Returns its record.
    pub fn start_step(
        &mut self,
        cost: &CostModel,
        now: SimTime,
    ) -> Result<Option<IterationRecord>, SimError> {
        if self.stepping {
            return Ok(None);
        }
        let rec = self.core.begin_step(cost, now)?;
        self.stepping = rec.is_some();
        Ok(rec)
    }

    pub fn finish_step(&mut self) -> Vec<DecodingRequest> {
        debug_assert!(self.stepping);
        self.stepping = false;
        self.core.finish_step()
    }

    pub fn load(&self, cost: &CostModel, now: SimTime) -> DecodeLoad {
        let store = self.core.store();
        let promised = self.core.promised_pages(cost);
        let (mut heavy, mut light) = (0, 0);
        for r in self.core.running().iter().chain(self.core.waiting()) {
            if r.predicted_heavy() {
                heavy += 1;
            } else {
                light += 1;
            }
        }
        DecodeLoad {
            id: self.id,
            free_kv_pages: store.free().saturating_sub(promised),
            used_kv_pages: store.used(),
            page_size: cost.page_size(),
            heavy,
            light,
            snapshot_time: now,
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        self.core.check()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::policy::DecodePolicy;
    use crate::prefill::predictor::LengthBucket;
    use crate::workload::RequestId;

    #[test]
    fn load_counts_predicted_classes_and_promised_pages() {
        let cost = CostModel::default();
        let mut d = DecodeInstance::new(
            InstanceId(3),
            DecodeConfig::new(DecodePolicy::Greedy),
            &cost,
        );
        d.expect_transfer();
        d.expect_transfer();
        d.receive(DecodingRequest::new(
            RequestId(1),
            160,
            300,
            Some(LengthBucket {
                index: 1,
                granularity: 200,
            }),
        ));
        d.receive(DecodingRequest::new(
            RequestId(2),
            16,
            30,
            Some(LengthBucket {
                index: 0,
                granularity: 200,
            }),
        ));
        let load = d.load(&cost, SimTime(5));
        assert_eq!((load.heavy, load.light), (1, 1));
        assert_eq!(load.free_kv_pages, cost.capacity_pages() - 11);
        assert_eq!(d.in_flight(), 0);
        assert!(!d.is_drained());
    }

    #[test]
    fn drains_after_last_completion() {
        let cost = CostModel::default();
        let mut d = DecodeInstance::new(InstanceId(0), DecodeConfig::default(), &cost);
        d.expect_transfer();
        assert!(!d.is_drained());
        d.receive(DecodingRequest::new(RequestId(1), 10, 2, None));
        d.start_step(&cost, SimTime::ZERO).unwrap().unwrap();
        assert!(
            d.start_step(&cost, SimTime::ZERO).unwrap().is_none(),
            "one iteration at a time"
        );
        assert!(d.finish_step().is_empty());
        d.start_step(&cost, SimTime::ZERO).unwrap().unwrap();
        assert_eq!(d.finish_step().len(), 1);
        assert!(d.is_drained());
    }
}
