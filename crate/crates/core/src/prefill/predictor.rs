//! Statistical stand-in for the decode-length classifier.
//!
//! The classifier predicts a bucket `[i*g, (i+1)*g)` of generated tokens.
//! Here it returns the true bucket with probability `accuracy`; otherwise a
//! wrong bucket at distance `k >= 1` with `P(k) = 0.5^k`, in a random
//! direction, reflected when one side runs out of buckets.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::workload::{RequestId, HEAVY_DECODE_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LengthBucket {
    pub index: u32,
    pub granularity: u32,
}

impl LengthBucket {
    pub fn of(len: u32, granularity: u32) -> Self {
        LengthBucket {
            index: len / granularity,
            granularity,
        }
    }

    pub fn lower(&self) -> u32 {
        self.index * self.granularity
    }

    /// Exclusive upper bound.
    pub fn upper(&self) -> u32 {
        (self.index + 1) * self.granularity
    }

    pub fn contains(&self, len: u32) -> bool {
        len >= self.lower() && len < self.upper()
    }

    /// A predicted-heavy decode is one whose lower bound already exceeds the
    /// light limit.
    pub fn is_heavy(&self) -> bool {
        self.lower() >= HEAVY_DECODE_THRESHOLD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    Off,
    /// Runs alongside the main model and taxes its prefill throughput.
    Parallel,
    /// Runs before the main model, adding latency to every round.
    Sequential,
}

/// Measured accuracy for the granularities the classifier was evaluated at.
pub fn default_accuracy(granularity: u32) -> Option<f64> {
    match granularity {
        100 => Some(0.589),
        200 => Some(0.749),
        400 => Some(0.85),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub mode: PredictorMode,
    pub granularity: u32,
    /// Defaults to the measured accuracy for the granularity.
    pub accuracy: Option<f64>,
    pub max_decode_len: u32,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            mode: PredictorMode::Parallel,
            granularity: 200,
            accuracy: None,
            max_decode_len: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorModel {
    pub granularity: u32,
    pub accuracy: f64,
    pub mode: PredictorMode,
    pub max_bucket: u32,
}

impl PredictorModel {
    pub fn from_config(cfg: &PredictorConfig) -> Result<Self, ConfigError> {
        if cfg.granularity == 0 {
            return Err(ConfigError::invalid(
                "policies.predictor.granularity",
                "must be >= 1",
            ));
        }
        let accuracy = match cfg.accuracy.or_else(|| default_accuracy(cfg.granularity)) {
            Some(p) => p,
            None => {
                return Err(ConfigError::invalid(
                    "policies.predictor.accuracy",
                    format!("no default accuracy for granularity {}", cfg.granularity),
                ))
            }
        };
        if !(accuracy > 0.0 && accuracy <= 1.0) {
            return Err(ConfigError::invalid(
                "policies.predictor.accuracy",
                format!("must be in (0, 1], got {accuracy}"),
            ));
        }
        Ok(PredictorModel {
            granularity: cfg.granularity,
            accuracy,
            mode: cfg.mode,
            max_bucket: cfg.max_decode_len / cfg.granularity,
        })
    }

    pub fn oracle(granularity: u32) -> Self {
        PredictorModel {
            granularity,
            accuracy: 1.0,
            mode: PredictorMode::Parallel,
            max_bucket: 2048 / granularity,
        }
    }

    pub fn is_on(&self) -> bool {
        self.mode != PredictorMode::Off
    }

    pub fn predict<R: Rng + ?Sized>(&self, true_len: u32, rng: &mut R) -> LengthBucket {
        let truth = LengthBucket::of(true_len, self.granularity).index;
        let hit = self.accuracy >= 1.0 || rng.gen_bool(self.accuracy);
        if hit || self.max_bucket == 0 {
            return LengthBucket {
                index: truth,
                granularity: self.granularity,
            };
        }
        let max = self.max_bucket.max(truth);
        let mut k = 1u32;
        while rng.gen_bool(0.5) {
            k += 1;
        }
        let up = rng.gen_bool(0.5);
        let down_room = truth;
        let up_room = max - truth;
        let k = k.min(down_room.max(up_room));
        let index = match (up, k <= up_room, k <= down_room) {
            (true, true, _) | (false, true, false) => truth + k,
            _ => truth - k,
        };
        LengthBucket {
            index,
            granularity: self.granularity,
        }
    }
}

/// Per-instance predictor with one memoized prediction per request.
#[derive(Debug, Clone)]
pub struct LengthPredictor {
    model: PredictorModel,
    memo: BTreeMap<RequestId, LengthBucket>,
}

impl LengthPredictor {
    pub fn new(model: PredictorModel) -> Self {
        LengthPredictor {
            model,
            memo: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> &PredictorModel {
        &self.model
    }

    pub fn predict_bucket<R: Rng + ?Sized>(
        &mut self,
        id: RequestId,
        true_decode_len: u32,
        rng: &mut R,
    ) -> LengthBucket {
        let model = self.model;
        *self
            .memo
            .entry(id)
            .or_insert_with(|| model.predict(true_decode_len, rng))
    }

    pub fn get(&self, id: RequestId) -> Option<LengthBucket> {
        self.memo.get(&id).copied()
    }
}
