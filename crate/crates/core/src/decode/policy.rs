use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodePolicy {
    /// Admit while there is room for one more token.
    Greedy,
    /// Admit only if the predicted footprint fits beside every running
    /// request's predicted footprint.
    ReserveStatic,
    /// Admit if the predicted footprint fits in the memory projected to be
    /// free when the shortest running job finishes.
    ReserveDynamic,
}

/// Which end of the predicted bucket the reserve policies budget for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReserveBound {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub policy: DecodePolicy,
    pub bound: ReserveBound,
    pub max_batch: Option<u32>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            policy: DecodePolicy::ReserveDynamic,
            bound: ReserveBound::Lower,
            max_batch: None,
        }
    }
}

impl DecodeConfig {
    pub fn new(policy: DecodePolicy) -> Self {
        DecodeConfig {
            policy,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_batch == Some(0) {
            return Err(ConfigError::invalid(
                "policies.decode.max_batch",
                "must be >= 1 when set",
            ));
        }
        Ok(())
    }
}
