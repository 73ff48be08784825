use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{EntityId, SimTime};

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct InstanceId(pub u32);

impl InstanceId {
    pub fn entity(self) -> EntityId {
        EntityId(self.0)
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prefill,
    Decode,
    Coupled,
}

impl Role {
    pub fn opposite(self) -> Role {
        match self {
            Role::Prefill => Role::Decode,
            Role::Decode => Role::Prefill,
            Role::Coupled => Role::Coupled,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Prefill => "prefill",
            Role::Decode => "decode",
            Role::Coupled => "coupled",
        })
    }
}

/// Decode-instance load as broadcast to prefill instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeLoad {
    pub id: InstanceId,
    /// Pages not held by resident requests nor promised to queued arrivals.
    pub free_kv_pages: u64,
    pub used_kv_pages: u64,
    pub page_size: u32,
    /// Predicted-heavy decodes assigned to the instance.
    pub heavy: u32,
    pub light: u32,
    pub snapshot_time: SimTime,
}

impl DecodeLoad {
    pub fn free_kv_tokens(&self) -> u64 {
        self.free_kv_pages * self.page_size as u64
    }
}

/// Load snapshot of one instance, as collected by the cluster monitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum InstanceLoad {
    Prefill {
        id: InstanceId,
        queued_prompt_tokens: u64,
        snapshot_time: SimTime,
    },
    Decode(DecodeLoad),
}

impl InstanceLoad {
    pub fn id(&self) -> InstanceId {
        match self {
            InstanceLoad::Prefill { id, .. } => *id,
            InstanceLoad::Decode(d) => d.id,
        }
    }

    pub fn snapshot_time(&self) -> SimTime {
        match self {
            InstanceLoad::Prefill { snapshot_time, .. } => *snapshot_time,
            InstanceLoad::Decode(d) => d.snapshot_time,
        }
    }
}
