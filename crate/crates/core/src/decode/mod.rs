//! Decode-only instances: paged KV memory, working-set-aware admission and
//! continuous batching.

pub mod core;
pub mod instance;
pub mod policy;
pub mod store;

pub use self::core::{
    admit, Admission, DecodeCore, DecodeStats, DecodingRequest, Growth, IterationRecord,
};
pub use instance::DecodeInstance;
pub use policy::{DecodeConfig, DecodePolicy, ReserveBound};
pub use store::PagedKvStore;
