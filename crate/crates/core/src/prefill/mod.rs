//! Prefill-only instances: local scheduling, chunking, length prediction and
//! dispatch to decode instances.

pub mod chunker;
pub mod dispatcher;
pub mod instance;
pub mod predictor;
pub mod scheduler;

pub use chunker::{chunkify, Chunk, ChunkSlice};
pub use dispatcher::{record_dispatch, DispatchDecision, DispatchPolicy, Dispatcher};
pub use instance::{ChunkStart, PrefillInstance, PrefillStats};
pub use predictor::{
    default_accuracy, LengthBucket, LengthPredictor, PredictorConfig, PredictorMode, PredictorModel,
};
pub use scheduler::{sort_raw_queue, PrefillJob, PrefillOrder, PrefillPolicy};
