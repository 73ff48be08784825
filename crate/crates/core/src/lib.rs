//! Discrete-event simulator for LLM inference serving with prefill and
//! decode split across separate instances, plus a coupled baseline that
//! runs both phases on the same instance.
//!
//! [`run_experiment`] is the usual entry point; [`simulate`] runs a cluster
//! over an explicit request list.

pub mod cluster;
pub mod config;
pub mod control;
pub mod cost;
pub mod coupled;
pub mod decode;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod prefill;
pub mod workload;

pub use cluster::{simulate, ClusterSpec, RunOutput, SystemKind};
pub use config::{read_summary, run_experiment, write_outputs, Experiment, ExperimentConfig};
pub use control::{InstanceId, Role};
pub use cost::{CostModel, CostModelParams, NetworkPreset};
pub use engine::SimTime;
pub use error::{ConfigError, Error, SimError, TraceError};
pub use metrics::{compare, Comparison, CsvRow, RunSummary};
pub use workload::{Request, RequestId, WorkloadClass, WorkloadSpec};
