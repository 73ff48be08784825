//! Global scheduler, cluster monitor and flip machinery.

pub mod flip;
pub mod load;
pub mod status;

pub use flip::{choose_flip, BusyLog, FlipCandidate, FlipPolicy, FlipRecord};
pub use load::{DecodeLoad, InstanceId, InstanceLoad, Role};
pub use status::{route_request, RequestRow, RequestStatusTable};
