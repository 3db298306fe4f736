//! Pruning statistics, selection and weight compensation.

mod direction;
mod oneshot;
mod quad;
mod select;
mod stats;

pub use direction::{pruning_direction, structured_direction, woodtaylor_direction, PruneDecision};
pub(crate) use oneshot::unix_now;
pub use oneshot::{
    apply_decision, one_shot_prune, prune_step, structured_prune, Method, OneShotConfig,
    OneShotOutcome, OneShotReport, SamplingRngs, StepConfig,
};
pub use quad::{pruning_scan, quad_scan, ScanPoint};
pub use select::{quotas, select, select_quotas, staged, Quota, Scope};
pub use stats::{
    flops_normalize, stat_magnitude, stat_obd, stat_structured, stat_woodfisher, stat_woodtaylor,
    GroupMode, GroupSpec, PruneStat, StatKind,
};
