//! Experiment drivers.

mod convergence;
mod dynamics;
mod efficiency;

pub use convergence::{run_convergence, steps_to_stability, ConvergenceParams, ConvergenceReport};
pub use dynamics::{
    recovery_time, run_delivery, run_failure_recovery, run_partition, DeliveryParams, DeliveryResult, FailureParams,
    FailureResult, PartitionParams, PartitionResult,
};
pub use efficiency::{run_efficiency, EfficiencyParams, EfficiencyResult, RdpSet, SourceOutcome};
