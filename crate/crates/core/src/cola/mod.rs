//! Bandit-trained collective autoscaling.
//!
//! Training ([`trainer`]) hill-climbs one service at a time: measure which
//! service's utilization rises most under the workload, then run a UCB1
//! bandit over a small window of replica counts for that service. If the
//! latency target stays out of reach, the latency weight λ is raised and the
//! climb repeats. Grid points are trained in ascending rps, each starting
//! from the previous point's answer.
//!
//! Deployment ([`controller`]) maps an observed workload to a state by
//! interpolating the trained grid, and hands control to a CPU-threshold HPA
//! when traffic leaves the trained range.

pub mod controller;
pub mod trainer;

pub use controller::{
    controller_step, interpolate_distribution, interpolate_rps, run_controller, ControllerConfig,
    ScalingAction, ScalingPlan,
};
pub use trainer::{
    arm_set, optimize_cluster, select_service, train, ucb, ArmEvaluator, LatencySource,
    OptimizeOutcome, PolicyEntry, TrainStatus, TrainedPolicy, TrainerConfig, UcbIndex, UcbOutcome,
};
