//! Collective autoscaling for microservice applications, modeled as a
//! network of M/M/c queues.
//!
//! The crate is organized bottom-up:
//!
//! - [`topology`]: services, endpoints, cluster states and cost accounting
//! - [`workload`]: workloads, training grids and evaluation schedules
//! - [`queueing`]: analytic M/M/c results (Erlang C, Little's law, bounds)
//! - [`simulator`]: seeded discrete-event simulation of the network
//! - [`autoscalers`]: the reward, the CPU-threshold HPA and the regression baseline
//! - [`cola`]: the bandit trainer and the online controller
//! - [`harness`]: experiments, the exhaustive oracle and CSV reporting

pub mod autoscalers;
pub mod cola;
pub mod error;
pub mod harness;
pub mod queueing;
pub mod seed;
pub mod simulator;
pub mod topology;
pub mod trace;
pub mod workload;

pub use error::{Error, Result};
pub use queueing::{AnalyticLatency, MmcQueue};
pub use simulator::{simulate, SimConfig, SimReport};
pub use topology::{cluster_cost, AppTopology, ClusterState, CostMode, CostModel, EndpointSpec, ServiceSpec};
pub use workload::{Workload, WorkloadGrid, WorkloadSchedule};
pub use autoscalers::{HpaConfig, LinRegModel, Objective, RewardParams};
pub use cola::{ControllerConfig, TrainedPolicy, TrainerConfig};
pub use trace::{ControlMode, EvalTrace};
pub use harness::{run_experiment, ExperimentSpec, PolicySpec, ResultRow};
