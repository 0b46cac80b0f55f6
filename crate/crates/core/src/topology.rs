//! Application model: services, endpoints, cluster states and cost accounting.
//!
//! Each service is a pool of identical replicas with a per-replica service
//! rate `mu` (requests/second). An endpoint is an ordered path of service
//! visits; a request to that endpoint traverses the path sequentially.
//!
//! Topologies load from JSON:
//!
//! ```json
//! {
//!   "services": [{ "name": "web", "mu": 200.0, "max_replicas": 30 }],
//!   "endpoints": [{ "name": "index", "path": ["web"], "base_delay_ms": 40.0 }],
//!   "cost_model": { "mode": "vm_count", "pods_per_vm": 1, "cost_per_unit": 15.0 }
//! }
//! ```
//!
//! `min_replicas` defaults to 1, `base_delay_ms` to 0 and `cost_model` to
//! [`CostModel::default`].

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_json, Error, Result};
use crate::workload::Workload;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    /// Requests per second served by one replica.
    pub mu: f64,
    pub max_replicas: u32,
    #[serde(default = "one")]
    pub min_replicas: u32,
}

fn one() -> u32 {
    1
}

impl ServiceSpec {
    pub fn new(name: impl Into<String>, mu: f64, max_replicas: u32) -> Self {
        Self {
            name: name.into(),
            mu,
            max_replicas,
            min_replicas: 1,
        }
    }

    pub fn with_min_replicas(mut self, min_replicas: u32) -> Self {
        self.min_replicas = min_replicas;
        self
    }

    /// Number of admissible replica counts.
    pub fn range_len(&self) -> u32 {
        self.max_replicas - self.min_replicas + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub name: String,
    /// Service names visited in order. Repeats are allowed.
    pub path: Vec<String>,
    #[serde(default)]
    pub base_delay_ms: f64,
}

impl EndpointSpec {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        path: impl IntoIterator<Item = S>,
        base_delay_ms: f64,
    ) -> Self {
        Self {
            name: name.into(),
            path: path.into_iter().map(Into::into).collect(),
            base_delay_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTopology", into = "RawTopology")]
pub struct AppTopology {
    services: Vec<ServiceSpec>,
    endpoints: Vec<EndpointSpec>,
    /// Service indices visited by each endpoint, resolved once at construction.
    visits: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawTopology {
    services: Vec<ServiceSpec>,
    endpoints: Vec<EndpointSpec>,
}

impl TryFrom<RawTopology> for AppTopology {
    type Error = Error;

    fn try_from(raw: RawTopology) -> Result<Self> {
        AppTopology::new(raw.services, raw.endpoints)
    }
}

impl From<AppTopology> for RawTopology {
    fn from(topo: AppTopology) -> Self {
        RawTopology {
            services: topo.services,
            endpoints: topo.endpoints,
        }
    }
}

impl AppTopology {
    pub fn new(services: Vec<ServiceSpec>, endpoints: Vec<EndpointSpec>) -> Result<Self> {
        if services.is_empty() {
            return Err(Error::InvalidTopology("no services".into()));
        }
        if endpoints.is_empty() {
            return Err(Error::InvalidTopology("no endpoints".into()));
        }
        let mut names = HashSet::new();
        for s in &services {
            if !names.insert(s.name.as_str()) {
                return Err(Error::InvalidTopology(format!(
                    "duplicate service `{}`",
                    s.name
                )));
            }
            if !(s.mu.is_finite() && s.mu > 0.0) {
                return Err(Error::InvalidTopology(format!(
                    "service `{}` has non-positive mu {}",
                    s.name, s.mu
                )));
            }
            if s.min_replicas < 1 || s.min_replicas > s.max_replicas {
                return Err(Error::InvalidTopology(format!(
                    "service `{}` has replica range [{}, {}]",
                    s.name, s.min_replicas, s.max_replicas
                )));
            }
        }
        let mut endpoint_names = HashSet::new();
        let mut visits = Vec::with_capacity(endpoints.len());
        for e in &endpoints {
            if !endpoint_names.insert(e.name.as_str()) {
                return Err(Error::InvalidTopology(format!(
                    "duplicate endpoint `{}`",
                    e.name
                )));
            }
            if e.path.is_empty() {
                return Err(Error::InvalidTopology(format!(
                    "endpoint `{}` has an empty path",
                    e.name
                )));
            }
            if !(e.base_delay_ms.is_finite() && e.base_delay_ms >= 0.0) {
                return Err(Error::InvalidTopology(format!(
                    "endpoint `{}` has negative base delay",
                    e.name
                )));
            }
            let path = e
                .path
                .iter()
                .map(|name| {
                    services.iter().position(|s| &s.name == name).ok_or_else(|| {
                        Error::InvalidTopology(format!(
                            "endpoint `{}` visits unknown service `{name}`",
                            e.name
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            visits.push(path);
        }
        Ok(Self {
            services,
            endpoints,
            visits,
        })
    }

    pub fn services(&self) -> &[ServiceSpec] {
        &self.services
    }

    pub fn endpoints(&self) -> &[EndpointSpec] {
        &self.endpoints
    }

    /// Number of services (D).
    pub fn num_services(&self) -> usize {
        self.services.len()
    }

    /// Number of endpoints (U).
    pub fn num_endpoints(&self) -> usize {
        self.endpoints.len()
    }

    /// Service indices visited by endpoint `e`, in order.
    pub fn visits(&self, e: usize) -> &[usize] {
        &self.visits[e]
    }

    pub fn service_index(&self, name: &str) -> Option<usize> {
        self.services.iter().position(|s| s.name == name)
    }

    pub fn endpoint_index(&self, name: &str) -> Result<usize> {
        self.endpoints
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::UnknownEndpoint(name.to_owned()))
    }

    pub fn min_state(&self) -> ClusterState {
        ClusterState(self.services.iter().map(|s| s.min_replicas).collect())
    }

    pub fn max_state(&self) -> ClusterState {
        ClusterState(self.services.iter().map(|s| s.max_replicas).collect())
    }

    /// Size of the full state space, saturating at `u128::MAX`.
    pub fn state_space_size(&self) -> u128 {
        self.services
            .iter()
            .fold(1u128, |acc, s| acc.saturating_mul(s.range_len() as u128))
    }

    pub fn load(path: &Path) -> Result<TopologyDoc> {
        read_json(path)
    }
}

/// A topology file: the application plus the cost model it is billed under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyDoc {
    #[serde(flatten)]
    pub topology: AppTopology,
    #[serde(default)]
    pub cost_model: CostModel,
}

/// Replica count per service, aligned with [`AppTopology::services`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterState(pub Vec<u32>);

impl ClusterState {
    pub fn new(replicas: Vec<u32>) -> Self {
        Self(replicas)
    }

    pub fn replicas(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_replicas(&self) -> u64 {
        self.0.iter().map(|&r| r as u64).sum()
    }

    /// Copy of this state with one service's replica count replaced.
    pub fn with_replicas(&self, service: usize, replicas: u32) -> Self {
        let mut next = self.clone();
        next.0[service] = replicas;
        next
    }

    pub fn check_dims(&self, topo: &AppTopology) -> Result<()> {
        if self.0.len() != topo.num_services() {
            return Err(Error::DimensionMismatch {
                expected: topo.num_services(),
                got: self.0.len(),
            });
        }
        Ok(())
    }

    pub fn validate(&self, topo: &AppTopology) -> Result<()> {
        self.check_dims(topo)?;
        for (&r, s) in self.0.iter().zip(topo.services()) {
            if r < s.min_replicas || r > s.max_replicas {
                return Err(Error::ReplicasOutOfRange {
                    service: s.name.clone(),
                    replicas: r,
                    min: s.min_replicas,
                    max: s.max_replicas,
                });
            }
        }
        Ok(())
    }

    /// Clamps every coordinate into its service's replica range.
    pub fn clamped(&self, topo: &AppTopology) -> Self {
        Self(
            self.0
                .iter()
                .zip(topo.services())
                .map(|(&r, s)| r.clamp(s.min_replicas, s.max_replicas))
                .collect(),
        )
    }

    /// Materializes a fractional state by per-coordinate ceiling, clamped to range.
    pub fn from_fractional(values: &[f64], topo: &AppTopology) -> Self {
        Self(
            values
                .iter()
                .zip(topo.services())
                .map(|(&v, s)| {
                    // absorb float noise from interpolation before rounding up
                    let c = (v - 1e-9).ceil().max(0.0);
                    (c.min(u32::MAX as f64) as u32).clamp(s.min_replicas, s.max_replicas)
                })
                .collect(),
        )
    }
}

impl fmt::Display for ClusterState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, r) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{r}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Billed per VM; replicas of one service are packed `pods_per_vm` to a VM.
    #[default]
    VmCount,
    /// Billed per pod.
    PodCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    #[serde(default)]
    pub mode: CostMode,
    #[serde(default = "one")]
    pub pods_per_vm: u32,
    #[serde(default = "default_unit_cost")]
    pub cost_per_unit: f64,
}

fn default_unit_cost() -> f64 {
    15.0
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            mode: CostMode::VmCount,
            pods_per_vm: 1,
            cost_per_unit: default_unit_cost(),
        }
    }
}

impl CostModel {
    pub fn new(mode: CostMode, pods_per_vm: u32, cost_per_unit: f64) -> Result<Self> {
        let cm = Self {
            mode,
            pods_per_vm,
            cost_per_unit,
        };
        cm.validate()?;
        Ok(cm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pods_per_vm < 1 {
            return Err(Error::Config("pods_per_vm must be at least 1".into()));
        }
        if !(self.cost_per_unit.is_finite() && self.cost_per_unit > 0.0) {
            return Err(Error::Config("cost_per_unit must be positive".into()));
        }
        Ok(())
    }

    /// VMs needed to host `replicas` pods of a single service.
    pub fn vms_for(&self, replicas: u32) -> u64 {
        (replicas as u64).div_ceil(self.pods_per_vm as u64)
    }

    /// Billable units (VMs or pods) for a state, before the unit coefficient.
    pub fn units(&self, state: &ClusterState) -> u64 {
        match self.mode {
            CostMode::VmCount => state.0.iter().map(|&r| self.vms_for(r)).sum(),
            CostMode::PodCount => state.total_replicas(),
        }
    }
}

/// Cost M(S) of running `state` under `cm`.
pub fn cluster_cost(state: &ClusterState, topo: &AppTopology, cm: &CostModel) -> Result<f64> {
    state.check_dims(topo)?;
    Ok(cm.cost_per_unit * cm.units(state) as f64)
}

/// Per-service arrival rate: total rps times the expected visits per request.
pub fn arrival_rates(workload: &Workload, topo: &AppTopology) -> Result<Vec<f64>> {
    workload.check_dims(topo)?;
    let mut visits_per_request = vec![0.0; topo.num_services()];
    for (e, &p) in workload.endpoint_probs().iter().enumerate() {
        for &s in topo.visits(e) {
            visits_per_request[s] += p;
        }
    }
    Ok(visits_per_request
        .into_iter()
        .map(|v| v * workload.total_rps())
        .collect())
}

/// Offered utilization λ_i / (c_i μ_i) per service. Values above 1 mean overload.
pub fn utilizations(
    workload: &Workload,
    state: &ClusterState,
    topo: &AppTopology,
) -> Result<Vec<f64>> {
    state.check_dims(topo)?;
    let rates = arrival_rates(workload, topo)?;
    Ok(rates
        .iter()
        .zip(state.replicas())
        .zip(topo.services())
        .map(|((&lambda, &c), s)| lambda / (c as f64 * s.mu))
        .collect())
}

/// Bundled desk-scale applications. Service rates and paths are synthetic
/// fixtures, not measurements of the real applications they are named after.
pub mod bundled {
    use super::*;

    pub const NAMES: [&str; 3] = ["sws", "bookinfo4", "boutique11"];

    pub fn by_name(name: &str) -> Option<AppTopology> {
        match name {
            "sws" => Some(simple_web_server()),
            "bookinfo4" => Some(bookinfo4()),
            "boutique11" => Some(boutique11()),
            _ => None,
        }
    }

    /// One service with a 40 ms application pause per request.
    pub fn simple_web_server() -> AppTopology {
        AppTopology::new(
            vec![ServiceSpec::new("web", 200.0, 30)],
            vec![EndpointSpec::new("index", ["web"], 40.0)],
        )
        .expect("bundled topology is valid")
    }

    /// Four services on a single chained endpoint.
    pub fn bookinfo4() -> AppTopology {
        AppTopology::new(
            vec![
                ServiceSpec::new("productpage", 100.0, 20),
                ServiceSpec::new("details", 250.0, 20),
                ServiceSpec::new("reviews", 125.0, 20),
                ServiceSpec::new("ratings", 300.0, 20),
            ],
            vec![EndpointSpec::new(
                "productpage",
                ["productpage", "details", "reviews", "ratings"],
                5.0,
            )],
        )
        .expect("bundled topology is valid")
    }

    /// Eleven services, six endpoints, with a shared frontend.
    pub fn boutique11() -> AppTopology {
        let services = [
            ("frontend", 150.0),
            ("cart", 300.0),
            ("productcatalog", 250.0),
            ("currency", 400.0),
            ("payment", 350.0),
            ("shipping", 300.0),
            ("email", 350.0),
            ("checkout", 200.0),
            ("recommendation", 180.0),
            ("ad", 300.0),
            ("redis", 500.0),
        ]
        .into_iter()
        .map(|(n, mu)| ServiceSpec::new(n, mu, 15))
        .collect();
        let endpoints = vec![
            EndpointSpec::new("index", ["frontend", "currency", "productcatalog", "ad"], 2.0),
            EndpointSpec::new("setCurrency", ["frontend", "currency"], 1.0),
            EndpointSpec::new(
                "browseProduct",
                ["frontend", "productcatalog", "recommendation", "currency", "ad"],
                2.0,
            ),
            EndpointSpec::new("viewCart", ["frontend", "cart", "redis", "shipping"], 2.0),
            EndpointSpec::new("addToCart", ["frontend", "productcatalog", "cart", "redis"], 2.0),
            EndpointSpec::new(
                "checkout",
                [
                    "frontend", "checkout", "cart", "redis", "productcatalog", "currency",
                    "shipping", "payment", "email", "cart", "redis",
                ],
                3.0,
            ),
        ];
        AppTopology::new(services, endpoints).expect("bundled topology is valid")
    }
}
