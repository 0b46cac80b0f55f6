//! Steady-state M/M/c results and their composition over call paths.
//!
//! Erlang C is evaluated through the Erlang B recurrence
//! `1/B(k) = 1 + (k/a)·1/B(k-1)` with offered load `a = λ/μ`, then
//! `C = B / (1 - ρ(1 - B))`. No factorials or powers appear, so the result
//! stays finite for any server count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{arrival_rates, AppTopology, ClusterState};
use crate::workload::Workload;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmcQueue {
    pub servers: u32,
    /// Arrival rate.
    pub lambda: f64,
    /// Per-server service rate.
    pub mu: f64,
}

impl MmcQueue {
    pub fn new(servers: u32, lambda: f64, mu: f64) -> Result<Self> {
        if servers == 0 {
            return Err(Error::Domain("an M/M/c queue needs at least one server".into()));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Domain(format!("arrival rate {lambda} must be >= 0")));
        }
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::Domain(format!("service rate {mu} must be > 0")));
        }
        Ok(Self {
            servers,
            lambda,
            mu,
        })
    }

    /// Offered load in erlangs, λ/μ.
    pub fn offered_load(&self) -> f64 {
        self.lambda / self.mu
    }

    pub fn rho(&self) -> f64 {
        self.lambda / (self.servers as f64 * self.mu)
    }

    pub fn is_stable(&self) -> bool {
        self.rho() < 1.0
    }

    fn ensure_stable(&self) -> Result<()> {
        if self.is_stable() {
            Ok(())
        } else {
            Err(Error::UnstableQueue { rho: self.rho() })
        }
    }
}

/// Erlang B blocking probability for `servers` servers at offered load `a`.
pub fn erlang_b(servers: u32, a: f64) -> f64 {
    if a <= 0.0 {
        return 0.0;
    }
    let mut inv_b = 1.0;
    for k in 1..=servers {
        inv_b = 1.0 + (k as f64 / a) * inv_b;
    }
    1.0 / inv_b
}

/// Probability that an arrival has to wait.
pub fn erlang_c(q: &MmcQueue) -> Result<f64> {
    q.ensure_stable()?;
    let a = q.offered_load();
    if a == 0.0 {
        return Ok(0.0);
    }
    let b = erlang_b(q.servers, a);
    let c = b / (1.0 - q.rho() * (1.0 - b));
    Ok(c.clamp(0.0, 1.0))
}

/// Mean time spent waiting in queue, in units of 1/μ.
pub fn wq(q: &MmcQueue) -> Result<f64> {
    let c = erlang_c(q)?;
    if c == 0.0 {
        return Ok(0.0);
    }
    Ok(c / (q.servers as f64 * q.mu - q.lambda))
}

/// Mean response time (wait plus one service).
pub fn response_time(q: &MmcQueue) -> Result<f64> {
    Ok(wq(q)? + 1.0 / q.mu)
}

/// Mean queue length, by Little's law.
pub fn lq(q: &MmcQueue) -> Result<f64> {
    Ok(wq(q)? * q.lambda)
}

/// Upper bound on the queue-length reduction from adding one server to an
/// M/M/c queue at utilization `rho`:
/// `[ρ²c/(c+1) + 1/(1-ρ)² + ρ(1-ρ)/(1-ρ)²] · ρ/(c+1)`.
pub fn prop1_bound(servers: u32, rho: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Domain(format!("utilization {rho} must lie in [0, 1)")));
    }
    if servers == 0 {
        return Err(Error::Domain("server count must be positive".into()));
    }
    let c = servers as f64;
    let idle = 1.0 - rho;
    let bracket = rho * rho * c / (c + 1.0) + 1.0 / (idle * idle) + rho * idle / (idle * idle);
    Ok(bracket * rho / (c + 1.0))
}

/// Worst-case multiplicative inflation of queueing delay for a policy
/// interpolated between states trained at `lambda_lower` and `lambda_upper`.
pub fn prop2_ratio(lambda_lower: f64, lambda_upper: f64) -> Result<f64> {
    if !(lambda_lower > 0.0 && lambda_upper > 0.0) {
        return Err(Error::Domain("interpolation rates must be positive".into()));
    }
    if lambda_lower > lambda_upper {
        return Err(Error::Domain(format!(
            "lower rate {lambda_lower} exceeds upper rate {lambda_upper}"
        )));
    }
    Ok(lambda_upper / lambda_lower)
}

/// Analytic latency estimate; overload is a value, not an error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AnalyticLatency {
    Finite(f64),
    Overloaded,
}

impl AnalyticLatency {
    pub fn ms(self) -> Option<f64> {
        match self {
            AnalyticLatency::Finite(ms) => Some(ms),
            AnalyticLatency::Overloaded => None,
        }
    }

    /// Latency with overload mapped to the client timeout.
    pub fn or_timeout(self, timeout_ms: f64) -> f64 {
        match self {
            AnalyticLatency::Finite(ms) => ms.min(timeout_ms),
            AnalyticLatency::Overloaded => timeout_ms,
        }
    }
}

/// Mean end-to-end latency per endpoint in ms: base delay plus one M/M/c
/// sojourn for every visit on the path.
pub fn analytic_endpoint_latencies(
    workload: &Workload,
    state: &ClusterState,
    topo: &AppTopology,
) -> Result<Vec<AnalyticLatency>> {
    state.validate(topo)?;
    let rates = arrival_rates(workload, topo)?;
    let sojourn_ms: Vec<Option<f64>> = topo
        .services()
        .iter()
        .zip(state.replicas())
        .zip(&rates)
        .map(|((s, &c), &lambda)| {
            let q = MmcQueue::new(c, lambda, s.mu).ok()?;
            response_time(&q).ok().map(|t| t * 1000.0)
        })
        .collect();
    Ok(topo
        .endpoints()
        .iter()
        .enumerate()
        .map(|(e, ep)| {
            topo.visits(e)
                .iter()
                .try_fold(ep.base_delay_ms, |acc, &s| sojourn_ms[s].map(|t| acc + t))
                .map_or(AnalyticLatency::Overloaded, AnalyticLatency::Finite)
        })
        .collect())
}

/// Traffic-weighted mean end-to-end latency in ms. Overloaded when any
/// service on an endpoint with nonzero probability is saturated.
pub fn analytic_mean_latency(
    workload: &Workload,
    state: &ClusterState,
    topo: &AppTopology,
) -> Result<AnalyticLatency> {
    let per_endpoint = analytic_endpoint_latencies(workload, state, topo)?;
    let mut mean = 0.0;
    for (lat, &p) in per_endpoint.iter().zip(workload.endpoint_probs()) {
        if p == 0.0 {
            continue;
        }
        match lat {
            AnalyticLatency::Finite(ms) => mean += p * ms,
            AnalyticLatency::Overloaded => return Ok(AnalyticLatency::Overloaded),
        }
    }
    Ok(AnalyticLatency::Finite(mean))
}
