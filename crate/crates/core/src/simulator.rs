//! Seeded discrete-event simulation of the service network.
//!
//! Requests arrive as an open Poisson process, pick an endpoint from the
//! workload distribution, and visit the endpoint's services in order. Each
//! service is a FCFS queue in front of `replicas` identical servers with
//! exponential service times. End-to-end latency is the endpoint's base delay
//! plus the sum of sojourns. A request whose latency exceeds the client
//! timeout is recorded at the timeout and counted as a failure; the servers
//! still finish it.
//!
//! Only requests arriving in `[warmup, warmup + duration)` are measured.
//! After the last arrival the network keeps draining until every measured
//! request has either completed or aged past the timeout.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{cluster_cost, AppTopology, ClusterState, CostModel};
use crate::workload::Workload;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Length of the measured window.
    pub duration_s: f64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: f64,
    #[serde(default)]
    pub seed: u64,
    /// Discarded lead-in before the measured window.
    pub warmup_s: f64,
    /// Std-dev of Gaussian noise added to reported latency statistics.
    #[serde(default)]
    pub noise_sd_ms: f64,
    /// Synthetic per-service occupancy added to measured utilization.
    #[serde(default)]
    pub background_util: Vec<f64>,
}

fn default_timeout_ms() -> f64 {
    2000.0
}

impl SimConfig {
    /// Window of `duration_s` with a 10% warmup and the 2000 ms client timeout.
    pub fn new(duration_s: f64, seed: u64) -> Self {
        Self {
            duration_s,
            timeout_ms: default_timeout_ms(),
            seed,
            warmup_s: 0.1 * duration_s,
            noise_sd_ms: 0.0,
            background_util: Vec::new(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Same settings over a different window length, warmup rescaled to 10%.
    pub fn with_duration(&self, duration_s: f64) -> Self {
        Self {
            duration_s,
            warmup_s: 0.1 * duration_s,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::Config("duration_s must be positive".into()));
        }
        if self.timeout_ms.is_nan() || self.timeout_ms <= 0.0 {
            return Err(Error::Config("timeout_ms must be positive".into()));
        }
        if !(self.warmup_s.is_finite() && self.warmup_s >= 0.0) {
            return Err(Error::Config("warmup_s must be nonnegative".into()));
        }
        if self.noise_sd_ms.is_nan() || self.noise_sd_ms < 0.0 {
            return Err(Error::Config("noise_sd_ms must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub median_ms: f64,
    pub p90_ms: f64,
    pub mean_ms: f64,
    pub failures_per_s: f64,
    /// Time-averaged busy fraction per service over the measured window.
    pub mean_utilization: Vec<f64>,
    /// Measured requests finished within the timeout.
    pub completed_requests: u64,
    pub cost_units: f64,
    /// Measured arrivals.
    pub arrivals: u64,
    pub timed_out: u64,
    pub in_flight: u64,
    /// Mean queueing delay per visit, per service.
    pub mean_wait_ms: Vec<f64>,
    /// Measured arrivals per endpoint.
    pub endpoint_counts: Vec<u64>,
}

/// A report together with the per-request latencies it summarizes.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: SimReport,
    /// Measured request latencies in arrival order, timeouts clamped.
    pub latencies_ms: Vec<f64>,
}

/// Nearest-rank percentile: the `⌈q·n⌉`-th smallest sample (1-based, clamped).
pub fn percentile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("percentile {q} outside [0, 1]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(sorted.len(), q)])
}

fn nearest_rank(n: usize, q: f64) -> usize {
    let rank = (q * n as f64).ceil() as usize;
    rank.clamp(1, n) - 1
}

/// Percentiles of an already-sorted, non-empty slice.
pub(crate) fn sorted_percentile(sorted: &[f64], q: f64) -> f64 {
    sorted[nearest_rank(sorted.len(), q)]
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Arrival,
    Departure { request: usize },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Request {
    arrival: f64,
    endpoint: u32,
    hop: u32,
    enqueued_at: f64,
    demand_offset: usize,
    measured: bool,
}

struct Station {
    servers: u32,
    busy: u32,
    queue: VecDeque<usize>,
    busy_area: f64,
    last_change: f64,
    wait_sum: f64,
    wait_count: u64,
}

struct Engine<'a> {
    topo: &'a AppTopology,
    now: f64,
    seq: u64,
    events: BinaryHeap<Event>,
    stations: Vec<Station>,
    requests: Vec<Request>,
    /// Exp(1) service demands; divided by μ of the visited service.
    demands: Vec<f64>,
    window: (f64, f64),
    latencies_ms: Vec<f64>,
    completed: u64,
    timed_out: u64,
    timeout_ms: f64,
}

impl<'a> Engine<'a> {
    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    /// Accumulates busy-server time inside the measured window.
    fn account_busy(&mut self, s: usize) {
        let (lo, hi) = self.window;
        let st = &mut self.stations[s];
        let from = st.last_change.max(lo);
        let to = self.now.min(hi);
        if to > from {
            st.busy_area += st.busy as f64 * (to - from);
        }
        st.last_change = self.now;
    }

    fn service_of(&self, r: usize) -> usize {
        let req = &self.requests[r];
        self.topo.visits(req.endpoint as usize)[req.hop as usize]
    }

    fn start_service(&mut self, r: usize, s: usize) {
        let wait = self.now - self.requests[r].enqueued_at;
        if self.requests[r].measured {
            let st = &mut self.stations[s];
            st.wait_sum += wait;
            st.wait_count += 1;
        }
        let req = &self.requests[r];
        let demand = self.demands[req.demand_offset + req.hop as usize];
        let t = self.now + demand / self.topo.services()[s].mu;
        self.schedule(t, EventKind::Departure { request: r });
    }

    fn enter(&mut self, r: usize) {
        let s = self.service_of(r);
        self.requests[r].enqueued_at = self.now;
        self.account_busy(s);
        let st = &mut self.stations[s];
        if st.busy < st.servers {
            st.busy += 1;
            self.start_service(r, s);
        } else {
            st.queue.push_back(r);
        }
    }

    fn depart(&mut self, r: usize) {
        let s = self.service_of(r);
        self.account_busy(s);
        let next = self.stations[s].queue.pop_front();
        match next {
            Some(n) => self.start_service(n, s),
            None => self.stations[s].busy -= 1,
        }
        let req = &mut self.requests[r];
        req.hop += 1;
        if (req.hop as usize) < self.topo.visits(req.endpoint as usize).len() {
            self.enter(r);
        } else {
            self.finish(r);
        }
    }

    fn finish(&mut self, r: usize) {
        let req = &self.requests[r];
        if !req.measured {
            return;
        }
        let base = self.topo.endpoints()[req.endpoint as usize].base_delay_ms;
        let latency = (self.now - req.arrival) * 1000.0 + base;
        if latency > self.timeout_ms {
            self.timed_out += 1;
            self.latencies_ms.push(self.timeout_ms);
        } else {
            self.completed += 1;
            self.latencies_ms.push(latency);
        }
    }
}

/// Applies `workload` to a cluster in `state` for one sample window.
pub fn simulate(
    workload: &Workload,
    state: &ClusterState,
    topo: &AppTopology,
    cm: &CostModel,
    cfg: &SimConfig,
) -> Result<SimReport> {
    simulate_detailed(workload, state, topo, cm, cfg).map(|o| o.report)
}

pub fn simulate_detailed(
    workload: &Workload,
    state: &ClusterState,
    topo: &AppTopology,
    cm: &CostModel,
    cfg: &SimConfig,
) -> Result<SimOutcome> {
    state.validate(topo)?;
    workload.check_dims(topo)?;
    workload.validate()?;
    cfg.validate()?;
    let cost_units = cluster_cost(state, topo, cm)?;

    let window = (cfg.warmup_s, cfg.warmup_s + cfg.duration_s);
    let timeout_s = cfg.timeout_ms / 1000.0;
    let d = topo.num_services();

    let mut arrivals_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut demand_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    demand_rng.set_stream(1);

    let cumulative: Vec<f64> = workload
        .endpoint_probs()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let pick_endpoint = |u: f64| {
        cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or_else(|| {
                // u landed in rounding slack above the last cumulative value
                workload.endpoint_probs().iter().rposition(|&p| p > 0.0).unwrap_or(0)
            })
    };

    let expected = (workload.total_rps() * window.1 * 1.05) as usize + 16;
    let mut engine = Engine {
        topo,
        now: 0.0,
        seq: 0,
        events: BinaryHeap::new(),
        stations: state
            .replicas()
            .iter()
            .map(|&c| Station {
                servers: c,
                busy: 0,
                queue: VecDeque::new(),
                busy_area: 0.0,
                last_change: 0.0,
                wait_sum: 0.0,
                wait_count: 0,
            })
            .collect(),
        requests: Vec::with_capacity(expected),
        demands: Vec::with_capacity(expected),
        window,
        latencies_ms: Vec::new(),
        completed: 0,
        timed_out: 0,
        timeout_ms: cfg.timeout_ms,
    };
    let mut endpoint_counts = vec![0u64; topo.num_endpoints()];

    let rps = workload.total_rps();
    if rps > 0.0 {
        let first: f64 = Exp1.sample(&mut arrivals_rng);
        engine.schedule(first / rps, EventKind::Arrival);
    }
    let cutoff = window.1 + timeout_s;

    while let Some(ev) = engine.events.pop() {
        if ev.time > cutoff {
            engine.events.push(ev);
            break;
        }
        engine.now = ev.time;
        match ev.kind {
            EventKind::Arrival => {
                let endpoint = pick_endpoint(arrivals_rng.random::<f64>());
                let measured = engine.now >= window.0;
                let r = engine.requests.len();
                let offset = engine.demands.len();
                for _ in topo.visits(endpoint) {
                    let x: f64 = Exp1.sample(&mut demand_rng);
                    engine.demands.push(x);
                }
                engine.requests.push(Request {
                    arrival: engine.now,
                    endpoint: endpoint as u32,
                    hop: 0,
                    enqueued_at: engine.now,
                    demand_offset: offset,
                    measured,
                });
                if measured {
                    endpoint_counts[endpoint] += 1;
                }
                engine.enter(r);
                let gap: f64 = Exp1.sample(&mut arrivals_rng);
                let next = engine.now + gap / rps;
                if next < window.1 {
                    engine.schedule(next, EventKind::Arrival);
                }
            }
            EventKind::Departure { request } => engine.depart(request),
        }
    }

    // Close the utilization integrals at the end of the window.
    engine.now = engine.now.max(window.1);
    for s in 0..d {
        engine.account_busy(s);
    }

    // Measured requests still in the network at the cutoff have exceeded the
    // timeout by construction; anything younger is reported as in flight.
    let mut in_flight = 0;
    let horizon = engine.now;
    let finished = engine.completed + engine.timed_out;
    let arrivals = endpoint_counts.iter().sum::<u64>();
    if finished < arrivals {
        for req in engine.requests.iter().filter(|r| r.measured) {
            let path_len = topo.visits(req.endpoint as usize).len();
            if (req.hop as usize) < path_len {
                let age_ms = (horizon - req.arrival) * 1000.0
                    + topo.endpoints()[req.endpoint as usize].base_delay_ms;
                if age_ms > cfg.timeout_ms {
                    engine.timed_out += 1;
                    engine.latencies_ms.push(cfg.timeout_ms);
                } else {
                    in_flight += 1;
                }
            }
        }
    }

    let mean_utilization = engine
        .stations
        .iter()
        .enumerate()
        .map(|(s, st)| {
            let busy = st.busy_area / (st.servers as f64 * cfg.duration_s);
            let bg = cfg.background_util.get(s).copied().unwrap_or(0.0);
            (busy + bg).clamp(0.0, 1.0)
        })
        .collect();
    let mean_wait_ms = engine
        .stations
        .iter()
        .map(|st| {
            if st.wait_count == 0 {
                0.0
            } else {
                st.wait_sum / st.wait_count as f64 * 1000.0
            }
        })
        .collect();

    let (mut median_ms, mut p90_ms, mut mean_ms) = (0.0, 0.0, 0.0);
    if !engine.latencies_ms.is_empty() {
        let mut sorted = engine.latencies_ms.clone();
        sorted.sort_by(f64::total_cmp);
        median_ms = sorted_percentile(&sorted, 0.5);
        p90_ms = sorted_percentile(&sorted, 0.9);
        mean_ms = sorted.iter().sum::<f64>() / sorted.len() as f64;
    }
    if cfg.noise_sd_ms > 0.0 {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise_rng.set_stream(2);
        let normal = Normal::new(0.0, cfg.noise_sd_ms).expect("sd validated");
        let mut jitter = |v: f64| (v + normal.sample(&mut noise_rng)).clamp(0.0, cfg.timeout_ms);
        median_ms = jitter(median_ms);
        p90_ms = jitter(p90_ms).max(median_ms);
        mean_ms = jitter(mean_ms);
    }

    let report = SimReport {
        median_ms,
        p90_ms,
        mean_ms,
        failures_per_s: engine.timed_out as f64 / cfg.duration_s,
        mean_utilization,
        completed_requests: engine.completed,
        cost_units,
        arrivals,
        timed_out: engine.timed_out,
        in_flight,
        mean_wait_ms,
        endpoint_counts,
    };
    Ok(SimOutcome {
        report,
        latencies_ms: engine.latencies_ms,
    })
}

/// Utilization with the workload applied minus utilization at idle.
pub fn measure_utilization_delta(
    workload: &Workload,
    state: &ClusterState,
    topo: &AppTopology,
    cm: &CostModel,
    cfg: &SimConfig,
) -> Result<Vec<f64>> {
    let loaded = simulate(workload, state, topo, cm, cfg)?;
    let idle = simulate(&workload.with_rps(0.0), state, topo, cm, cfg)?;
    Ok(loaded
        .mean_utilization
        .iter()
        .zip(&idle.mean_utilization)
        .map(|(l, i)| l - i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queueing::analytic_mean_latency;
    use crate::topology::{utilizations, EndpointSpec, ServiceSpec};

    fn single(mu: f64, max: u32, base: f64) -> AppTopology {
        AppTopology::new(
            vec![ServiceSpec::new("A", mu, max)],
            vec![EndpointSpec::new("e", ["A"], base)],
        )
        .unwrap()
    }

    #[test]
    fn percentile_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&xs, 0.5).unwrap(), 3.0);
        assert_eq!(percentile(&xs, 0.9).unwrap(), 5.0);
        assert_eq!(percentile(&xs, 0.0).unwrap(), 1.0);
        for q in [0.0, 0.3, 1.0] {
            assert_eq!(percentile(&[7.0], q).unwrap(), 7.0);
        }
        assert!(matches!(percentile(&[], 0.5), Err(Error::EmptySample)));
        assert!(percentile(&xs, 1.5).is_err());
    }

    #[test]
    fn zero_rps_is_idle() {
        let topo = single(100.0, 4, 0.0);
        let r = simulate(
            &Workload::new(0.0, vec![1.0]).unwrap(),
            &ClusterState::new(vec![2]),
            &topo,
            &CostModel::default(),
            &SimConfig::new(30.0, 1),
        )
        .unwrap();
        assert_eq!(r.completed_requests, 0);
        assert_eq!(r.failures_per_s, 0.0);
        assert_eq!(r.mean_utilization, vec![0.0]);
        assert_eq!(r.cost_units, 30.0);
    }

    #[test]
    fn mean_latency_matches_mm1() {
        let topo = single(100.0, 1, 0.0);
        let w = Workload::new(50.0, vec![1.0]).unwrap();
        let s = ClusterState::new(vec![1]);
        let mut cfg = SimConfig::new(4000.0, 11);
        cfg.warmup_s = 50.0;
        let r = simulate(&w, &s, &topo, &CostModel::default(), &cfg).unwrap();
        assert!(r.completed_requests >= 100_000);
        let expected = analytic_mean_latency(&w, &s, &topo).unwrap().ms().unwrap();
        assert!((r.mean_ms - expected).abs() / expected < 0.03, "{} vs {expected}", r.mean_ms);
    }

    #[test]
    fn overload_hits_timeout() {
        let topo = single(100.0, 1, 0.0);
        let r = simulate(
            &Workload::new(150.0, vec![1.0]).unwrap(),
            &ClusterState::new(vec![1]),
            &topo,
            &CostModel::default(),
            &SimConfig::new(60.0, 3),
        )
        .unwrap();
        assert_eq!(r.median_ms, 2000.0);
        assert!(r.failures_per_s > 0.0);
        assert!(r.p90_ms <= 2000.0);
        assert!(r.mean_utilization[0] > 0.99);
    }

    #[test]
    fn conservation_and_ordering() {
        let topo = single(100.0, 3, 10.0);
        for (rps, c) in [(250.0, 3), (80.0, 1), (400.0, 3)] {
            let r = simulate(
                &Workload::new(rps, vec![1.0]).unwrap(),
                &ClusterState::new(vec![c]),
                &topo,
                &CostModel::default(),
                &SimConfig::new(20.0, 5),
            )
            .unwrap();
            assert_eq!(r.completed_requests + r.timed_out + r.in_flight, r.arrivals);
            assert!(r.median_ms <= r.p90_ms && r.p90_ms <= 2000.0);
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let topo = crate::topology::bundled::boutique11();
        let w = Workload::uniform(300.0, topo.num_endpoints()).unwrap();
        let s = ClusterState::new(vec![4; 11]);
        let cfg = SimConfig::new(20.0, 99);
        let a = simulate(&w, &s, &topo, &CostModel::default(), &cfg).unwrap();
        let b = simulate(&w, &s, &topo, &CostModel::default(), &cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate(&w, &s, &topo, &CostModel::default(), &cfg.with_seed(100)).unwrap();
        assert_ne!(a.median_ms, c.median_ms);
    }

    #[test]
    fn utilization_delta_tracks_offered_load() {
        let topo = AppTopology::new(
            vec![
                ServiceSpec::new("a", 100.0, 10),
                ServiceSpec::new("b", 50.0, 10),
                ServiceSpec::new("c", 100.0, 10),
            ],
            vec![EndpointSpec::new("e", ["a", "b", "c"], 0.0)],
        )
        .unwrap();
        // λ = 80 everywhere; c = [4, 2, 2] gives ρ = [0.2, 0.8, 0.4]
        let w = Workload::new(80.0, vec![1.0]).unwrap();
        let s = ClusterState::new(vec![4, 2, 2]);
        let target = utilizations(&w, &s, &topo).unwrap();
        let delta = measure_utilization_delta(&w, &s, &topo, &CostModel::default(), &SimConfig::new(120.0, 4)).unwrap();
        for (d, t) in delta.iter().zip(&target) {
            assert!((d - t).abs() < 0.05, "{delta:?} vs {target:?}");
        }

        let idle = measure_utilization_delta(&w.with_rps(0.0), &s, &topo, &CostModel::default(), &SimConfig::new(30.0, 4)).unwrap();
        assert_eq!(idle, vec![0.0; 3]);
    }

    #[test]
    fn utilization_delta_subtracts_background() {
        let topo = single(100.0, 2, 0.0);
        let w = Workload::new(100.0, vec![1.0]).unwrap();
        let mut cfg = SimConfig::new(200.0, 8);
        cfg.background_util = vec![0.1];
        let delta = measure_utilization_delta(&w, &ClusterState::new(vec![2]), &topo, &CostModel::default(), &cfg).unwrap();
        assert!((delta[0] - 0.5).abs() < 0.03, "{delta:?}");
    }

    #[test]
    fn noise_keeps_percentiles_ordered() {
        let topo = single(100.0, 2, 0.0);
        let mut cfg = SimConfig::new(20.0, 8);
        cfg.noise_sd_ms = 50.0;
        let r = simulate(&Workload::new(100.0, vec![1.0]).unwrap(), &ClusterState::new(vec![2]), &topo, &CostModel::default(), &cfg).unwrap();
        assert!(r.median_ms <= r.p90_ms);
        assert!(r.median_ms >= 0.0 && r.p90_ms <= cfg.timeout_ms);
    }
}
