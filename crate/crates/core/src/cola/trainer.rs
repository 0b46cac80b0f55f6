use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoscalers::{reward, RewardParams};
use crate::error::{read_json, write_json, Error, Result};
use crate::queueing::analytic_mean_latency;
use crate::seed::derive_seed;
use crate::simulator::{measure_utilization_delta, simulate, SimConfig};
use crate::topology::{cluster_cost, utilizations, AppTopology, ClusterState};
use crate::workload::{grid_points, Workload, WorkloadGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UcbIndex {
    /// `R_a + sqrt(2 ln t) / N_a`, as in the training pseudocode.
    #[default]
    Literal,
    /// `R_a + sqrt(2 ln t / N_a)`.
    Textbook,
}

/// Where trial latencies come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatencySource {
    /// One discrete-event simulation window per trial.
    #[default]
    Simulated,
    /// Closed-form M/M/c mean latency; the objective is always the mean.
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub lambda_initial: f64,
    pub lambda_max: f64,
    /// Bandit count prior; `1/epsilon` is also the default λ increment.
    pub epsilon: f64,
    /// Overrides the `1/epsilon` λ increment.
    #[serde(default)]
    pub lambda_increment: Option<f64>,
    /// Service-selection iterations per λ.
    pub t_iters: usize,
    /// Bandit trials per service optimization.
    pub f_trials: usize,
    /// Half-width of the replica window explored around the current count.
    pub arm_window: u32,
    #[serde(default)]
    pub ucb_index: UcbIndex,
    #[serde(default)]
    pub latency_source: LatencySource,
    /// Start each grid point from the previous point's solution.
    #[serde(default = "yes")]
    pub warm_start: bool,
    pub reward: RewardParams,
}

fn yes() -> bool {
    true
}

impl TrainerConfig {
    pub fn new(reward: RewardParams) -> Self {
        Self {
            lambda_initial: 1.0 / 3.0,
            lambda_max: 30.0,
            epsilon: 0.1,
            lambda_increment: None,
            t_iters: 8,
            f_trials: 10,
            arm_window: 2,
            ucb_index: UcbIndex::Literal,
            latency_source: LatencySource::Simulated,
            warm_start: true,
            reward,
        }
    }

    pub fn increment(&self) -> f64 {
        self.lambda_increment.unwrap_or(1.0 / self.epsilon)
    }

    pub fn max_arms(&self) -> usize {
        2 * self.arm_window as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        if !(self.lambda_initial > 0.0 && self.lambda_initial <= self.lambda_max) {
            return Err(Error::Config("need 0 < lambda_initial <= lambda_max".into()));
        }
        if !(self.epsilon > 0.0 && self.increment() > 0.0) {
            return Err(Error::Config("epsilon and the lambda increment must be positive".into()));
        }
        if self.t_iters == 0 {
            return Err(Error::Config("t_iters must be positive".into()));
        }
        if self.f_trials < self.max_arms() {
            return Err(Error::Config(format!(
                "f_trials ({}) must cover every arm ({})",
                self.f_trials,
                self.max_arms()
            )));
        }
        Ok(())
    }
}

/// Index of the largest utilization increase; ties go to the lowest index.
pub fn select_service(util_delta: &[f64]) -> Result<usize> {
    if util_delta.is_empty() {
        return Err(Error::Domain("no services to select from".into()));
    }
    let mut best = 0;
    for (i, &d) in util_delta.iter().enumerate().skip(1) {
        if d > util_delta[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Replica counts within `arm_window` of the current count, clipped to range.
pub fn arm_set(state: &ClusterState, service: usize, cfg: &TrainerConfig, topo: &AppTopology) -> Vec<u32> {
    let spec = &topo.services()[service];
    let cur = state.replicas()[service];
    let lo = cur.saturating_sub(cfg.arm_window).max(spec.min_replicas);
    let hi = cur.saturating_add(cfg.arm_window).min(spec.max_replicas);
    (lo..=hi).collect()
}

/// Observes one bandit trial.
pub trait ArmEvaluator {
    /// Returns `(reward, latency_ms)` for running with `replicas`.
    fn trial(&mut self, replicas: u32) -> Result<(f64, f64)>;
}

impl<F: FnMut(u32) -> Result<(f64, f64)>> ArmEvaluator for F {
    fn trial(&mut self, replicas: u32) -> Result<(f64, f64)> {
        self(replicas)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UcbOutcome {
    pub best: u32,
    /// Mean latency observed for `best`.
    pub latency_ms: f64,
    /// Trials per arm, aligned with the arm list.
    pub counts: Vec<u32>,
    pub mean_rewards: Vec<f64>,
    pub mean_latencies: Vec<f64>,
    /// Arm chosen at each trial.
    pub history: Vec<u32>,
}

/// UCB1 over `arms` (ascending replica counts) for `f_trials` trials.
///
/// Each arm starts with count `epsilon` and zero mean reward and latency.
/// Untried arms keep a zero mean, which beats any cost-bearing reward, so
/// every arm is tried once before any is repeated.
/// Ties in the index, and in the final choice, go to fewer replicas.
pub fn ucb(
    arms: &[u32],
    f_trials: usize,
    epsilon: f64,
    index: UcbIndex,
    evaluator: &mut impl ArmEvaluator,
) -> Result<UcbOutcome> {
    if arms.is_empty() {
        return Err(Error::Domain("bandit needs at least one arm".into()));
    }
    if f_trials < arms.len() {
        return Err(Error::Config(format!(
            "{f_trials} trials cannot explore {} arms",
            arms.len()
        )));
    }
    let k = arms.len();
    let mut n = vec![epsilon; k];
    let mut r = vec![0.0; k];
    let mut l = vec![0.0; k];
    let mut counts = vec![0u32; k];
    let mut history = Vec::with_capacity(f_trials);
    for t in 1..=f_trials {
        let explore = (2.0 * (t as f64).ln()).sqrt();
        let score = |a: usize| match index {
            UcbIndex::Literal => r[a] + explore / n[a],
            UcbIndex::Textbook => r[a] + (2.0 * (t as f64).ln() / n[a]).sqrt(),
        };
        let mut pick = 0;
        let mut pick_score = score(0);
        for a in 1..k {
            let s = score(a);
            if s > pick_score {
                pick = a;
                pick_score = s;
            }
        }
        let (reward, latency) = evaluator.trial(arms[pick])?;
        n[pick] += 1.0;
        counts[pick] += 1;
        // running means over actual trials; the prior only enters the bonus
        let seen = counts[pick] as f64;
        r[pick] += (reward - r[pick]) / seen;
        l[pick] += (latency - l[pick]) / seen;
        history.push(arms[pick]);
    }
    let best = (0..k)
        .filter(|&a| counts[a] > 0)
        .fold(None, |acc: Option<usize>, a| match acc {
            Some(b) if r[b] >= r[a] => Some(b),
            _ => Some(a),
        })
        .expect("at least one arm was sampled");
    Ok(UcbOutcome {
        best: arms[best],
        latency_ms: l[best],
        counts,
        mean_rewards: r,
        mean_latencies: l,
        history,
    })
}

/// Runs trials and utilization probes against the simulator (or the
/// analytic model), counting every sample window used.
struct Probe<'a> {
    workload: &'a Workload,
    topo: &'a AppTopology,
    cfg: &'a TrainerConfig,
    sim: &'a SimConfig,
    samples: u64,
    cost_units: f64,
}

impl Probe<'_> {
    fn next_sim(&mut self) -> SimConfig {
        self.samples += 1;
        self.sim.with_seed(derive_seed(self.sim.seed, &[self.samples]))
    }

    fn latency(&mut self, state: &ClusterState) -> Result<f64> {
        let cm = &self.cfg.reward.cost_model;
        match self.cfg.latency_source {
            LatencySource::Simulated => {
                let sim = self.next_sim();
                let report = simulate(self.workload, state, self.topo, cm, &sim)?;
                self.cost_units += report.cost_units;
                Ok(self.cfg.reward.objective.latency(&report))
            }
            LatencySource::Analytic => {
                self.samples += 1;
                self.cost_units += cluster_cost(state, self.topo, cm)?;
                Ok(analytic_mean_latency(self.workload, state, self.topo)?.or_timeout(self.sim.timeout_ms))
            }
        }
    }

    fn utilization_delta(&mut self, state: &ClusterState) -> Result<Vec<f64>> {
        let cm = &self.cfg.reward.cost_model;
        let cost = cluster_cost(state, self.topo, cm)?;
        self.cost_units += 2.0 * cost;
        match self.cfg.latency_source {
            LatencySource::Simulated => {
                // one loaded window plus one idle window
                let sim = self.next_sim();
                self.samples += 1;
                measure_utilization_delta(self.workload, state, self.topo, cm, &sim)
            }
            LatencySource::Analytic => {
                self.samples += 2;
                Ok(utilizations(self.workload, state, self.topo)?
                    .into_iter()
                    .map(|u| u.clamp(0.0, 1.0))
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Met,
    TargetUnmet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub state: ClusterState,
    pub latency_ms: f64,
    pub samples: u64,
    pub status: TrainStatus,
    /// λ used by each pass, in order.
    pub lambdas: Vec<f64>,
    /// Cluster cost after each service optimization.
    pub cost_history: Vec<f64>,
    /// Sum of cluster cost over every sample window.
    pub sample_cost_units: f64,
    /// Passes where every bandit trial hit the timeout.
    pub all_arms_unstable: bool,
}

impl OptimizeOutcome {
    pub fn lambda_final(&self) -> f64 {
        *self.lambdas.last().expect("at least one pass")
    }
}

/// Searches for the cheapest state meeting the latency target for one workload.
pub fn optimize_cluster(
    workload: &Workload,
    start: &ClusterState,
    cfg: &TrainerConfig,
    topo: &AppTopology,
    sim: &SimConfig,
) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    sim.validate()?;
    start.validate(topo)?;
    workload.check_dims(topo)?;
    let target = cfg.reward.l_target_ms;
    let mut probe = Probe {
        workload,
        topo,
        cfg,
        sim,
        samples: 0,
        cost_units: 0.0,
    };
    let mut state = start.clone();
    let mut lambda = cfg.lambda_initial;
    let mut lambdas = Vec::new();
    let mut cost_history = Vec::new();
    let mut latency = f64::INFINITY;
    let mut all_unstable = false;
    let status = loop {
        lambdas.push(lambda);
        let params = cfg.reward.with_lambda(lambda);
        let mut met = false;
        for _ in 0..cfg.t_iters {
            let delta = probe.utilization_delta(&state)?;
            let service = select_service(&delta)?;
            let arms = arm_set(&state, service, cfg, topo);
            let base = state.clone();
            let mut evaluator = |replicas: u32| -> Result<(f64, f64)> {
                let candidate = base.with_replicas(service, replicas);
                let l = probe.latency(&candidate)?;
                Ok((reward(&params, l, &candidate, topo)?, l))
            };
            let outcome = ucb(&arms, cfg.f_trials, cfg.epsilon, cfg.ucb_index, &mut evaluator)?;
            // Saturated arms all report the timeout and tie on reward, which
            // would pin the climb at the fewest replicas; step to the top arm.
            let (chosen, chosen_latency) = if outcome.mean_latencies.iter().all(|&l| l >= sim.timeout_ms) {
                all_unstable = true;
                log::warn!("every arm for service {service} timed out at {state}");
                let top = arms.len() - 1;
                (arms[top], outcome.mean_latencies[top])
            } else {
                (outcome.best, outcome.latency_ms)
            };
            state = state.with_replicas(service, chosen);
            latency = chosen_latency;
            cost_history.push(cluster_cost(&state, topo, &cfg.reward.cost_model)?);
            if latency <= target {
                met = true;
                break;
            }
        }
        if met {
            break TrainStatus::Met;
        }
        lambda += cfg.increment();
        if lambda > cfg.lambda_max {
            break TrainStatus::TargetUnmet;
        }
    };
    Ok(OptimizeOutcome {
        state,
        latency_ms: latency,
        samples: probe.samples,
        status,
        lambdas,
        cost_history,
        sample_cost_units: probe.cost_units,
        all_arms_unstable: all_unstable,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub dist_index: usize,
    pub rps: f64,
    pub replicas: ClusterState,
    pub achieved_latency_ms: f64,
    pub samples: u64,
    #[serde(default = "yes")]
    pub target_met: bool,
    #[serde(default)]
    pub lambda_final: f64,
    /// Cluster cost summed over this point's sample windows.
    #[serde(default)]
    pub sample_cost_units: f64,
}

/// Trained mapping from grid workloads to cluster states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub grid: WorkloadGrid,
    pub reward_params: RewardParams,
    /// Sample window length used in training.
    #[serde(default)]
    pub sample_duration_s: f64,
    pub entries: Vec<PolicyEntry>,
}

impl TrainedPolicy {
    /// Entries of one distribution, ascending in rps.
    pub fn entries_for(&self, dist_index: usize) -> Vec<&PolicyEntry> {
        let mut v: Vec<&PolicyEntry> = self.entries.iter().filter(|e| e.dist_index == dist_index).collect();
        v.sort_by(|a, b| a.rps.total_cmp(&b.rps));
        v
    }

    pub fn rps_bounds(&self) -> (f64, f64) {
        self.entries.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
            (lo.min(e.rps), hi.max(e.rps))
        })
    }

    pub fn total_samples(&self) -> u64 {
        self.entries.iter().map(|e| e.samples).sum()
    }

    pub fn validate(&self, topo: &AppTopology) -> Result<()> {
        self.grid.validate()?;
        let expected = self.grid.rps_values().len() * self.grid.distributions.len();
        if self.entries.len() != expected {
            return Err(Error::Config(format!(
                "policy has {} entries, grid has {expected} points",
                self.entries.len()
            )));
        }
        for e in &self.entries {
            e.replicas.validate(topo)?;
            if e.dist_index >= self.grid.distributions.len() {
                return Err(Error::Config(format!("entry references distribution {}", e.dist_index)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Trains every grid point. Distributions train in parallel; within one
/// distribution points run in ascending rps, warm-started from the previous
/// point (the first from `initial`, or the minimum state).
pub fn train(
    grid: &WorkloadGrid,
    cfg: &TrainerConfig,
    topo: &AppTopology,
    sim: &SimConfig,
    initial: Option<&ClusterState>,
) -> Result<TrainedPolicy> {
    cfg.validate()?;
    let points = grid_points(grid)?;
    let per_dist = grid.rps_values().len();
    let first = match initial {
        Some(s) => {
            s.validate(topo)?;
            s.clone()
        }
        None => topo.min_state(),
    };
    let chains: Vec<Result<Vec<PolicyEntry>>> = points
        .par_chunks(per_dist)
        .enumerate()
        .map(|(d, chain)| {
            let mut start = first.clone();
            let mut out = Vec::with_capacity(chain.len());
            for (k, w) in chain.iter().enumerate() {
                let point_sim = sim.with_seed(derive_seed(sim.seed, &[d as u64, k as u64]));
                let res = optimize_cluster(w, &start, cfg, topo, &point_sim)?;
                if res.status == TrainStatus::TargetUnmet {
                    log::warn!("target unmet at rps {} (distribution {d})", w.total_rps());
                }
                if cfg.warm_start {
                    start = res.state.clone();
                }
                out.push(PolicyEntry {
                    dist_index: d,
                    rps: w.total_rps(),
                    achieved_latency_ms: res.latency_ms,
                    samples: res.samples,
                    target_met: res.status == TrainStatus::Met,
                    lambda_final: res.lambda_final(),
                    sample_cost_units: res.sample_cost_units,
                    replicas: res.state,
                });
            }
            Ok(out)
        })
        .collect();
    let mut entries = Vec::with_capacity(points.len());
    for chain in chains {
        entries.extend(chain?);
    }
    Ok(TrainedPolicy {
        grid: grid.clone(),
        reward_params: cfg.reward.clone(),
        sample_duration_s: sim.duration_s,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoscalers::Objective;
    use crate::topology::{bundled, CostModel};

    fn cfg() -> TrainerConfig {
        TrainerConfig::new(RewardParams::new(50.0, 5.0, Objective::Median, CostModel::default()).unwrap())
    }

    #[test]
    fn select_service_examples() {
        assert_eq!(select_service(&[0.2, 0.7, 0.1]).unwrap(), 1);
        assert_eq!(select_service(&[0.4, 0.4]).unwrap(), 0);
        assert_eq!(select_service(&[0.0, 0.0, 0.0]).unwrap(), 0);
        assert!(select_service(&[]).is_err());
    }

    #[test]
    fn arm_set_examples() {
        let topo = bundled::simple_web_server();
        let c = cfg();
        assert_eq!(arm_set(&ClusterState::new(vec![3]), 0, &c, &topo), vec![1, 2, 3, 4, 5]);
        assert_eq!(arm_set(&ClusterState::new(vec![1]), 0, &c, &topo), vec![1, 2, 3]);
        assert_eq!(arm_set(&ClusterState::new(vec![30]), 0, &c, &topo), vec![28, 29, 30]);
    }

    fn fixed(rewards: &'static [f64]) -> impl FnMut(u32) -> Result<(f64, f64)> {
        move |a: u32| Ok((rewards[a as usize], 10.0 * a as f64))
    }

    #[test]
    fn ucb_finds_noiseless_best_arm() {
        let arms = [0, 1, 2];
        let out = ucb(&arms, 10, 0.1, UcbIndex::Literal, &mut fixed(&[-3.0, -1.0, -2.0])).unwrap();
        assert_eq!(out.best, 1);
        assert_eq!(out.latency_ms, 10.0);
        assert!(out.counts.iter().all(|&c| c >= 1));
        assert!(out.counts[1] as f64 > 10.0 / 3.0);
        let textbook = ucb(&arms, 10, 0.1, UcbIndex::Textbook, &mut fixed(&[-3.0, -1.0, -2.0])).unwrap();
        assert_eq!(textbook.best, 1);
    }

    #[test]
    fn ucb_explores_every_arm_first() {
        let out = ucb(&[0, 1, 2, 3, 4], 10, 0.1, UcbIndex::Literal, &mut fixed(&[-5.0, -4.0, -1.0, -2.0, -3.0])).unwrap();
        // t=8: arm 2 scores -1 + sqrt(2 ln 8)/3.1 = -0.342, arm 3 scores -2 + sqrt(2 ln 8)/1.1 = -0.146
        assert_eq!(out.history, vec![0, 1, 2, 3, 4, 2, 2, 3, 2, 2]);
        assert_eq!(out.best, 2);
        assert_eq!(out.counts, vec![1, 1, 5, 2, 1]);
    }

    #[test]
    fn ucb_ties_prefer_fewer_replicas() {
        let out = ucb(&[2, 3, 4], 6, 0.1, UcbIndex::Literal, &mut |_a: u32| Ok((-7.0, 1.0))).unwrap();
        assert_eq!(out.best, 2);
    }

    #[test]
    fn ucb_requires_enough_trials() {
        assert!(ucb(&[1, 2, 3], 2, 0.1, UcbIndex::Literal, &mut |_a: u32| Ok((0.0, 0.0))).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.f_trials = 4;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.lambda_initial = 40.0;
        assert!(c.validate().is_err());
        assert_eq!(cfg().increment(), 10.0);
    }

    #[test]
    fn loose_target_returns_min_state() {
        let topo = bundled::bookinfo4();
        let mut c = cfg();
        c.reward.l_target_ms = 1e9;
        let w = Workload::new(50.0, vec![1.0]).unwrap();
        let out = optimize_cluster(&w, &topo.min_state(), &c, &topo, &SimConfig::new(10.0, 1)).unwrap();
        assert_eq!(out.status, TrainStatus::Met);
        assert_eq!(out.state, topo.min_state());
        assert_eq!(out.lambdas, vec![1.0 / 3.0]);
    }

    #[test]
    fn impossible_target_exhausts_lambda() {
        let topo = bundled::simple_web_server();
        let mut c = cfg();
        c.reward.l_target_ms = 0.01;
        c.t_iters = 2;
        let w = Workload::new(300.0, vec![1.0]).unwrap();
        let out = optimize_cluster(&w, &topo.min_state(), &c, &topo, &SimConfig::new(5.0, 1)).unwrap();
        assert_eq!(out.status, TrainStatus::TargetUnmet);
        let last = out.lambda_final();
        assert!(last <= c.lambda_max && last + c.increment() > c.lambda_max);
        for w in out.lambdas.windows(2) {
            assert!((w[1] - w[0] - c.increment()).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_json_roundtrip() {
        let topo = bundled::simple_web_server();
        let grid = WorkloadGrid::new(100.0, 300.0, 100.0, vec![vec![1.0]]).unwrap();
        let mut c = cfg();
        c.latency_source = LatencySource::Analytic;
        let policy = train(&grid, &c, &topo, &SimConfig::new(10.0, 2), None).unwrap();
        policy.validate(&topo).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        policy.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["grid", "reward_params", "entries", "dist_index", "replicas", "achieved_latency_ms", "samples"] {
            assert!(text.contains(key), "missing {key}");
        }
        assert_eq!(TrainedPolicy::load(&path).unwrap(), policy);
    }
}
