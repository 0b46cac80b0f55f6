//! Experiments: head-to-head policy evaluation, the exhaustive oracle and
//! training-cost accounting.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoscalers::{
    lr_train, lr_training_samples, reward, run_hpa, run_lr, window_config, windows, HpaConfig, LinRegModel,
    RewardParams,
};
use crate::cola::{run_controller, train, ControllerConfig, LatencySource, TrainedPolicy, TrainerConfig};
use crate::error::{Error, Result};
use crate::queueing::analytic_mean_latency;
use crate::seed::derive_seed;
use crate::simulator::{simulate, simulate_detailed, SimConfig};
use crate::topology::{cluster_cost, AppTopology, ClusterState, CostModel};
use crate::trace::{ControlMode, EvalTrace, TraceBuilder};
use crate::workload::{Segment, Workload, WorkloadGrid, WorkloadSchedule};

pub const CSV_HEADER: [&str; 7] = ["users", "policy", "median_ms", "p90_ms", "failures_per_s", "cost_units", "samples"];

/// Default cap on the number of states the oracle will enumerate.
pub const ORACLE_STATE_CAP: u128 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "threshold")]
pub enum PolicySpec {
    Cola,
    /// CPU-threshold HPA; the threshold is a utilization fraction.
    Cpu(f64),
    Lr,
    Oracle,
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Cola => f.write_str("cola"),
            PolicySpec::Cpu(t) => write!(f, "cpu-{}", (t * 100.0).round()),
            PolicySpec::Lr => f.write_str("lr"),
            PolicySpec::Oracle => f.write_str("oracle"),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    /// Accepts `cola`, `lr`, `oracle` and `cpu:<T>` where `T` is a percentage
    /// (`cpu:30`) or a fraction (`cpu:0.3`).
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cola" => Ok(PolicySpec::Cola),
            "lr" => Ok(PolicySpec::Lr),
            "oracle" => Ok(PolicySpec::Oracle),
            other => {
                let t = other
                    .strip_prefix("cpu:")
                    .or_else(|| other.strip_prefix("cpu-"))
                    .ok_or_else(|| Error::Config(format!("unknown policy '{s}'")))?;
                let v: f64 = t.parse().map_err(|_| Error::Config(format!("bad CPU threshold '{t}'")))?;
                let frac = if v > 1.0 { v / 100.0 } else { v };
                HpaConfig::new(frac)?;
                Ok(PolicySpec::Cpu(frac))
            }
        }
    }
}

/// Everything needed to run one comparison.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub topology: AppTopology,
    pub schedule: WorkloadSchedule,
    /// Training grid for COLA and the range LR samples from.
    pub grid: WorkloadGrid,
    pub policies: Vec<PolicySpec>,
    /// Evaluation settings; `seed` is the master seed.
    pub sim: SimConfig,
    /// Settings for training sample windows.
    pub train_sim: SimConfig,
    pub trainer: TrainerConfig,
    pub controller: ControllerConfig,
    /// Control period for the CPU-threshold baselines.
    pub hpa_period_s: f64,
    pub lr_samples: usize,
    pub lr_candidates: usize,
    pub oracle_cap: u128,
    /// When set, every segment is an independent run preceded by this many
    /// unmeasured seconds at the same workload. When unset, the schedule is
    /// replayed back to back.
    pub settle_s: Option<f64>,
    /// Trained policies are cached here and reused when present.
    pub policy_cache: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    /// An experiment with defaults for everything except the inputs.
    pub fn new(
        topology: AppTopology,
        schedule: WorkloadSchedule,
        grid: WorkloadGrid,
        policies: Vec<PolicySpec>,
        reward: RewardParams,
        seed: u64,
    ) -> Self {
        Self {
            topology,
            schedule,
            grid,
            policies,
            sim: SimConfig::new(60.0, seed),
            train_sim: SimConfig::new(30.0, derive_seed(seed, &[0x7a11])),
            trainer: TrainerConfig::new(reward),
            controller: ControllerConfig::default(),
            hpa_period_s: 15.0,
            lr_samples: 2_000,
            lr_candidates: 20_000,
            oracle_cap: ORACLE_STATE_CAP,
            settle_s: Some(300.0),
            policy_cache: None,
            out: None,
        }
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.trainer.reward.cost_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::Config("at least one policy is required".into()));
        }
        self.schedule.validate()?;
        self.grid.validate()?;
        self.sim.validate()?;
        self.train_sim.validate()?;
        self.trainer.validate()?;
        self.controller.validate()?;
        if self.settle_s.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("settle time must be a non-negative number of seconds".into()));
        }
        if self.hpa_period_s.is_nan() || self.hpa_period_s <= 0.0 {
            return Err(Error::Config("HPA period must be positive".into()));
        }
        for seg in &self.schedule.segments {
            seg.workload.check_dims(&self.topology)?;
        }
        for d in &self.grid.distributions {
            Workload::new(self.grid.rps_lower, d.clone())?.check_dims(&self.topology)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub users: f64,
    pub policy: String,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub failures_per_s: f64,
    pub cost_units: f64,
    pub samples: u64,
}

/// Per-policy output of an experiment.
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub policy: PolicySpec,
    pub trace: EvalTrace,
    pub samples: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub runs: Vec<PolicyRun>,
}

/// Trains what is needed, evaluates every policy on every schedule segment
/// and writes the CSV if an output file is set. Rows are grouped
/// by segment, with policies in the order given.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let runs = spec
        .policies
        .par_iter()
        .map(|&p| run_policy(spec, p))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (seg_idx, seg) in spec.schedule.segments.iter().enumerate() {
        for run in &runs {
            let s = &run.trace.segments[seg_idx];
            rows.push(ResultRow {
                users: seg.workload.total_rps(),
                policy: run.policy.to_string(),
                median_ms: s.median_ms,
                p90_ms: s.p90_ms,
                failures_per_s: s.failures_per_s,
                cost_units: s.cost_units,
                samples: run.samples,
            });
        }
    }
    if let Some(out) = &spec.out {
        write_csv(&rows, out)?;
    }
    Ok(ExperimentResult { rows, runs })
}

/// Trained artifacts a policy needs before it can be evaluated.
enum Prepared {
    Cola(TrainedPolicy),
    Cpu(HpaConfig),
    Lr(LinRegModel),
    Oracle,
}

fn run_policy(spec: &ExperimentSpec, policy: PolicySpec) -> Result<PolicyRun> {
    let (prepared, mut samples) = match policy {
        PolicySpec::Cola => {
            let trained = cola_policy(spec)?;
            let n = trained.total_samples();
            (Prepared::Cola(trained), n)
        }
        PolicySpec::Cpu(threshold) => {
            let cfg = HpaConfig {
                period_s: spec.hpa_period_s,
                ..HpaConfig::new(threshold)?
            };
            (Prepared::Cpu(cfg), 0)
        }
        PolicySpec::Lr => {
            let model = lr_model(spec)?;
            let n = model.samples as u64;
            (Prepared::Lr(model), n)
        }
        PolicySpec::Oracle => (Prepared::Oracle, 0),
    };
    let Some(settle_s) = spec.settle_s else {
        let trace = evaluate(spec, &prepared, &spec.schedule, &spec.sim, &mut samples)?;
        return Ok(PolicyRun { policy, trace, samples });
    };
    let mut trace = EvalTrace::default();
    for (seg_idx, seg) in spec.schedule.segments.iter().enumerate() {
        let mut segments = Vec::with_capacity(2);
        if settle_s > 0.0 {
            segments.push(Segment {
                workload: seg.workload.clone(),
                duration_s: settle_s,
            });
        }
        segments.push(seg.clone());
        let sim = spec.sim.with_seed(derive_seed(spec.sim.seed, &[0x5e9, seg_idx as u64]));
        let run = evaluate(spec, &prepared, &WorkloadSchedule { segments }, &sim, &mut samples)?;
        let measured = run.segments.len() - 1;
        let offset = trace.windows.last().map_or(0.0, |w| w.start_s + w.duration_s);
        trace.windows.extend(run.windows.into_iter().filter(|w| w.segment == measured).map(|mut w| {
            w.segment = seg_idx;
            w.start_s = offset + w.start_s - settle_s;
            w
        }));
        trace.segments.push(run.segments[measured].clone());
    }
    Ok(PolicyRun { policy, trace, samples })
}

fn evaluate(
    spec: &ExperimentSpec,
    prepared: &Prepared,
    schedule: &WorkloadSchedule,
    sim: &SimConfig,
    samples: &mut u64,
) -> Result<EvalTrace> {
    let topo = &spec.topology;
    let cm = spec.cost_model();
    match prepared {
        Prepared::Cola(trained) => run_controller(&spec.controller, trained, schedule, topo, sim),
        Prepared::Cpu(cfg) => run_hpa(cfg, schedule, topo, cm, sim),
        Prepared::Lr(model) => run_lr(model, schedule, topo, sim, spec.hpa_period_s, spec.lr_candidates),
        Prepared::Oracle => {
            let mut states = Vec::with_capacity(schedule.segments.len());
            for seg in &schedule.segments {
                let ranked = exhaustive_oracle(
                    &seg.workload,
                    topo,
                    &spec.trainer.reward,
                    &spec.train_sim,
                    &OracleConfig {
                        cap: spec.oracle_cap,
                        latency_source: spec.trainer.latency_source,
                    },
                )?;
                *samples += ranked.len() as u64;
                states.push(ranked.into_iter().next().expect("non-empty state space").state);
            }
            run_static(&states, schedule, topo, cm, sim, spec.hpa_period_s)
        }
    }
}

/// Loads the cached policy when it matches the experiment's grid, otherwise trains
/// and (if a cache path is set) saves.
pub fn cola_policy(spec: &ExperimentSpec) -> Result<TrainedPolicy> {
    if let Some(path) = &spec.policy_cache {
        if path.exists() {
            let cached = TrainedPolicy::load(path)?;
            if cached.grid == spec.grid && cached.reward_params == spec.trainer.reward {
                cached.validate(&spec.topology)?;
                return Ok(cached);
            }
            log::info!("cached policy at {} does not match the experiment, retraining", path.display());
        }
    }
    let trained = train(&spec.grid, &spec.trainer, &spec.topology, &spec.train_sim, None)?;
    if let Some(path) = &spec.policy_cache {
        trained.save(path)?;
    }
    Ok(trained)
}

fn lr_model(spec: &ExperimentSpec) -> Result<LinRegModel> {
    let dists = &spec.grid.distributions;
    let mut samples = Vec::with_capacity(spec.lr_samples);
    for (d, dist) in dists.iter().enumerate() {
        let n = spec.lr_samples / dists.len() + usize::from(d < spec.lr_samples % dists.len());
        let sim = spec.train_sim.with_seed(derive_seed(spec.train_sim.seed, &[0x1e, d as u64]));
        samples.extend(lr_training_samples(
            (spec.grid.rps_lower, spec.grid.top_rps()),
            dist,
            &spec.topology,
            &spec.trainer.reward,
            &sim,
            n,
        )?);
    }
    lr_train(&samples, &spec.topology, spec.cost_model())
}

/// Runs one fixed state per segment.
fn run_static(
    states: &[ClusterState],
    schedule: &WorkloadSchedule,
    topo: &AppTopology,
    cm: &CostModel,
    sim: &SimConfig,
    period_s: f64,
) -> Result<EvalTrace> {
    let mut builder = TraceBuilder::default();
    let mut clock = 0.0;
    for (seg_idx, (seg, state)) in schedule.segments.iter().zip(states).enumerate() {
        for (win_idx, len) in windows(seg.duration_s, period_s).enumerate() {
            let cfg = window_config(sim, len, seg_idx, win_idx);
            let outcome = simulate_detailed(&seg.workload, state, topo, cm, &cfg)?;
            builder.push(seg_idx, clock, len, state.clone(), ControlMode::Policy, outcome);
            clock += len;
        }
        builder.close_segment(seg.workload.total_rps());
    }
    Ok(builder.finish())
}

/// Writes rows with a fixed header and fixed-precision numbers so output is
/// byte-stable.
pub fn write_csv_to<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        out.write_record([
            format!("{:.1}", r.users),
            r.policy.clone(),
            format!("{:.3}", r.median_ms),
            format!("{:.3}", r.p90_ms),
            format!("{:.4}", r.failures_per_s),
            format!("{:.3}", r.cost_units),
            r.samples.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(rows, std::io::BufWriter::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub cap: u128,
    pub latency_source: LatencySource,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            cap: ORACLE_STATE_CAP,
            latency_source: LatencySource::Simulated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedState {
    pub state: ClusterState,
    pub reward: f64,
    pub latency_ms: f64,
    pub cost: f64,
}

/// Evaluates every cluster state and ranks them by reward, ties going to
/// the cheaper state and then the lexicographically smaller one. All states
/// share one seed so they see the same arrivals.
pub fn exhaustive_oracle(
    workload: &Workload,
    topo: &AppTopology,
    params: &RewardParams,
    sim: &SimConfig,
    cfg: &OracleConfig,
) -> Result<Vec<RankedState>> {
    params.validate()?;
    sim.validate()?;
    workload.check_dims(topo)?;
    let size = topo.state_space_size();
    if size > cfg.cap {
        return Err(Error::StateSpaceTooLarge { size, cap: cfg.cap });
    }
    let states = enumerate_states(topo);
    let cm = &params.cost_model;
    let mut ranked = states
        .into_par_iter()
        .map(|state| {
            let latency_ms = match cfg.latency_source {
                LatencySource::Simulated => params.objective.latency(&simulate(workload, &state, topo, cm, sim)?),
                LatencySource::Analytic => analytic_mean_latency(workload, &state, topo)?.or_timeout(sim.timeout_ms),
            };
            Ok(RankedState {
                reward: reward(params, latency_ms, &state, topo)?,
                cost: cluster_cost(&state, topo, cm)?,
                latency_ms,
                state,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.reward
            .total_cmp(&a.reward)
            .then(a.cost.total_cmp(&b.cost))
            .then_with(|| a.state.cmp(&b.state))
    });
    Ok(ranked)
}

/// All states in lexicographic order.
fn enumerate_states(topo: &AppTopology) -> Vec<ClusterState> {
    let lo = topo.min_state().0;
    let hi = topo.max_state().0;
    let mut out = Vec::new();
    let mut cur = lo.clone();
    loop {
        out.push(ClusterState::new(cur.clone()));
        let mut i = cur.len();
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < hi[i] {
                cur[i] += 1;
                break;
            }
            cur[i] = lo[i];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingCostReport {
    pub samples: u64,
    pub simulated_s: f64,
    pub cost_unit_hours: f64,
}

pub fn training_cost_report(policy: &TrainedPolicy) -> TrainingCostReport {
    let samples = policy.total_samples();
    let cost_area: f64 = policy.entries.iter().map(|e| e.sample_cost_units).sum();
    TrainingCostReport {
        samples,
        simulated_s: samples as f64 * policy.sample_duration_s,
        cost_unit_hours: cost_area * policy.sample_duration_s / 3600.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakEven {
    Hours(f64),
    Never,
}

impl fmt::Display for BreakEven {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BreakEven::Hours(h) => write!(f, "{h:.2} h"),
            BreakEven::Never => f.write_str("never"),
        }
    }
}

/// Deployment hours after which the savings repay the training cost.
pub fn amortization(report: &TrainingCostReport, baseline_cost_rate: f64, cola_cost_rate: f64) -> BreakEven {
    if report.cost_unit_hours == 0.0 {
        return BreakEven::Hours(0.0);
    }
    let savings = baseline_cost_rate - cola_cost_rate;
    if savings > 0.0 {
        BreakEven::Hours(report.cost_unit_hours / savings)
    } else {
        BreakEven::Never
    }
}
