use serde::{Deserialize, Serialize};

use crate::autoscalers::{hpa_step, windows, HpaConfig};
use crate::error::{Error, Result};
use crate::simulator::{simulate_detailed, SimConfig};
use crate::topology::{AppTopology, ClusterState};
use crate::trace::{ControlMode, EvalTrace, TraceBuilder};
use crate::workload::{Workload, WorkloadSchedule};

use super::trainer::TrainedPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub metrics_period_s: f64,
    /// Delay between a decision and the new state taking effect.
    pub actuation_lag_s: f64,
    /// Fractional overshoot of the largest trained rps that triggers fallback.
    pub fallback_threshold: f64,
    pub fallback_hpa: HpaConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            metrics_period_s: 60.0,
            actuation_lag_s: 75.0,
            fallback_threshold: 0.30,
            fallback_hpa: HpaConfig::new(0.5).expect("valid threshold"),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.metrics_period_s > 0.0 && self.actuation_lag_s >= 0.0 && self.fallback_threshold > 0.0) {
            return Err(Error::Config("controller periods and threshold must be positive".into()));
        }
        self.fallback_hpa.validate()
    }
}

/// Fractional state for `observed_rps` under one trained distribution,
/// linearly interpolated between the two bracketing grid points.
pub fn interpolate_rps(policy: &TrainedPolicy, dist_index: usize, observed_rps: f64) -> Result<Vec<f64>> {
    let entries = policy.entries_for(dist_index);
    let (first, last) = match (entries.first(), entries.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Config(format!("no trained entries for distribution {dist_index}"))),
    };
    if observed_rps < first.rps || observed_rps > last.rps {
        return Err(Error::OutOfRange {
            rps: observed_rps,
            lower: first.rps,
            upper: last.rps,
        });
    }
    let as_f64 = |s: &ClusterState| s.replicas().iter().map(|&r| r as f64).collect::<Vec<_>>();
    if let Some(hit) = entries.iter().find(|e| e.rps == observed_rps) {
        return Ok(as_f64(&hit.replicas));
    }
    let upper_idx = entries.iter().position(|e| e.rps > observed_rps).expect("inside range");
    let (lower, upper) = (entries[upper_idx - 1], entries[upper_idx]);
    let d_lower = observed_rps - lower.rps;
    let d_upper = upper.rps - observed_rps;
    let w_lower = d_upper / (d_lower + d_upper);
    let w_upper = d_lower / (d_lower + d_upper);
    Ok(lower
        .replicas
        .replicas()
        .iter()
        .zip(upper.replicas.replicas())
        .map(|(&l, &u)| w_lower * l as f64 + w_upper * u as f64)
        .collect())
}

/// Inverse-distance weighted average over every trained distribution of the
/// rps-interpolated states. An exact distribution match wins outright.
pub fn interpolate_distribution(policy: &TrainedPolicy, observed: &Workload) -> Result<Vec<f64>> {
    let per_dist = policy
        .grid
        .distributions
        .iter()
        .enumerate()
        .map(|(j, dist)| {
            let distance = dist
                .iter()
                .zip(observed.endpoint_probs())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok((distance, interpolate_rps(policy, j, observed.total_rps())?))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some((_, exact)) = per_dist.iter().find(|(d, _)| *d == 0.0) {
        return Ok(exact.clone());
    }
    let total_weight: f64 = per_dist.iter().map(|(d, _)| 1.0 / d).sum();
    let dims = per_dist[0].1.len();
    let mut out = vec![0.0; dims];
    for (d, state) in &per_dist {
        let w = (1.0 / d) / total_weight;
        for (o, v) in out.iter_mut().zip(state) {
            *o += w * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScalingAction {
    /// Cluster autoscaler adds VMs before pods that need them are scheduled.
    AddVms { count: u64, lag_s: f64 },
    ScalePods { target: ClusterState, lag_s: f64 },
    /// VMs are cordoned and drained only after their pods are gone.
    RemoveVms { count: u64, lag_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPlan {
    pub mode: ControlMode,
    /// Target state; `None` when the fallback HPA is in charge.
    pub target: Option<ClusterState>,
    pub actions: Vec<ScalingAction>,
}

/// One controller decision for an observed workload.
pub fn controller_step(
    cfg: &ControllerConfig,
    policy: &TrainedPolicy,
    observed: &Workload,
    current: &ClusterState,
    topo: &AppTopology,
) -> Result<ScalingPlan> {
    current.validate(topo)?;
    let (lower, upper) = policy.rps_bounds();
    if observed.total_rps() > (1.0 + cfg.fallback_threshold) * upper {
        return Ok(ScalingPlan {
            mode: ControlMode::Fallback,
            target: None,
            actions: Vec::new(),
        });
    }
    // Between the top of the grid and the fallback threshold (or below the
    // grid) the nearest trained point is used.
    let clamped = observed.with_rps(observed.total_rps().clamp(lower, upper));
    let target = ClusterState::from_fractional(&interpolate_distribution(policy, &clamped)?, topo);

    let cm = &policy.reward_params.cost_model;
    let (mut add, mut remove) = (0u64, 0u64);
    for (&c, &t) in current.replicas().iter().zip(target.replicas()) {
        let (vc, vt) = (cm.vms_for(c), cm.vms_for(t));
        add += vt.saturating_sub(vc);
        remove += vc.saturating_sub(vt);
    }
    let lag_s = cfg.actuation_lag_s;
    let mut actions = Vec::new();
    if add > 0 {
        actions.push(ScalingAction::AddVms { count: add, lag_s });
    }
    if target != *current {
        actions.push(ScalingAction::ScalePods {
            target: target.clone(),
            lag_s,
        });
    }
    if remove > 0 {
        actions.push(ScalingAction::RemoveVms { count: remove, lag_s });
    }
    Ok(ScalingPlan {
        mode: ControlMode::Policy,
        target: Some(target),
        actions,
    })
}

/// Request-weighted average of the schedule's workload over `[from, to)`.
fn observed_workload(schedule: &WorkloadSchedule, from: f64, to: f64) -> Result<Workload> {
    let mut requests = 0.0;
    let mut per_endpoint: Vec<f64> = Vec::new();
    let mut last_probs = None;
    let mut start = 0.0;
    for seg in &schedule.segments {
        let end = start + seg.duration_s;
        let overlap = end.min(to) - start.max(from);
        if overlap > 0.0 {
            let n = seg.workload.total_rps() * overlap;
            requests += n;
            let probs = seg.workload.endpoint_probs();
            per_endpoint.resize(probs.len(), 0.0);
            for (acc, p) in per_endpoint.iter_mut().zip(probs) {
                *acc += n * p;
            }
            last_probs = Some(probs.to_vec());
        }
        start = end;
    }
    let probs = last_probs.ok_or_else(|| Error::InvalidWorkload("empty observation window".into()))?;
    let rps = requests / (to - from);
    if requests > 0.0 {
        let mut dist: Vec<f64> = per_endpoint.iter().map(|c| c / requests).collect();
        let sum: f64 = dist.iter().sum();
        dist.iter_mut().for_each(|p| *p /= sum);
        Workload::new(rps, dist)
    } else {
        Workload::new(0.0, probs)
    }
}

/// Replays a schedule under the trained policy.
///
/// The cluster starts in the policy's state for the first segment's
/// workload. Every metrics period the controller observes the workload of
/// the period just ended and schedules the new target after the actuation
/// lag. While in fallback, the HPA steps every HPA period on the measured
/// utilization of the last window.
pub fn run_controller(
    cfg: &ControllerConfig,
    policy: &TrainedPolicy,
    schedule: &WorkloadSchedule,
    topo: &AppTopology,
    sim: &SimConfig,
) -> Result<EvalTrace> {
    cfg.validate()?;
    schedule.validate()?;
    policy.validate(topo)?;
    let cm = policy.reward_params.cost_model;
    let tick = cfg.fallback_hpa.period_s.min(cfg.metrics_period_s);

    let mut state = topo.min_state();
    let mut mode = ControlMode::Policy;
    if let Some(first) = schedule.segments.first() {
        let plan = controller_step(cfg, policy, &first.workload, &state, topo)?;
        mode = plan.mode;
        if let Some(target) = plan.target {
            state = target;
        }
    }

    let mut pending: Vec<(f64, ClusterState)> = Vec::new();
    let mut builder = TraceBuilder::default();
    let mut clock = 0.0;
    let mut next_metrics = cfg.metrics_period_s;
    const EPS: f64 = 1e-9;

    for (seg_idx, seg) in schedule.segments.iter().enumerate() {
        for (win_idx, len) in windows(seg.duration_s, tick).enumerate() {
            // apply the latest plan whose lag has elapsed
            if let Some(pos) = pending.iter().rposition(|(at, _)| *at <= clock + EPS) {
                state = pending[pos].1.clone();
                pending.drain(..=pos);
            }
            let window_cfg = crate::autoscalers::window_config(sim, len, seg_idx, win_idx);
            let outcome = simulate_detailed(&seg.workload, &state, topo, &cm, &window_cfg)?;
            let util = outcome.report.mean_utilization.clone();
            builder.push(seg_idx, clock, len, state.clone(), mode, outcome);
            clock += len;

            if mode == ControlMode::Fallback {
                state = hpa_step(&cfg.fallback_hpa, &state, &util, topo)?;
            }
            if clock + EPS >= next_metrics {
                let observed = observed_workload(schedule, (clock - cfg.metrics_period_s).max(0.0), clock)?;
                let plan = controller_step(cfg, policy, &observed, &state, topo)?;
                match plan.target {
                    Some(target) => {
                        mode = ControlMode::Policy;
                        pending.push((clock + cfg.actuation_lag_s, target));
                    }
                    None => {
                        if mode != ControlMode::Fallback {
                            log::info!("rps {:.1} beyond trained range, falling back to HPA", observed.total_rps());
                        }
                        mode = ControlMode::Fallback;
                        pending.clear();
                    }
                }
                while next_metrics <= clock + EPS {
                    next_metrics += cfg.metrics_period_s;
                }
            }
        }
        builder.close_segment(seg.workload.total_rps());
    }
    Ok(builder.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoscalers::{Objective, RewardParams};
    use crate::cola::trainer::PolicyEntry;
    use crate::topology::{CostMode, CostModel, EndpointSpec, ServiceSpec};
    use crate::workload::WorkloadGrid;

    fn entry(dist_index: usize, rps: f64, replicas: Vec<u32>) -> PolicyEntry {
        PolicyEntry {
            dist_index,
            rps,
            replicas: ClusterState::new(replicas),
            achieved_latency_ms: 0.0,
            samples: 1,
            target_met: true,
            lambda_final: 1.0,
            sample_cost_units: 0.0,
        }
    }

    fn policy(dists: Vec<Vec<f64>>, entries: Vec<PolicyEntry>, lower: f64, upper: f64, step: f64) -> TrainedPolicy {
        TrainedPolicy {
            grid: WorkloadGrid::new(lower, upper, step, dists).unwrap(),
            reward_params: RewardParams::new(50.0, 5.0, Objective::Median, CostModel::default()).unwrap(),
            sample_duration_s: 30.0,
            entries,
        }
    }

    fn one_dim() -> TrainedPolicy {
        policy(vec![vec![1.0]], vec![entry(0, 400.0, vec![20]), entry(0, 600.0, vec![30])], 400.0, 600.0, 200.0)
    }

    #[test]
    fn rps_interpolation_examples() {
        let p = one_dim();
        assert_eq!(interpolate_rps(&p, 0, 500.0).unwrap(), vec![25.0]);
        assert_eq!(interpolate_rps(&p, 0, 400.0).unwrap(), vec![20.0]);
        let v = interpolate_rps(&p, 0, 450.0).unwrap();
        assert_eq!(v, vec![22.5]);
        let topo = AppTopology::new(vec![ServiceSpec::new("a", 1.0, 40)], vec![EndpointSpec::new("e", ["a"], 0.0)]).unwrap();
        assert_eq!(ClusterState::from_fractional(&v, &topo).0, vec![23]);
        assert!(matches!(interpolate_rps(&p, 0, 700.0), Err(Error::OutOfRange { .. })));
        assert!(matches!(interpolate_rps(&p, 0, 100.0), Err(Error::OutOfRange { .. })));
    }

    fn three_dists() -> TrainedPolicy {
        let dists = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
        let entries = vec![
            entry(0, 100.0, vec![7]),
            entry(1, 100.0, vec![14]),
            entry(2, 100.0, vec![21]),
        ];
        policy(dists, entries, 100.0, 100.0, 100.0)
    }

    #[test]
    fn distribution_interpolation_exact_match() {
        let p = three_dists();
        let w = Workload::new(100.0, vec![0.0, 1.0]).unwrap();
        assert_eq!(interpolate_distribution(&p, &w).unwrap(), vec![14.0]);
    }

    #[test]
    fn distribution_interpolation_equidistant_mean() {
        let dists = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = policy(dists, vec![entry(0, 100.0, vec![4]), entry(1, 100.0, vec![10])], 100.0, 100.0, 100.0);
        let w = Workload::new(100.0, vec![0.5, 0.5]).unwrap();
        let v = interpolate_distribution(&p, &w).unwrap();
        assert!((v[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn distribution_interpolation_inverse_distance() {
        // Collinear distributions at distances 0.1, 0.2 and 0.4 from the observation.
        let base = [0.5, 0.5];
        let shift = |d: f64| vec![base[0] + d / 2f64.sqrt(), base[1] - d / 2f64.sqrt()];
        let dists = vec![shift(0.1), shift(0.2), shift(0.4)];
        let entries = vec![entry(0, 100.0, vec![7]), entry(1, 100.0, vec![14]), entry(2, 100.0, vec![28])];
        let p = policy(dists, entries, 100.0, 100.0, 100.0);
        let w = Workload::new(100.0, base.to_vec()).unwrap();
        let v = interpolate_distribution(&p, &w).unwrap();
        // weights 4/7, 2/7, 1/7
        let expected = 7.0 * 4.0 / 7.0 + 14.0 * 2.0 / 7.0 + 28.0 / 7.0;
        assert!((v[0] - expected).abs() < 1e-9, "{v:?}");
    }

    fn two_service_topo() -> AppTopology {
        AppTopology::new(
            vec![ServiceSpec::new("a", 10.0, 40), ServiceSpec::new("b", 10.0, 40)],
            vec![EndpointSpec::new("e", ["a", "b"], 0.0)],
        )
        .unwrap()
    }

    fn two_service_policy() -> TrainedPolicy {
        policy(
            vec![vec![1.0]],
            vec![entry(0, 100.0, vec![10, 12]), entry(0, 200.0, vec![20, 24])],
            100.0,
            200.0,
            100.0,
        )
    }

    #[test]
    fn scale_up_orders_vms_first() {
        let topo = two_service_topo();
        let plan = controller_step(
            &ControllerConfig::default(),
            &two_service_policy(),
            &Workload::new(200.0, vec![1.0]).unwrap(),
            &ClusterState::new(vec![5, 5]),
            &topo,
        )
        .unwrap();
        assert_eq!(plan.mode, ControlMode::Policy);
        assert!(matches!(plan.actions[0], ScalingAction::AddVms { count: 34, .. }));
        assert!(matches!(plan.actions[1], ScalingAction::ScalePods { .. }));
        assert_eq!(plan.actions.len(), 2);
    }

    #[test]
    fn scale_down_orders_pods_first() {
        let topo = two_service_topo();
        let plan = controller_step(
            &ControllerConfig::default(),
            &two_service_policy(),
            &Workload::new(100.0, vec![1.0]).unwrap(),
            &ClusterState::new(vec![30, 30]),
            &topo,
        )
        .unwrap();
        assert!(matches!(plan.actions[0], ScalingAction::ScalePods { .. }));
        assert!(matches!(plan.actions[1], ScalingAction::RemoveVms { count: 38, .. }));
        if let ScalingAction::ScalePods { lag_s, .. } = plan.actions[0] {
            assert_eq!(lag_s, 75.0);
        }
    }

    #[test]
    fn packed_vms_count_per_service() {
        let topo = two_service_topo();
        let mut p = two_service_policy();
        p.reward_params.cost_model = CostModel::new(CostMode::VmCount, 4, 1.0).unwrap();
        let plan = controller_step(&ControllerConfig::default(), &p, &Workload::new(100.0, vec![1.0]).unwrap(), &ClusterState::new(vec![8, 12]), &topo).unwrap();
        // target [10, 12]: service a needs ⌈10/4⌉ - ⌈8/4⌉ = 1 more VM
        assert!(matches!(plan.actions[0], ScalingAction::AddVms { count: 1, .. }));
    }

    #[test]
    fn far_out_of_range_falls_back() {
        let topo = two_service_topo();
        let cfg = ControllerConfig::default();
        let p = two_service_policy();
        let current = ClusterState::new(vec![5, 5]);
        let plan = controller_step(&cfg, &p, &Workload::new(600.0, vec![1.0]).unwrap(), &current, &topo).unwrap();
        assert_eq!(plan.mode, ControlMode::Fallback);
        assert!(plan.target.is_none());
        // inside the 30% margin the top grid point is used
        let near = controller_step(&cfg, &p, &Workload::new(250.0, vec![1.0]).unwrap(), &current, &topo).unwrap();
        assert_eq!(near.target, Some(ClusterState::new(vec![20, 24])));
    }

    #[test]
    fn observed_workload_is_request_weighted() {
        let sched = WorkloadSchedule::new(vec![
            crate::workload::Segment { workload: Workload::new(100.0, vec![1.0, 0.0]).unwrap(), duration_s: 30.0 },
            crate::workload::Segment { workload: Workload::new(300.0, vec![0.0, 1.0]).unwrap(), duration_s: 30.0 },
        ])
        .unwrap();
        let w = observed_workload(&sched, 0.0, 60.0).unwrap();
        assert!((w.total_rps() - 200.0).abs() < 1e-9);
        assert!((w.endpoint_probs()[0] - 0.25).abs() < 1e-12);
    }
}
