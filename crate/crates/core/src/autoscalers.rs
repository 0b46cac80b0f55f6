//! The latency/cost reward and the baseline autoscalers: the Kubernetes
//! CPU-threshold HPA and an OLS regression autoscaler.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::seed::derive_seed;
use crate::simulator::{simulate_detailed, SimConfig, SimReport};
use crate::topology::{cluster_cost, AppTopology, ClusterState, CostModel};
use crate::trace::{ControlMode, EvalTrace, TraceBuilder};
use crate::workload::{Workload, WorkloadSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Median,
    Mean,
    P90,
}

impl Objective {
    pub fn latency(self, report: &SimReport) -> f64 {
        match self {
            Objective::Median => report.median_ms,
            Objective::Mean => report.mean_ms,
            Objective::P90 => report.p90_ms,
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(Objective::Median),
            "mean" => Ok(Objective::Mean),
            "p90" => Ok(Objective::P90),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub l_target_ms: f64,
    /// Penalty per millisecond above target.
    pub lambda_weight: f64,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub cost_model: CostModel,
}

impl RewardParams {
    pub fn new(l_target_ms: f64, lambda_weight: f64, objective: Objective, cost_model: CostModel) -> Result<Self> {
        let p = Self {
            l_target_ms,
            lambda_weight,
            objective,
            cost_model,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_target_ms.is_nan() || self.l_target_ms <= 0.0 {
            return Err(Error::Config("latency target must be positive".into()));
        }
        if self.lambda_weight.is_nan() || self.lambda_weight <= 0.0 {
            return Err(Error::Config("lambda weight must be positive".into()));
        }
        self.cost_model.validate()
    }

    pub fn with_lambda(&self, lambda_weight: f64) -> Self {
        Self {
            lambda_weight,
            ..self.clone()
        }
    }
}

/// `λ·min(target - observed, 0) - cost`.
pub fn reward_value(lambda_weight: f64, l_target_ms: f64, l_obs_ms: f64, cost: f64) -> f64 {
    lambda_weight * (l_target_ms - l_obs_ms).min(0.0) - cost
}

pub fn reward(p: &RewardParams, l_obs_ms: f64, state: &ClusterState, topo: &AppTopology) -> Result<f64> {
    let cost = cluster_cost(state, topo, &p.cost_model)?;
    Ok(reward_value(p.lambda_weight, p.l_target_ms, l_obs_ms, cost))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpaConfig {
    /// Target utilization T in (0, 1].
    pub threshold: f64,
    #[serde(default = "default_period")]
    pub period_s: f64,
    /// Optional per-service override of `threshold`.
    #[serde(default)]
    pub per_service: Option<Vec<f64>>,
}

fn default_period() -> f64 {
    15.0
}

impl HpaConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        let cfg = Self {
            threshold,
            period_s: default_period(),
            per_service: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t > 0.0 && t <= 1.0;
        if !ok(self.threshold) || !self.per_service.iter().flatten().all(|&t| ok(t)) {
            return Err(Error::Config("HPA thresholds must lie in (0, 1]".into()));
        }
        if self.period_s.is_nan() || self.period_s <= 0.0 {
            return Err(Error::Config("HPA period must be positive".into()));
        }
        Ok(())
    }

    fn threshold_for(&self, service: usize) -> f64 {
        self.per_service
            .as_ref()
            .and_then(|v| v.get(service).copied())
            .unwrap_or(self.threshold)
    }
}

/// `⌈R·M/T⌉` for one service, before clamping.
pub fn hpa_desired(replicas: u32, measured: f64, threshold: f64) -> u32 {
    // tolerance keeps exact ratios such as 0.5/0.5 from rounding up
    let raw = replicas as f64 * measured / threshold;
    (raw - 1e-9).ceil().max(0.0) as u32
}

/// One HPA control step: every service scales independently.
pub fn hpa_step(cfg: &HpaConfig, current: &ClusterState, measured_util: &[f64], topo: &AppTopology) -> Result<ClusterState> {
    current.check_dims(topo)?;
    if measured_util.len() != topo.num_services() {
        return Err(Error::DimensionMismatch {
            expected: topo.num_services(),
            got: measured_util.len(),
        });
    }
    Ok(ClusterState::new(
        current
            .replicas()
            .iter()
            .zip(measured_util)
            .zip(topo.services())
            .enumerate()
            .map(|(i, ((&r, &m), s))| {
                hpa_desired(r, m, cfg.threshold_for(i)).clamp(s.min_replicas, s.max_replicas)
            })
            .collect(),
    ))
}

/// Runs the HPA control loop over a schedule starting from the minimum state.
pub fn run_hpa(
    cfg: &HpaConfig,
    schedule: &WorkloadSchedule,
    topo: &AppTopology,
    cm: &CostModel,
    sim: &SimConfig,
) -> Result<EvalTrace> {
    run_hpa_from(cfg, schedule, topo, cm, sim, topo.min_state())
}

pub fn run_hpa_from(
    cfg: &HpaConfig,
    schedule: &WorkloadSchedule,
    topo: &AppTopology,
    cm: &CostModel,
    sim: &SimConfig,
    initial: ClusterState,
) -> Result<EvalTrace> {
    cfg.validate()?;
    schedule.validate()?;
    initial.validate(topo)?;
    let mut state = initial;
    let mut builder = TraceBuilder::default();
    let mut clock = 0.0;
    for (seg_idx, seg) in schedule.segments.iter().enumerate() {
        for (win_idx, len) in windows(seg.duration_s, cfg.period_s).enumerate() {
            let window_cfg = window_config(sim, len, seg_idx, win_idx);
            let outcome = simulate_detailed(&seg.workload, &state, topo, cm, &window_cfg)?;
            let util = outcome.report.mean_utilization.clone();
            builder.push(seg_idx, clock, len, state.clone(), ControlMode::Policy, outcome);
            clock += len;
            state = hpa_step(cfg, &state, &util, topo)?;
        }
        builder.close_segment(seg.workload.total_rps());
    }
    Ok(builder.finish())
}

/// Splits a segment into control windows of at most `period`.
pub(crate) fn windows(total: f64, period: f64) -> impl Iterator<Item = f64> {
    let full = (total / period + 1e-9).floor() as usize;
    let rest = total - full as f64 * period;
    let tail = (rest > 1e-9).then_some(rest);
    std::iter::repeat_n(period, full).chain(tail)
}

/// Simulation settings for one evaluation window; seeds depend only on the
/// window's position so every policy sees the same arrivals.
pub(crate) fn window_config(sim: &SimConfig, len: f64, segment: usize, window: usize) -> SimConfig {
    let mut cfg = sim.with_seed(derive_seed(sim.seed, &[segment as u64, window as u64]));
    cfg.duration_s = len;
    cfg.warmup_s = sim.warmup_s.min(0.5 * len);
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinRegModel {
    pub feature_names: Vec<String>,
    /// Intercept first, then one coefficient per feature.
    pub coefficients: Vec<f64>,
    pub samples: usize,
    /// True when the design matrix was rank deficient and ridge was used.
    pub regularized: bool,
    pub cost_model: CostModel,
}

const RIDGE: f64 = 1e-8;

/// Replicas, rps-per-replica for each service, then the total rps.
pub fn lr_features(workload: &Workload, state: &ClusterState) -> Vec<f64> {
    let rps = workload.total_rps();
    let mut f: Vec<f64> = state.replicas().iter().map(|&r| r as f64).collect();
    f.extend(state.replicas().iter().map(|&r| rps / r as f64));
    f.push(rps);
    f
}

pub fn lr_feature_names(topo: &AppTopology) -> Vec<String> {
    let mut names: Vec<String> = topo.services().iter().map(|s| format!("replicas:{}", s.name)).collect();
    names.extend(topo.services().iter().map(|s| format!("rps_per_replica:{}", s.name)));
    names.push("rps".into());
    names
}

/// Ordinary least squares fit of reward on [`lr_features`].
pub fn lr_train(samples: &[(Workload, ClusterState, f64)], topo: &AppTopology, cm: &CostModel) -> Result<LinRegModel> {
    let names = lr_feature_names(topo);
    let p = names.len() + 1;
    if samples.len() < p {
        return Err(Error::Config(format!(
            "regression needs at least {p} samples, got {}",
            samples.len()
        )));
    }
    let mut x = DMatrix::<f64>::zeros(samples.len(), p);
    let mut y = DVector::<f64>::zeros(samples.len());
    for (row, (w, s, r)) in samples.iter().enumerate() {
        s.validate(topo)?;
        x[(row, 0)] = 1.0;
        for (j, v) in lr_features(w, s).into_iter().enumerate() {
            x[(row, j + 1)] = v;
        }
        y[row] = *r;
    }

    let svd = x.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let tol = sigma_max * samples.len().max(p) as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let (beta, regularized) = if rank == p {
        let beta = svd.solve(&y, tol).map_err(|e| Error::Config(e.into()))?;
        (beta, false)
    } else {
        let xt = x.transpose();
        let gram = &xt * &x + DMatrix::identity(p, p) * RIDGE;
        let rhs = &xt * &y;
        let beta = gram
            .cholesky()
            .ok_or_else(|| Error::Config("ridge system is not positive definite".into()))?
            .solve(&rhs);
        (beta, true)
    };
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Config("regression produced non-finite coefficients".into()));
    }
    Ok(LinRegModel {
        feature_names: names,
        coefficients: beta.iter().copied().collect(),
        samples: samples.len(),
        regularized,
        cost_model: *cm,
    })
}

impl LinRegModel {
    pub fn predict(&self, workload: &Workload, state: &ClusterState) -> f64 {
        let f = lr_features(workload, state);
        self.coefficients[0] + self.coefficients[1..].iter().zip(&f).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Best of `n_candidates` uniformly sampled states under the model. Exact
/// prediction ties go to the cheaper state, then the lexicographically lower.
pub fn lr_infer(model: &LinRegModel, workload: &Workload, topo: &AppTopology, n_candidates: usize, seed: u64) -> Result<ClusterState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, f64, ClusterState)> = None;
    for _ in 0..n_candidates.max(1) {
        let cand = random_state(topo, &mut rng);
        let pred = model.predict(workload, &cand);
        let cost = cluster_cost(&cand, topo, &model.cost_model)?;
        let better = match &best {
            None => true,
            Some((bp, bc, bs)) => {
                pred > *bp || (pred == *bp && (cost < *bc || (cost == *bc && cand < *bs)))
            }
        };
        if better {
            best = Some((pred, cost, cand));
        }
    }
    Ok(best.expect("at least one candidate").2)
}

pub(crate) fn random_state(topo: &AppTopology, rng: &mut impl Rng) -> ClusterState {
    ClusterState::new(
        topo.services()
            .iter()
            .map(|s| rng.random_range(s.min_replicas..=s.max_replicas))
            .collect(),
    )
}

/// Simulates `n` random (rps, state) pairs and scores them with the reward.
pub fn lr_training_samples(
    rps_range: (f64, f64),
    dist: &[f64],
    topo: &AppTopology,
    params: &RewardParams,
    sim: &SimConfig,
    n: usize,
) -> Result<Vec<(Workload, ClusterState, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sim.seed, &[0x1e_a5]));
    (0..n)
        .map(|i| {
            let rps = if rps_range.0 == rps_range.1 {
                rps_range.0
            } else {
                rng.random_range(rps_range.0..=rps_range.1)
            };
            let w = Workload::new(rps, dist.to_vec())?;
            let s = random_state(topo, &mut rng);
            let cfg = sim.with_seed(derive_seed(sim.seed, &[0x1e_a5, i as u64]));
            let report = simulate_detailed(&w, &s, topo, &params.cost_model, &cfg)?.report;
            let r = reward(params, params.objective.latency(&report), &s, topo)?;
            Ok((w, s, r))
        })
        .collect()
}

/// Evaluates a static regression policy: the state is re-inferred at each
/// segment boundary from the segment's workload.
pub fn run_lr(
    model: &LinRegModel,
    schedule: &WorkloadSchedule,
    topo: &AppTopology,
    sim: &SimConfig,
    period_s: f64,
    n_candidates: usize,
) -> Result<EvalTrace> {
    let mut builder = TraceBuilder::default();
    let mut clock = 0.0;
    for (seg_idx, seg) in schedule.segments.iter().enumerate() {
        let state = lr_infer(model, &seg.workload, topo, n_candidates, derive_seed(sim.seed, &[seg_idx as u64]))?;
        for (win_idx, len) in windows(seg.duration_s, period_s).enumerate() {
            let cfg = window_config(sim, len, seg_idx, win_idx);
            let outcome = simulate_detailed(&seg.workload, &state, topo, &model.cost_model, &cfg)?;
            builder.push(seg_idx, clock, len, state.clone(), ControlMode::Policy, outcome);
            clock += len;
        }
        builder.close_segment(seg.workload.total_rps());
    }
    Ok(builder.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{bundled, CostMode, EndpointSpec, ServiceSpec};
    use crate::workload::constant_rate;

    fn one_service(mu: f64, max: u32) -> AppTopology {
        AppTopology::new(
            vec![ServiceSpec::new("a", mu, max)],
            vec![EndpointSpec::new("e", ["a"], 0.0)],
        )
        .unwrap()
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward_value(5.0, 50.0, 56.0, 225.0), -255.0);
        assert_eq!(reward_value(5.0, 50.0, 53.0, 465.0), -480.0);
        assert_eq!(reward_value(1.0 / 3.0, 50.0, 46.0, 10.0), -10.0);
        assert_eq!(reward_value(2.0, 50.0, 50.0, 30.0), -30.0);

        let topo = one_service(10.0, 30);
        let p = RewardParams::new(50.0, 5.0, Objective::Median, CostModel::default()).unwrap();
        assert_eq!(reward(&p, 56.0, &ClusterState::new(vec![15]), &topo).unwrap(), -255.0);
    }

    #[test]
    fn hpa_step_examples() {
        let topo = one_service(10.0, 20);
        let cfg = HpaConfig::new(0.5).unwrap();
        let step = |r: u32, m: f64| hpa_step(&cfg, &ClusterState::new(vec![r]), &[m], &topo).unwrap().0[0];
        assert_eq!(step(4, 0.9), 8);
        assert_eq!(step(6, 0.5), 6);
        assert_eq!(step(10, 0.05), 1);
        assert_eq!(step(20, 1.0), 20);
        assert!(HpaConfig::new(0.0).is_err());
        assert!(HpaConfig::new(1.2).is_err());
    }

    #[test]
    fn hpa_per_service_thresholds() {
        let topo = AppTopology::new(
            vec![ServiceSpec::new("a", 1.0, 20), ServiceSpec::new("b", 1.0, 20)],
            vec![EndpointSpec::new("e", ["a", "b"], 0.0)],
        )
        .unwrap();
        let mut cfg = HpaConfig::new(0.5).unwrap();
        cfg.per_service = Some(vec![0.5, 0.25]);
        let next = hpa_step(&cfg, &ClusterState::new(vec![2, 2]), &[0.5, 0.5], &topo).unwrap();
        assert_eq!(next.0, vec![2, 4]);
    }

    #[test]
    fn hpa_reaches_fixed_point() {
        let topo = one_service(100.0, 30);
        // λ/(Tμ) = 500 / (0.5 · 100) = 10
        let sched = constant_rate(500.0, vec![1.0], 600.0).unwrap();
        let trace = run_hpa(&HpaConfig::new(0.5).unwrap(), &sched, &topo, &CostModel::default(), &SimConfig::new(15.0, 3)).unwrap();
        let tail: Vec<u32> = trace.windows.iter().rev().take(10).map(|w| w.state.0[0]).collect();
        assert!(tail.iter().all(|&r| (10..=11).contains(&r)), "{tail:?}");
    }

    #[test]
    fn hpa_idle_converges_to_min() {
        let topo = one_service(100.0, 30);
        let sched = constant_rate(0.0, vec![1.0], 120.0).unwrap();
        let trace = run_hpa_from(
            &HpaConfig::new(0.5).unwrap(),
            &sched,
            &topo,
            &CostModel::default(),
            &SimConfig::new(15.0, 3),
            ClusterState::new(vec![12]),
        )
        .unwrap();
        assert_eq!(trace.windows.last().unwrap().state.0, vec![1]);
    }

    #[test]
    fn lower_threshold_costs_more() {
        let topo = bundled::bookinfo4();
        let sched = constant_rate(300.0, vec![1.0], 300.0).unwrap();
        let sim = SimConfig::new(15.0, 21);
        let cm = CostModel::default();
        let low = run_hpa(&HpaConfig::new(0.3).unwrap(), &sched, &topo, &cm, &sim).unwrap();
        let high = run_hpa(&HpaConfig::new(0.7).unwrap(), &sched, &topo, &cm, &sim).unwrap();
        assert!(low.segments[0].cost_units >= high.segments[0].cost_units);
    }

    #[test]
    fn windows_split() {
        assert_eq!(windows(60.0, 15.0).collect::<Vec<_>>(), vec![15.0; 4]);
        assert_eq!(windows(40.0, 15.0).collect::<Vec<_>>(), vec![15.0, 15.0, 10.0]);
        assert_eq!(windows(5.0, 15.0).collect::<Vec<_>>(), vec![5.0]);
    }

    fn synthetic_samples(topo: &AppTopology, n: usize, f: impl Fn(&[f64]) -> f64) -> Vec<(Workload, ClusterState, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|_| {
                let w = Workload::new(rng.random_range(50.0..500.0), vec![1.0]).unwrap();
                let s = random_state(topo, &mut rng);
                let y = f(&lr_features(&w, &s));
                (w, s, y)
            })
            .collect()
    }

    #[test]
    fn ols_recovers_linear_reward() {
        let topo = bundled::bookinfo4();
        let truth = [3.0, -15.0, -14.0, -13.0, -12.0, -0.5, -0.25, -0.75, -0.1, 0.02];
        let samples = synthetic_samples(&topo, 200, |f| truth[0] + truth[1..].iter().zip(f).map(|(c, v)| c * v).sum::<f64>());
        let model = lr_train(&samples, &topo, &CostModel::default()).unwrap();
        assert!(!model.regularized);
        for (got, want) in model.coefficients.iter().zip(truth) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn ols_constant_reward_has_zero_slopes() {
        let topo = bundled::bookinfo4();
        let samples = synthetic_samples(&topo, 100, |_| -42.0);
        let model = lr_train(&samples, &topo, &CostModel::default()).unwrap();
        assert!((model.coefficients[0] + 42.0).abs() < 1e-6);
        assert!(model.coefficients[1..].iter().all(|c| c.abs() < 1e-8));
    }

    #[test]
    fn ols_rank_deficient_falls_back_to_ridge() {
        let topo = one_service(10.0, 5);
        // a single replica count makes the replica column collinear with the intercept
        let samples: Vec<_> = (0..10)
            .map(|i| {
                let w = Workload::new(10.0 * (i + 1) as f64, vec![1.0]).unwrap();
                (w, ClusterState::new(vec![2]), -(i as f64))
            })
            .collect();
        let model = lr_train(&samples, &topo, &CostModel::default()).unwrap();
        assert!(model.regularized);
        assert!(model.coefficients.iter().all(|c| c.is_finite()));
        assert!(lr_train(&samples[..2], &topo, &CostModel::default()).is_err());
    }

    #[test]
    fn lr_inference_rules() {
        let topo = bundled::bookinfo4();
        let w = Workload::new(100.0, vec![1.0]).unwrap();
        let mut model = LinRegModel {
            feature_names: lr_feature_names(&topo),
            coefficients: vec![0.0, -1.0, -1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            samples: 0,
            regularized: false,
            cost_model: CostModel::default(),
        };
        let best = lr_infer(&model, &w, &topo, 20_000, 1).unwrap();
        assert!(best.total_replicas() <= 8, "{best}");
        assert_eq!(best, lr_infer(&model, &w, &topo, 20_000, 1).unwrap());

        // flat model: every candidate ties, so the cheapest sampled state wins
        model.coefficients = vec![0.0; 10];
        let tie = lr_infer(&model, &w, &topo, 20_000, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cheapest = (0..20_000)
            .map(|_| random_state(&topo, &mut rng))
            .min_by(|a, b| a.total_replicas().cmp(&b.total_replicas()).then_with(|| a.cmp(b)))
            .unwrap();
        assert_eq!(tie, cheapest);
    }

    #[test]
    fn lr_trains_on_simulated_samples() {
        let topo = bundled::bookinfo4();
        let cm = CostModel::new(CostMode::VmCount, 1, 15.0).unwrap();
        let params = RewardParams::new(50.0, 5.0, Objective::Median, cm).unwrap();
        let samples = lr_training_samples((100.0, 400.0), &[1.0], &topo, &params, &SimConfig::new(5.0, 4), 200).unwrap();
        let model = lr_train(&samples, &topo, &cm).unwrap();
        assert_eq!(model.samples, 200);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lr.json");
        model.save(&path).unwrap();
        assert_eq!(LinRegModel::load(&path).unwrap(), model);
    }
}
