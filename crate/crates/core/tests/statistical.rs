use cola_core::autoscalers::{Objective, RewardParams};
use cola_core::cola::{optimize_cluster, LatencySource, TrainStatus, TrainerConfig};
use cola_core::harness::{exhaustive_oracle, OracleConfig};
use cola_core::queueing::analytic_mean_latency;
use cola_core::topology::bundled;
use cola_core::{simulate, ClusterState, CostModel, SimConfig, Workload};

#[test]
fn medians_across_seeds_stay_within_ten_percent() {
    let topo = bundled::bookinfo4();
    let w = Workload::new(300.0, vec![1.0]).unwrap();
    // reviews is the bottleneck at rho = 300 / (3 * 125) = 0.8
    let state = ClusterState::new(vec![4, 2, 3, 2]);
    let medians: Vec<f64> = (0..10)
        .map(|seed| simulate(&w, &state, &topo, &CostModel::default(), &SimConfig::new(60.0, seed)).unwrap().median_ms)
        .collect();
    let lo = medians.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = medians.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = medians.iter().sum::<f64>() / medians.len() as f64;
    assert!(hi > lo, "different seeds should give different medians");
    assert!((hi - lo) / mean < 0.10, "spread {:.3}", (hi - lo) / mean);
}

#[test]
fn simulated_mean_converges_to_analytic() {
    let topo = bundled::boutique11();
    let n = topo.num_endpoints();
    let w = Workload::uniform(150.0, n).unwrap();
    let state = ClusterState::new(vec![3; topo.num_services()]);
    let analytic = analytic_mean_latency(&w, &state, &topo).unwrap().ms().unwrap();
    let cfg = SimConfig::new(1000.0, 3);
    let report = simulate(&w, &state, &topo, &CostModel::default(), &cfg).unwrap();
    assert!(report.completed_requests >= 100_000);
    let rel = (report.mean_ms - analytic).abs() / analytic;
    assert!(rel < 0.03, "sim {} vs analytic {} ({rel:.4})", report.mean_ms, analytic);
}

#[test]
fn extra_bottleneck_replica_does_not_hurt_beyond_noise() {
    let topo = bundled::bookinfo4();
    let w = Workload::new(300.0, vec![1.0]).unwrap();
    let base = ClusterState::new(vec![4, 2, 3, 2]);
    let more = base.with_replicas(2, 4);
    for seed in 0..5 {
        let cfg = SimConfig::new(60.0, seed);
        let a = simulate(&w, &base, &topo, &CostModel::default(), &cfg).unwrap();
        let b = simulate(&w, &more, &topo, &CostModel::default(), &cfg).unwrap();
        assert!(b.mean_ms <= a.mean_ms * 1.02, "seed {seed}: {} -> {}", a.mean_ms, b.mean_ms);
    }
}

#[test]
fn optimize_stays_within_one_arm_window_of_exhaustive_cost() {
    let topo = bundled::simple_web_server();
    let cm = CostModel::default();
    for (k, rps) in [600.0, 1200.0, 2500.0, 4000.0].into_iter().enumerate() {
        let mut cfg = TrainerConfig::new(RewardParams::new(60.0, 1.0 / 3.0, Objective::Median, cm).unwrap());
        cfg.latency_source = LatencySource::Analytic;
        let w = Workload::new(rps, vec![1.0]).unwrap();
        let sim = SimConfig::new(10.0, k as u64);
        let out = optimize_cluster(&w, &topo.min_state(), &cfg, &topo, &sim).unwrap();
        assert_eq!(out.status, TrainStatus::Met);
        let oracle_params = cfg.reward.with_lambda(out.lambda_final());
        let ranked = exhaustive_oracle(
            &w,
            &topo,
            &oracle_params,
            &sim,
            &OracleConfig { latency_source: LatencySource::Analytic, ..OracleConfig::default() },
        )
        .unwrap();
        let slack = cfg.arm_window as f64 * cm.cost_per_unit;
        let cola_cost = cm.cost_per_unit * out.state.total_replicas() as f64;
        assert!(cola_cost <= ranked[0].cost + slack, "rps {rps}: {cola_cost} vs {}", ranked[0].cost);
    }
}
