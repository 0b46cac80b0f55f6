use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cola_core::cola::{train, LatencySource, TrainedPolicy, TrainerConfig};
use cola_core::harness::{
    amortization, exhaustive_oracle, run_experiment, training_cost_report, ExperimentSpec, OracleConfig, PolicySpec,
};
use cola_core::topology::{bundled, TopologyDoc};
use cola_core::workload::{Segment, WorkloadSchedule};
use cola_core::{AppTopology, CostMode, CostModel, Objective, RewardParams, SimConfig, Workload, WorkloadGrid};

#[derive(Parser)]
#[command(name = "cola", version, about = "Train and evaluate collective autoscaling policies in simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy over a workload grid and save it as JSON.
    Train(TrainArgs),
    /// Compare policies on a workload schedule and write a CSV table.
    Evaluate(EvaluateArgs),
    /// Rank every cluster state for one workload.
    Oracle(OracleArgs),
    /// Summarize the training cost of a saved policy.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CostModeArg {
    Vm,
    Pod,
}

#[derive(Args)]
struct Common {
    /// Bundled topology name (sws, bookinfo4, boutique11) or a JSON file.
    #[arg(long, default_value = "sws")]
    topology: String,
    #[arg(long, default_value_t = 50.0)]
    target_ms: f64,
    #[arg(long, default_value = "median")]
    objective: Objective,
    /// Latency weight in the reward.
    #[arg(long, default_value_t = 5.0)]
    lambda: f64,
    /// Overrides the cost mode from the topology file.
    #[arg(long, value_enum)]
    cost_mode: Option<CostModeArg>,
    #[arg(long)]
    pods_per_vm: Option<u32>,
    #[arg(long)]
    unit_cost: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Use closed-form queueing latency instead of simulation for training.
    #[arg(long)]
    analytic: bool,
    /// Length of each training sample window in seconds.
    #[arg(long, default_value_t = 30.0)]
    sample_s: f64,
}

#[derive(Args)]
struct GridArgs {
    /// Training grid as lower:upper:step in requests per second.
    #[arg(long, default_value = "500:3000:500")]
    grid: String,
    /// Endpoint distribution as comma-separated probabilities; repeatable.
    /// Defaults to uniform.
    #[arg(long = "dist")]
    dists: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value = "policy.json")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    grid: GridArgs,
    /// Policy to run: cola, cpu:<T>, lr or oracle. Repeatable.
    #[arg(long = "policy", default_values = ["cola", "cpu:30", "cpu:70"])]
    policies: Vec<PolicySpec>,
    /// Schedule JSON file; overrides --rates.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Comma-separated segment rates. Defaults to every grid point followed
    /// by the midpoint to the next one.
    #[arg(long)]
    rates: Option<String>,
    #[arg(long, default_value_t = 120.0)]
    segment_s: f64,
    /// Unmeasured seconds each segment runs before it is measured.
    #[arg(long, default_value_t = 300.0)]
    settle_s: f64,
    /// Replay the schedule back to back instead of one run per segment.
    #[arg(long)]
    continuous: bool,
    /// Trained COLA policy, reused if it matches and written otherwise.
    #[arg(long)]
    policy_file: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    lr_samples: usize,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    rps: f64,
    #[arg(long = "dist")]
    dist: Option<String>,
    /// Number of ranked states to print.
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "policy.json")]
    policy: PathBuf,
    /// Baseline cost per hour, for the break-even estimate.
    #[arg(long)]
    baseline_rate: Option<f64>,
    /// COLA cost per hour, for the break-even estimate.
    #[arg(long)]
    cola_rate: Option<f64>,
}

fn load_topology(common: &Common) -> Result<(AppTopology, CostModel)> {
    let doc = match bundled::by_name(&common.topology) {
        Some(topology) => TopologyDoc {
            topology,
            cost_model: CostModel::default(),
        },
        None => AppTopology::load(Path::new(&common.topology))?,
    };
    let mut cm = doc.cost_model;
    if let Some(mode) = common.cost_mode {
        cm.mode = match mode {
            CostModeArg::Vm => CostMode::VmCount,
            CostModeArg::Pod => CostMode::PodCount,
        };
    }
    if let Some(p) = common.pods_per_vm {
        cm.pods_per_vm = p;
    }
    if let Some(u) = common.unit_cost {
        cm.cost_per_unit = u;
    }
    cm.validate()?;
    Ok((doc.topology, cm))
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad {what} value '{p}'")))
        .collect()
}

fn parse_grid(args: &GridArgs, topo: &AppTopology) -> Result<WorkloadGrid> {
    let parts = args.grid.split(':').collect::<Vec<_>>();
    let [lo, hi, step] = parts[..] else {
        bail!("grid must be lower:upper:step, got '{}'", args.grid);
    };
    let num = |s: &str| s.parse::<f64>().with_context(|| format!("bad grid value '{s}'"));
    let dists = if args.dists.is_empty() {
        vec![Workload::uniform(1.0, topo.num_endpoints())?.endpoint_probs().to_vec()]
    } else {
        args.dists.iter().map(|d| parse_floats(d, "distribution")).collect::<Result<_>>()?
    };
    Ok(WorkloadGrid::new(num(lo)?, num(hi)?, num(step)?, dists)?)
}

fn reward_params(common: &Common, cm: CostModel) -> Result<RewardParams> {
    Ok(RewardParams::new(common.target_ms, common.lambda, common.objective, cm)?)
}

fn trainer_config(common: &Common, cm: CostModel) -> Result<TrainerConfig> {
    let mut cfg = TrainerConfig::new(reward_params(common, cm)?);
    if common.analytic {
        cfg.latency_source = LatencySource::Analytic;
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (topo, cm) = load_topology(&args.common)?;
    let grid = parse_grid(&args.grid, &topo)?;
    let cfg = trainer_config(&args.common, cm)?;
    let sim = SimConfig::new(args.common.sample_s, args.common.seed);
    let policy = train(&grid, &cfg, &topo, &sim, None)?;
    policy.save(&args.out)?;
    let report = training_cost_report(&policy);
    println!(
        "trained {} grid points with {} samples ({:.1} simulated hours), wrote {}",
        policy.entries.len(),
        report.samples,
        report.simulated_s / 3600.0,
        args.out.display()
    );
    for e in &policy.entries {
        println!(
            "  dist {} rps {:>8.1} -> {} ({:.1} ms{})",
            e.dist_index,
            e.rps,
            e.replicas,
            e.achieved_latency_ms,
            if e.target_met { "" } else { ", target unmet" }
        );
    }
    Ok(())
}

fn default_rates(grid: &WorkloadGrid) -> Vec<f64> {
    let values = grid.rps_values();
    let mut rates = Vec::with_capacity(2 * values.len());
    for (i, &v) in values.iter().enumerate() {
        rates.push(v);
        if let Some(&next) = values.get(i + 1) {
            rates.push(0.5 * (v + next));
        }
    }
    rates
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let (topo, cm) = load_topology(&args.common)?;
    let grid = parse_grid(&args.grid, &topo)?;
    let schedule = match (&args.schedule, &args.rates) {
        (Some(path), _) => WorkloadSchedule::load(path)?,
        (None, rates) => {
            let rates = match rates {
                Some(r) => parse_floats(r, "rate")?,
                None => default_rates(&grid),
            };
            let segments = rates
                .into_iter()
                .map(|r| {
                    Ok(Segment {
                        workload: Workload::new(r, grid.distributions[0].clone())?,
                        duration_s: args.segment_s,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            WorkloadSchedule::new(segments)?
        }
    };
    let mut spec = ExperimentSpec::new(
        topo,
        schedule,
        grid,
        args.policies,
        reward_params(&args.common, cm)?,
        args.common.seed,
    );
    spec.trainer = trainer_config(&args.common, cm)?;
    spec.train_sim = spec.train_sim.with_duration(args.common.sample_s);
    spec.lr_samples = args.lr_samples;
    spec.settle_s = (!args.continuous).then_some(args.settle_s);
    spec.policy_cache = args.policy_file;
    spec.out = Some(args.out.clone());
    let result = run_experiment(&spec)?;
    println!("wrote {} rows to {}", result.rows.len(), args.out.display());
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<()> {
    let (topo, cm) = load_topology(&args.common)?;
    let probs = match &args.dist {
        Some(d) => parse_floats(d, "distribution")?,
        None => Workload::uniform(1.0, topo.num_endpoints())?.endpoint_probs().to_vec(),
    };
    let w = Workload::new(args.rps, probs)?;
    let cfg = OracleConfig {
        latency_source: if args.common.analytic { LatencySource::Analytic } else { LatencySource::Simulated },
        ..OracleConfig::default()
    };
    let sim = SimConfig::new(args.common.sample_s, args.common.seed);
    let ranked = exhaustive_oracle(&w, &topo, &reward_params(&args.common, cm)?, &sim, &cfg)?;
    let mut out = csv::Writer::from_writer(std::io::stdout());
    if let Some(path) = &args.out {
        let mut file = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
        write_ranked(&mut file, &ranked, ranked.len())?;
    }
    write_ranked(&mut out, &ranked, args.top)?;
    Ok(())
}

fn write_ranked<W: std::io::Write>(
    out: &mut csv::Writer<W>,
    ranked: &[cola_core::harness::RankedState],
    top: usize,
) -> Result<()> {
    out.write_record(["rank", "state", "reward", "latency_ms", "cost"])?;
    for (i, r) in ranked.iter().take(top).enumerate() {
        out.write_record([
            (i + 1).to_string(),
            r.state.to_string(),
            format!("{:.3}", r.reward),
            format!("{:.3}", r.latency_ms),
            format!("{:.3}", r.cost),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let policy = TrainedPolicy::load(&args.policy)?;
    let report = training_cost_report(&policy);
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let (Some(base), Some(cola)) = (args.baseline_rate, args.cola_rate) {
        println!("break-even after {}", amortization(&report, base, cola));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Report(a) => cmd_report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
