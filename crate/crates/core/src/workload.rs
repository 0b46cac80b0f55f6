//! Workloads (aggregate rate plus endpoint mix), training grids and the
//! evaluation schedule shapes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::topology::AppTopology;

const PROB_TOL: f64 = 1e-9;

/// Aggregate requests per second and the probability of each endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    #[serde(rename = "rps")]
    total_rps: f64,
    #[serde(rename = "probs")]
    endpoint_probs: Vec<f64>,
}

impl Workload {
    pub fn new(total_rps: f64, endpoint_probs: Vec<f64>) -> Result<Self> {
        let w = Self {
            total_rps,
            endpoint_probs,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn uniform(total_rps: f64, endpoints: usize) -> Result<Self> {
        if endpoints == 0 {
            return Err(Error::InvalidWorkload("no endpoints".into()));
        }
        Self::new(total_rps, vec![1.0 / endpoints as f64; endpoints])
    }

    /// Builds a workload from per-endpoint request rates (the raw context vector).
    pub fn from_context(per_endpoint_rps: &[f64]) -> Result<Self> {
        let total: f64 = per_endpoint_rps.iter().sum();
        if per_endpoint_rps.is_empty() {
            return Err(Error::InvalidWorkload("empty context vector".into()));
        }
        let probs = if total > 0.0 {
            per_endpoint_rps.iter().map(|r| r / total).collect()
        } else {
            vec![1.0 / per_endpoint_rps.len() as f64; per_endpoint_rps.len()]
        };
        Self::new(total, probs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.total_rps.is_finite() && self.total_rps >= 0.0) {
            return Err(Error::InvalidWorkload(format!(
                "total rps {} is negative or not finite",
                self.total_rps
            )));
        }
        validate_distribution(&self.endpoint_probs)
    }

    pub fn total_rps(&self) -> f64 {
        self.total_rps
    }

    pub fn endpoint_probs(&self) -> &[f64] {
        &self.endpoint_probs
    }

    /// Per-endpoint request rates.
    pub fn context(&self) -> Vec<f64> {
        self.endpoint_probs
            .iter()
            .map(|p| p * self.total_rps)
            .collect()
    }

    pub fn with_rps(&self, total_rps: f64) -> Self {
        Self {
            total_rps,
            endpoint_probs: self.endpoint_probs.clone(),
        }
    }

    pub fn check_dims(&self, topo: &AppTopology) -> Result<()> {
        if self.endpoint_probs.len() != topo.num_endpoints() {
            return Err(Error::InvalidWorkload(format!(
                "distribution has {} entries, topology has {} endpoints",
                self.endpoint_probs.len(),
                topo.num_endpoints()
            )));
        }
        Ok(())
    }
}

pub fn validate_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidWorkload("empty distribution".into()));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidWorkload(
            "probabilities must be nonnegative".into(),
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidWorkload(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Training grid: an rps range sampled at a fixed step, crossed with a set of
/// endpoint distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadGrid {
    pub rps_lower: f64,
    pub rps_upper: f64,
    pub step: f64,
    pub distributions: Vec<Vec<f64>>,
}

impl WorkloadGrid {
    pub fn new(rps_lower: f64, rps_upper: f64, step: f64, distributions: Vec<Vec<f64>>) -> Result<Self> {
        let g = Self {
            rps_lower,
            rps_upper,
            step,
            distributions,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rps_lower > self.rps_upper {
            return Err(Error::EmptyRange {
                lower: self.rps_lower,
                upper: self.rps_upper,
            });
        }
        if !(self.rps_lower >= 0.0 && self.rps_upper.is_finite()) {
            return Err(Error::Config("rps bounds must be finite and nonnegative".into()));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::Config("grid step must be positive".into()));
        }
        if self.distributions.is_empty() {
            return Err(Error::Config("grid needs at least one distribution".into()));
        }
        let len = self.distributions[0].len();
        for d in &self.distributions {
            if d.len() != len {
                return Err(Error::Config(
                    "grid distributions have different lengths".into(),
                ));
            }
            validate_distribution(d)?;
        }
        Ok(())
    }

    /// The rps values of the grid, ascending.
    pub fn rps_values(&self) -> Vec<f64> {
        let span = self.rps_upper - self.rps_lower;
        let n = (span / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|k| self.rps_lower + k as f64 * self.step)
            .collect()
    }

    /// Largest rps actually trained.
    pub fn top_rps(&self) -> f64 {
        *self.rps_values().last().expect("grid is non-empty")
    }

    /// Largest ratio between adjacent rps values (the interpolation delay
    /// inflation bound). Infinite when the grid starts at zero.
    pub fn max_adjacent_ratio(&self) -> f64 {
        self.rps_values()
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { f64::INFINITY })
            .fold(1.0, f64::max)
    }

    /// Checks the grid spacing against a delay-inflation budget.
    pub fn check_ratio_budget(&self, budget: f64) -> Result<()> {
        let ratio = self.max_adjacent_ratio();
        if ratio > budget {
            return Err(Error::Config(format!(
                "adjacent rps ratio {ratio:.3} exceeds the budget {budget:.3}"
            )));
        }
        Ok(())
    }
}

/// Every grid workload, distribution-major and ascending in rps within each
/// distribution.
pub fn grid_points(g: &WorkloadGrid) -> Result<Vec<Workload>> {
    g.validate()?;
    let rps = g.rps_values();
    let mut out = Vec::with_capacity(rps.len() * g.distributions.len());
    for dist in &g.distributions {
        for &r in &rps {
            out.push(Workload::new(r, dist.clone())?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(flatten)]
    pub workload: Workload,
    pub duration_s: f64,
}

/// A sequence of constant-workload segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct WorkloadSchedule {
    pub segments: Vec<Segment>,
}

impl WorkloadSchedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let s = Self { segments };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for seg in &self.segments {
            if !(seg.duration_s.is_finite() && seg.duration_s > 0.0) {
                return Err(Error::InvalidWorkload(format!(
                    "segment duration {} is not positive",
                    seg.duration_s
                )));
            }
            seg.workload.validate()?;
        }
        Ok(())
    }

    pub fn total_duration_s(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }

    pub fn concat(mut self, other: WorkloadSchedule) -> Self {
        self.segments.extend(other.segments);
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = read_json(path)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn constant_rate(rps: f64, dist: Vec<f64>, duration_s: f64) -> Result<WorkloadSchedule> {
    WorkloadSchedule::new(vec![Segment {
        workload: Workload::new(rps, dist)?,
        duration_s,
    }])
}

/// True when the sequence never increases after it first decreases.
pub fn is_unimodal(rates: &[f64]) -> bool {
    let mut descending = false;
    for w in rates.windows(2) {
        if w[1] < w[0] {
            descending = true;
        } else if w[1] > w[0] && descending {
            return false;
        }
    }
    true
}

/// Rates played in order, each for `seg_duration_s`.
pub fn diurnal(rates: &[f64], dist: Vec<f64>, seg_duration_s: f64) -> Result<WorkloadSchedule> {
    if rates.is_empty() {
        return Err(Error::InvalidWorkload("diurnal needs at least one rate".into()));
    }
    if !is_unimodal(rates) {
        log::warn!("diurnal rates {rates:?} do not increase then decrease");
    }
    let segments = rates
        .iter()
        .map(|&r| {
            Ok(Segment {
                workload: Workload::new(r, dist.clone())?,
                duration_s: seg_duration_s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    WorkloadSchedule::new(segments)
}

/// `n_cycles` low/high pairs with rates drawn uniformly from the given ranges.
pub fn alternating(
    high_range: (f64, f64),
    low_range: (f64, f64),
    n_cycles: usize,
    dist: Vec<f64>,
    seg_duration_s: f64,
    seed: u64,
) -> Result<WorkloadSchedule> {
    for (lo, hi) in [high_range, low_range] {
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidWorkload(format!("bad rate range [{lo}, {hi}]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let mut segments = Vec::with_capacity(2 * n_cycles);
    for _ in 0..n_cycles {
        for range in [low_range, high_range] {
            segments.push(Segment {
                workload: Workload::new(draw(range), dist.clone())?,
                duration_s: seg_duration_s,
            });
        }
    }
    WorkloadSchedule::new(segments)
}

/// Scales one endpoint's probability mass by `factor` and renormalizes.
pub fn perturb_distribution(dist: &[f64], factor: f64, endpoint_index: usize) -> Result<Vec<f64>> {
    validate_distribution(dist)?;
    if !(factor.is_finite() && factor >= 0.0) {
        return Err(Error::Domain(format!("perturbation factor {factor} < 0")));
    }
    if endpoint_index >= dist.len() {
        return Err(Error::Domain(format!(
            "endpoint index {endpoint_index} out of bounds"
        )));
    }
    let mut out = dist.to_vec();
    out[endpoint_index] *= factor;
    let sum: f64 = out.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Domain("perturbation removed all probability mass".into()));
    }
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}
