//! Evaluation traces shared by every policy runner.
//!
//! A runner steps through a schedule in short windows. Each window is one
//! simulation at a fixed cluster state; windows never straddle a segment
//! boundary. Segment summaries pool the raw latencies of their windows so
//! percentiles are exact over the whole segment.

use serde::{Deserialize, Serialize};

use crate::simulator::{sorted_percentile, SimOutcome, SimReport};
use crate::topology::ClusterState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Policy,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub segment: usize,
    pub start_s: f64,
    pub duration_s: f64,
    pub state: ClusterState,
    pub mode: ControlMode,
    pub report: SimReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub rps: f64,
    pub duration_s: f64,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub mean_ms: f64,
    pub failures_per_s: f64,
    /// Time-averaged cluster cost over the segment.
    pub cost_units: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub windows: Vec<WindowRecord>,
    pub segments: Vec<SegmentSummary>,
}

impl EvalTrace {
    /// Replica counts applied in each window, in order.
    pub fn state_history(&self) -> impl Iterator<Item = &ClusterState> {
        self.windows.iter().map(|w| &w.state)
    }

    pub fn entered_fallback(&self) -> bool {
        self.windows.iter().any(|w| w.mode == ControlMode::Fallback)
    }
}

/// Accumulates windows and closes out one segment at a time.
#[derive(Default)]
pub(crate) struct TraceBuilder {
    trace: EvalTrace,
    latencies: Vec<f64>,
    timed_out: u64,
    cost_area: f64,
    elapsed: f64,
}

impl TraceBuilder {
    pub fn push(
        &mut self,
        segment: usize,
        start_s: f64,
        duration_s: f64,
        state: ClusterState,
        mode: ControlMode,
        outcome: SimOutcome,
    ) {
        self.latencies.extend_from_slice(&outcome.latencies_ms);
        self.timed_out += outcome.report.timed_out;
        self.cost_area += outcome.report.cost_units * duration_s;
        self.elapsed += duration_s;
        self.trace.windows.push(WindowRecord {
            segment,
            start_s,
            duration_s,
            state,
            mode,
            report: outcome.report,
        });
    }

    pub fn close_segment(&mut self, rps: f64) {
        let mut sorted = std::mem::take(&mut self.latencies);
        sorted.sort_by(f64::total_cmp);
        let (median_ms, p90_ms, mean_ms) = if sorted.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            (
                sorted_percentile(&sorted, 0.5),
                sorted_percentile(&sorted, 0.9),
                sorted.iter().sum::<f64>() / sorted.len() as f64,
            )
        };
        let duration_s = self.elapsed;
        self.trace.segments.push(SegmentSummary {
            rps,
            duration_s,
            median_ms,
            p90_ms,
            mean_ms,
            failures_per_s: if duration_s > 0.0 { self.timed_out as f64 / duration_s } else { 0.0 },
            cost_units: if duration_s > 0.0 { self.cost_area / duration_s } else { 0.0 },
        });
        self.timed_out = 0;
        self.cost_area = 0.0;
        self.elapsed = 0.0;
    }

    pub fn finish(self) -> EvalTrace {
        self.trace
    }
}
