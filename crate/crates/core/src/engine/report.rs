use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ExecutorMode;
use crate::metrics::MetricReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Structure,
    Refine,
}

/// Time one worker spent in one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub stage: Stage,
    /// 1-based, counted over the whole run.
    pub iteration: usize,
    pub worker: usize,
    pub compute_ms: f64,
    /// Blocked on a guidance message or an exchange barrier.
    pub wait_ms: f64,
    /// Spent publishing guidance.
    pub comm_ms: f64,
}

/// Patch `patch` at `iteration` was guided by the message from `source_iteration`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessEntry {
    pub stage: Stage,
    pub iteration: usize,
    pub patch: usize,
    pub source_iteration: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub timings: Vec<TimingRecord>,
    pub staleness: Vec<StalenessEntry>,
    pub wall_ms: f64,
}

impl StageOutput {
    pub(crate) fn sort(&mut self) {
        self.timings.sort_by_key(|r| (r.iteration, r.worker));
        self.staleness.sort_by_key(|e| (e.iteration, e.patch));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: ExecutorMode,
    pub workers: usize,
    pub seed: u64,
    pub rng_algorithm: String,
    pub patches: usize,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub stage2_tiles: usize,
    pub wall_ms: f64,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
    pub timings: Vec<TimingRecord>,
    pub staleness: Vec<StalenessEntry>,
    pub checksum: String,
    pub metrics: Vec<MetricReport>,
}

impl RunReport {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    /// `mode,iteration,worker,compute_ms,wait_ms`, one row per record.
    pub fn timings_csv(&self) -> String {
        let mut out = String::from("mode,iteration,worker,compute_ms,wait_ms\n");
        for r in &self.timings {
            let _ = writeln!(
                out,
                "{},{},{},{:.3},{:.3}",
                self.mode, r.iteration, r.worker, r.compute_ms, r.wait_ms
            );
        }
        out
    }

    /// Mean guidance wait per consumer-iteration in stage 1.
    pub fn mean_guidance_wait_ms(&self) -> f64 {
        let waits: Vec<f64> = self
            .timings
            .iter()
            .filter(|r| r.stage == Stage::Structure && r.worker != 0)
            .map(|r| r.wait_ms)
            .collect();
        if waits.is_empty() {
            0.0
        } else {
            waits.iter().sum::<f64>() / waits.len() as f64
        }
    }
}
