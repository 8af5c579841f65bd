use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{run_pipeline, ExecutorMode, PipelineConfig, Result, RunReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub mode: ExecutorMode,
    pub wall_ms: f64,
    /// Mean stage-1 guidance wait per consumer-iteration.
    pub mean_wait_ms: f64,
    pub speedup_vs_sequential: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub reports: Vec<RunReport>,
}

impl BenchmarkReport {
    pub fn row(&self, mode: ExecutorMode) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>12} {:>14} {:>10}\n",
            "mode", "wall_ms", "mean_wait_ms", "speedup"
        );
        for r in &self.rows {
            let speedup = r.speedup_vs_sequential.map_or("-".to_string(), |s| format!("{s:.2}x"));
            let _ = writeln!(
                out,
                "{:<16} {:>12.1} {:>14.3} {:>10}",
                r.mode.as_str(),
                r.wall_ms,
                r.mean_wait_ms,
                speedup
            );
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("mode,wall_ms,mean_wait_ms,speedup_vs_sequential\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.3},{:.3},{}",
                r.mode,
                r.wall_ms,
                r.mean_wait_ms,
                r.speedup_vs_sequential.map_or(String::new(), |s| format!("{s:.4}"))
            );
        }
        out
    }
}

/// Runs the same work under each mode, in order.
pub fn benchmark(cfg: &PipelineConfig, modes: &[ExecutorMode]) -> Result<BenchmarkReport> {
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let run_cfg = PipelineConfig {
            executor: mode,
            ..cfg.clone()
        };
        let (_, report) = run_pipeline(&run_cfg)?;
        log::info!("benchmark {mode}: {:.1} ms", report.wall_ms);
        reports.push(report);
    }
    let seq = reports
        .iter()
        .find(|r| r.mode == ExecutorMode::Sequential)
        .map(|r| r.wall_ms);
    let rows = reports
        .iter()
        .map(|r| BenchmarkRow {
            mode: r.mode,
            wall_ms: r.wall_ms,
            mean_wait_ms: r.mean_guidance_wait_ms(),
            speedup_vs_sequential: seq.map(|s| s / r.wall_ms),
        })
        .collect();
    Ok(BenchmarkReport { rows, reports })
}
