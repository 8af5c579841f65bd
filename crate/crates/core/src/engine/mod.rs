//! Two-stage pipeline orchestration.
//!
//! ```no_run
//! use asg_core::engine::{run_pipeline, ExecutorMode, PipelineConfig};
//!
//! let cfg = PipelineConfig { executor: ExecutorMode::ParallelAsync, seed: 7, ..Default::default() };
//! let (latent, report) = run_pipeline(&cfg).unwrap();
//! println!("{} {}", latent.checksum(), report.wall_ms);
//! ```

mod benchmark;
mod config;
mod report;
mod stage1;
mod stage2;

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::denoiser::{NoisePredictor, PredictOutput, PredictorError, PredictorFactory};
use crate::guidance::{normalize_attention, AttentionMask, GuidanceError, GuidanceMessage, MaskMode};
use crate::metrics::{self, MetricError, MetricReport, TileGeometry};
use crate::patching::{interleave_merge, interleave_split, PatchError, PatchSet};
use crate::rng::{SeededRng, StreamDomain, RNG_ALGORITHM};
use crate::schedule::{NoiseSchedule, ScheduleError, TimestepPlan};
use crate::tensor::{Tensor, TensorError};

pub use benchmark::{benchmark, BenchmarkReport, BenchmarkRow};
pub use config::{
    default_gaussian_prior, default_gmm_prior, ExecutorMode, PipelineConfig, PredictorKind, PredictorSpec, SpecFactory,
    Stage2Config,
};
pub use report::{RunReport, Stage, StageOutput, StalenessEntry, TimingRecord};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot create predictor for worker {worker}: {source}")]
    PredictorSetup {
        worker: usize,
        #[source]
        source: PredictorError,
    },
    #[error("{stage} iteration {iteration}: worker {worker} failed on patch {patch}: {source}")]
    Predictor {
        worker: usize,
        patch: usize,
        stage: Stage,
        iteration: usize,
        #[source]
        source: PredictorError,
    },
    #[error("{stage} iteration {iteration}: worker {worker} lost contact with its peers")]
    Disconnected {
        worker: usize,
        stage: Stage,
        iteration: usize,
    },
    #[error("worker {0} panicked")]
    WorkerPanicked(usize),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Structure => f.write_str("stage 1"),
            Stage::Refine => f.write_str("stage 2"),
        }
    }
}

pub(crate) struct StageContext<'a> {
    pub cfg: &'a PipelineConfig,
    pub sched: &'a NoiseSchedule,
    pub pairs: &'a [(usize, usize)],
    /// Run-wide number of `pairs[0]`, 1-based.
    pub first_iteration: usize,
    pub file_mask: Option<&'a AttentionMask>,
}

impl StageContext<'_> {
    pub fn guidance_active(&self, patches: usize) -> bool {
        self.cfg.guidance.w > 0.0 && patches > 1
    }

    pub fn make_message(&self, iteration: usize, out0: &PredictOutput) -> Result<GuidanceMessage> {
        let s = out0.eps_hat.shape();
        let mask = match &self.cfg.guidance.mask {
            MaskMode::Off => None,
            MaskMode::Constant => Some(AttentionMask::ones(s.height, s.width)?),
            MaskMode::Attention => Some(match &out0.attention {
                Some(a) => normalize_attention(a)?,
                None => AttentionMask::ones(s.height, s.width)?,
            }),
            MaskMode::File(_) => self.file_mask.cloned(),
        };
        Ok(GuidanceMessage {
            iteration,
            eps0: out0.eps_hat.clone(),
            mask,
        })
    }
}

/// The `c × H × W` starting noise for a run.
pub fn initial_latent(cfg: &PipelineConfig) -> Result<Tensor> {
    let mut rng = SeededRng::derived(cfg.seed, StreamDomain::InitialNoise, 0);
    Ok(Tensor::randn(
        [cfg.channels, cfg.target_hw.0, cfg.target_hw.1],
        &mut rng,
    )?)
}

/// A validated config with its schedule and per-worker predictors.
pub struct Pipeline {
    cfg: PipelineConfig,
    sched: Arc<NoiseSchedule>,
    plan: TimestepPlan,
    predictors: Vec<Box<dyn NoisePredictor>>,
    file_mask: Option<AttentionMask>,
}

impl Pipeline {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let sched = Arc::new(cfg.schedule()?);
        let factory = SpecFactory::new(cfg, sched.clone());
        Self::build(cfg, sched, &factory)
    }

    pub fn with_factory(cfg: &PipelineConfig, factory: &dyn PredictorFactory) -> Result<Self> {
        let sched = Arc::new(cfg.schedule()?);
        Self::build(cfg, sched, factory)
    }

    fn build(cfg: &PipelineConfig, sched: Arc<NoiseSchedule>, factory: &dyn PredictorFactory) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.plan()?;
        let file_mask = match &cfg.guidance.mask {
            MaskMode::File(path) => {
                let m = AttentionMask::read(path)
                    .map_err(|e| EngineError::Config(format!("guidance.mask {}: {e}", path.display())))?;
                let s = m.values().shape();
                if (s.height, s.width) != cfg.base_hw {
                    return Err(EngineError::Config(format!(
                        "guidance.mask {} is {}x{}, patches are {}x{}",
                        path.display(),
                        s.height,
                        s.width,
                        cfg.base_hw.0,
                        cfg.base_hw.1
                    )));
                }
                Some(m)
            }
            _ => None,
        };
        let n = match cfg.executor {
            ExecutorMode::Sequential => 1,
            _ => cfg.workers,
        };
        let predictors = (0..n)
            .map(|w| {
                factory
                    .create(w)
                    .map_err(|source| EngineError::PredictorSetup { worker: w, source })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            sched,
            plan,
            predictors,
            file_mask,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn context(&self, range: std::ops::Range<usize>) -> StageContext<'_> {
        StageContext {
            cfg: &self.cfg,
            sched: &self.sched,
            first_iteration: range.start + 1,
            pairs: &self.plan.pairs()[range],
            file_mask: self.file_mask.as_ref(),
        }
    }

    /// Stage 1 from `hr` (pure noise at the first timestep). Returns the
    /// final interleaved patches.
    pub fn run_stage1(&self, hr: &Tensor) -> Result<(PatchSet, StageOutput)> {
        let (t1, _) = self.cfg.stage_split();
        let ctx = self.context(0..t1);
        let ps = interleave_split(hr, self.cfg.upscale()?)?;
        match self.cfg.executor {
            ExecutorMode::Sequential => stage1::run_sequential(&ctx, &*self.predictors[0], ps, false),
            ExecutorMode::ParallelSync => stage1::run_parallel(&ctx, &self.predictors, ps, false),
            ExecutorMode::ParallelAsync => stage1::run_parallel(&ctx, &self.predictors, ps, true),
        }
    }

    /// Single-threaded stage 1 with either staleness rule; reference for
    /// the parallel executors.
    #[doc(hidden)]
    pub fn run_stage1_reference(&self, hr: &Tensor, stale: bool) -> Result<(PatchSet, StageOutput)> {
        let (t1, _) = self.cfg.stage_split();
        let ctx = self.context(0..t1);
        let ps = interleave_split(hr, self.cfg.upscale()?)?;
        stage1::run_sequential(&ctx, &*self.predictors[0], ps, stale)
    }

    /// Stage 2 from the stage-1 handoff latent. Returns the final latent and
    /// the tile count.
    pub fn run_stage2(&self, hr: Tensor) -> Result<(Tensor, StageOutput, usize)> {
        let (t1, _) = self.cfg.stage_split();
        let ctx = self.context(t1..self.cfg.steps);
        let parallel = self.cfg.executor != ExecutorMode::Sequential;
        stage2::run(&ctx, &self.predictors, hr, parallel)
    }

    pub fn run(&self) -> Result<(Tensor, RunReport)> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let s = cfg.upscale()?;
        let (t1, t2) = cfg.stage_split();
        let mut latent = initial_latent(cfg)?;
        let mut metrics = Vec::new();

        let mut s1 = StageOutput::default();
        if t1 > 0 {
            let (ps, out) = self.run_stage1(&latent)?;
            if ps.len() > 1 {
                metrics.push(MetricReport::new(
                    "stage1_disagreement",
                    metrics::structure_disagreement(&ps)?,
                )?);
            }
            latent = interleave_merge(&ps)?;
            s1 = out;
        }

        let mut s2 = StageOutput::default();
        let mut tiles = 0;
        if t2 > 0 {
            let (out_latent, out, n) = self.run_stage2(latent)?;
            latent = out_latent;
            s2 = out;
            tiles = n;
            let geometry = TileGeometry {
                patch_h: cfg.base_hw.0,
                patch_w: cfg.base_hw.1,
                overlap: cfg.overlap(),
            };
            let seam = metrics::seam_discontinuity(&latent, &geometry)?;
            match MetricReport::new("seam_discontinuity", seam) {
                Ok(m) => metrics.push(m),
                Err(_) => log::warn!("seam discontinuity is {seam}; not reported"),
            }
        }
        if s > 1 {
            let ps = interleave_split(&latent, s)?;
            metrics.push(MetricReport::new(
                "final_disagreement",
                metrics::structure_disagreement(&ps)?,
            )?);
        }

        let mut timings = s1.timings;
        timings.extend(s2.timings);
        let mut staleness = s1.staleness;
        staleness.extend(s2.staleness);
        let report = RunReport {
            mode: cfg.executor,
            workers: self.predictors.len(),
            seed: cfg.seed,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            patches: if t1 > 0 { s * s } else { 0 },
            stage1_iterations: t1,
            stage2_iterations: t2,
            stage2_tiles: tiles,
            wall_ms: start.elapsed().as_secs_f64() * 1000.0,
            stage1_ms: s1.wall_ms,
            stage2_ms: s2.wall_ms,
            timings,
            staleness,
            checksum: latent.checksum(),
            metrics,
        };
        log::info!(
            "{} run finished in {:.1} ms ({} + {} iterations)",
            cfg.executor,
            report.wall_ms,
            t1,
            t2
        );
        Ok((latent, report))
    }
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(Tensor, RunReport)> {
    Pipeline::new(cfg)?.run()
}

pub fn run_pipeline_with(cfg: &PipelineConfig, factory: &dyn PredictorFactory) -> Result<(Tensor, RunReport)> {
    Pipeline::with_factory(cfg, factory)?.run()
}
