use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EngineError, Result};
use crate::denoiser::{
    AnalyticPredictor, CfgPredictor, Condition, ConstantPredictor, DelayKind, DelayedPredictor, GaussianPrior,
    GmmComponent, GmmPrior, MeanField, NoisePredictor, PredictorError, PredictorFactory, Prior, RemotePredictorClient,
};
use crate::guidance::{GuidanceConfig, MaskMode};
use crate::patching::{upscale_factor, FuseWindow};
use crate::schedule::{NoiseSchedule, TimestepPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecutorMode {
    Sequential,
    ParallelSync,
    ParallelAsync,
}

impl ExecutorMode {
    pub const ALL: [ExecutorMode; 3] = [
        ExecutorMode::Sequential,
        ExecutorMode::ParallelSync,
        ExecutorMode::ParallelAsync,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExecutorMode::Sequential => "sequential",
            ExecutorMode::ParallelSync => "parallel-sync",
            ExecutorMode::ParallelAsync => "parallel-async",
        }
    }

    /// Whether guidance uses the previous iteration's message.
    pub fn is_stale(&self) -> bool {
        matches!(self, ExecutorMode::ParallelAsync)
    }
}

impl fmt::Display for ExecutorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecutorMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" | "seq" => Ok(ExecutorMode::Sequential),
            "parallel-sync" | "sync" => Ok(ExecutorMode::ParallelSync),
            "parallel-async" | "async" => Ok(ExecutorMode::ParallelAsync),
            other => Err(EngineError::Config(format!(
                "unknown executor mode {other:?} (expected sequential, sync or async)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorKind {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
    Constant(f32),
    /// `host:port`
    Remote {
        addr: String,
        timeout: Duration,
    },
    /// Server spoken to over the stdio of a spawned command.
    RemoteStdio {
        program: String,
        args: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    /// Classifier-free guidance scale; `None` calls the backend once.
    pub cfg_scale: Option<f32>,
    pub cond: Condition,
}

pub fn default_gaussian_prior() -> GaussianPrior {
    GaussianPrior {
        mu: MeanField::Disk {
            inside: 1.0,
            outside: -1.0,
            radius: 0.3,
        },
        sigma0: 0.5,
    }
}

/// Two equally likely global modes: a bright disk or a dark disk.
pub fn default_gmm_prior() -> GmmPrior {
    GmmPrior::new(vec![
        GmmComponent {
            weight: 0.5,
            mu: MeanField::Disk {
                inside: 2.0,
                outside: 0.0,
                radius: 0.3,
            },
            sigma: 0.5,
        },
        GmmComponent {
            weight: 0.5,
            mu: MeanField::Disk {
                inside: -2.0,
                outside: 0.0,
                radius: 0.3,
            },
            sigma: 0.5,
        },
    ])
    .expect("default mixture is valid")
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            kind: PredictorKind::Gmm(default_gmm_prior()),
            cfg_scale: None,
            cond: Condition::none(),
        }
    }
}

impl PredictorSpec {
    pub fn gaussian(prior: GaussianPrior) -> Self {
        Self {
            kind: PredictorKind::Gaussian(prior),
            ..Default::default()
        }
    }

    pub fn constant(value: f32) -> Self {
        Self {
            kind: PredictorKind::Constant(value),
            ..Default::default()
        }
    }

    fn backend(&self, sched: &Arc<NoiseSchedule>) -> crate::denoiser::Result<Box<dyn NoisePredictor>> {
        let analytic = |prior: Prior| {
            let mut p = AnalyticPredictor::new(sched.clone(), prior.clone());
            if let Some(tok) = self.cond.as_str() {
                p = p.with_condition(tok, prior);
            }
            p
        };
        Ok(match &self.kind {
            PredictorKind::Gaussian(p) => Box::new(analytic(Prior::Gaussian(p.clone()))),
            PredictorKind::Gmm(p) => Box::new(analytic(Prior::Gmm(p.clone()))),
            PredictorKind::Constant(v) => Box::new(ConstantPredictor { value: *v }),
            PredictorKind::Remote { addr, timeout } => Box::new(RemotePredictorClient::connect_tcp(addr, *timeout)?),
            PredictorKind::RemoteStdio { program, args } => Box::new(RemotePredictorClient::spawn(program, args)?),
        })
    }
}

/// Builds one predictor per worker from a [`PipelineConfig`].
pub struct SpecFactory {
    spec: PredictorSpec,
    sched: Arc<NoiseSchedule>,
    delay: Duration,
    delay_kind: DelayKind,
}

impl SpecFactory {
    pub fn new(cfg: &PipelineConfig, sched: Arc<NoiseSchedule>) -> Self {
        Self {
            spec: cfg.predictor.clone(),
            sched,
            delay: Duration::from_secs_f64(cfg.injected_delay_ms.max(0.0) / 1000.0),
            delay_kind: cfg.delay_kind,
        }
    }
}

impl PredictorFactory for SpecFactory {
    fn create(&self, _worker: usize) -> std::result::Result<Box<dyn NoisePredictor>, PredictorError> {
        let mut p = self.spec.backend(&self.sched)?;
        if let Some(scale) = self.spec.cfg_scale {
            p = Box::new(CfgPredictor::new(p, scale));
        }
        if !self.delay.is_zero() {
            p = Box::new(DelayedPredictor::new(p, self.delay, self.delay_kind));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    /// Tile overlap in pixels; `None` is a quarter of the smaller base side.
    pub overlap: Option<usize>,
    pub window: FuseWindow,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            overlap: None,
            window: FuseWindow::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Patch (model-native) spatial size.
    pub base_hw: (usize, usize),
    pub target_hw: (usize, usize),
    pub channels: usize,
    pub steps: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
    /// Fraction of steps spent in stage 1.
    pub ratio: f64,
    pub guidance: GuidanceConfig,
    pub executor: ExecutorMode,
    pub workers: usize,
    pub seed: u64,
    pub predictor: PredictorSpec,
    pub injected_delay_ms: f64,
    pub delay_kind: DelayKind,
    /// Simulated broadcast latency of a guidance message.
    pub comm_delay_ms: f64,
    pub pixel_interaction: bool,
    pub stage2: Stage2Config,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            base_hw: (8, 8),
            target_hw: (16, 16),
            channels: 4,
            steps: 50,
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            eta: 0.0,
            ratio: 0.5,
            guidance: GuidanceConfig::default(),
            executor: ExecutorMode::ParallelAsync,
            workers: 4,
            seed: 0,
            predictor: PredictorSpec::default(),
            injected_delay_ms: 0.0,
            delay_kind: DelayKind::Sleep,
            comm_delay_ms: 0.0,
            pixel_interaction: false,
            stage2: Stage2Config::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EngineError::Config(m));
        self.upscale()?;
        if self.channels == 0 {
            return bad("channels must be >= 1".into());
        }
        if self.steps == 0 || self.steps > self.train_steps {
            return bad(format!("steps = {} must be in 1..={}", self.steps, self.train_steps));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return bad(format!("ratio = {} outside [0, 1]", self.ratio));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta = {} outside [0, 1]", self.eta));
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        for (name, v) in [
            ("injected_delay_ms", self.injected_delay_ms),
            ("comm_delay_ms", self.comm_delay_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        self.guidance
            .validate()
            .map_err(|e| EngineError::Config(format!("guidance.w: {e}")))?;
        let overlap = self.overlap();
        if overlap >= self.base_hw.0.min(self.base_hw.1) {
            return bad(format!("stage2.overlap = {overlap} must be smaller than the tile side"));
        }
        if let MaskMode::File(p) = &self.guidance.mask {
            if p.as_os_str().is_empty() {
                return bad("guidance.mask file path is empty".into());
            }
        }
        Ok(())
    }

    pub fn upscale(&self) -> Result<usize> {
        upscale_factor(self.base_hw, self.target_hw).map_err(|e| EngineError::Config(e.to_string()))
    }

    /// `(T1, T2)` with `T1 = round(r·S)`.
    pub fn stage_split(&self) -> (usize, usize) {
        let t1 = ((self.ratio * self.steps as f64).round() as usize).min(self.steps);
        (t1, self.steps - t1)
    }

    pub fn overlap(&self) -> usize {
        self.stage2.overlap.unwrap_or(self.base_hw.0.min(self.base_hw.1) / 4)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end)?)
    }

    pub fn plan(&self) -> Result<TimestepPlan> {
        Ok(TimestepPlan::uniform(self.train_steps, self.steps)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_split_rounds() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(cfg.stage_split(), (25, 25));
        cfg.ratio = 1.0;
        assert_eq!(cfg.stage_split(), (50, 0));
        cfg.ratio = 0.0;
        assert_eq!(cfg.stage_split(), (0, 50));
        cfg.steps = 5;
        cfg.ratio = 0.5;
        assert_eq!(cfg.stage_split(), (3, 2));
    }

    #[test]
    fn validation_names_field() {
        let mut cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        cfg.target_hw = (24, 16);
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig {
            ratio: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("ratio"));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("async".parse::<ExecutorMode>().unwrap(), ExecutorMode::ParallelAsync);
        assert_eq!(
            "parallel-sync".parse::<ExecutorMode>().unwrap(),
            ExecutorMode::ParallelSync
        );
        assert!("turbo".parse::<ExecutorMode>().is_err());
    }
}
