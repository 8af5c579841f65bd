//! Noise predictors.
//!
//! A [`NoisePredictor`] maps `(x_t, t, condition)` to an ε estimate plus an
//! optional attention heatmap. Analytic priors give exact posterior
//! predictions so the sampler can be checked without a neural network; the
//! [`remote`] client talks to an out-of-process model over [`wire`].

mod analytic;
pub mod remote;
pub mod wire;

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::ScheduleError;
use crate::tensor::{Shape, Tensor, TensorError};

pub use analytic::{
    analytic_gaussian_eps, gaussian_posterior_mean, gmm_predict, AnalyticPredictor, GaussianPrior, GmmComponent,
    GmmPrior, MeanField, Prior, SIGNAL_DOMINANT_LIMIT,
};
pub use remote::{remote_predict, RemotePredictorClient};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("predictor backend failed: {0}")]
    Backend(String),
    #[error("remote predictor timed out")]
    Timeout,
    #[error("protocol version mismatch: expected {expected}, server speaks {got}")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: Shape, got: Shape },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server reported an error: {0}")]
    Server(String),
    #[error("alpha_bar is exactly 1 at t={t}; noise is undefined")]
    DivisionGuard { t: usize },
    #[error("unknown condition {0:?}")]
    UnknownCondition(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid attention heatmap: {0}")]
    InvalidAttention(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

pub type Result<T> = std::result::Result<T, PredictorError>;

/// Opaque conditioning token; `None` is the unconditional branch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition(pub Option<String>);

impl Condition {
    pub fn none() -> Self {
        Self(None)
    }

    pub fn token(s: impl Into<String>) -> Self {
        Self(Some(s.into()))
    }

    pub fn as_str(&self) -> Option<&str> {
        self.0.as_deref()
    }

    pub fn is_none(&self) -> bool {
        self.0.is_none()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Some(s) => f.write_str(s),
            None => f.write_str("<unconditional>"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub eps_hat: Tensor,
    /// `1 × h × w`, nonnegative.
    pub attention: Option<Tensor>,
}

impl PredictOutput {
    pub fn new(eps_hat: Tensor, attention: Option<Tensor>) -> Result<Self> {
        if let Some(a) = &attention {
            check_attention(a, eps_hat.shape())?;
        }
        Ok(Self { eps_hat, attention })
    }

    pub fn eps_only(eps_hat: Tensor) -> Self {
        Self {
            eps_hat,
            attention: None,
        }
    }
}

fn check_attention(att: &Tensor, latent: Shape) -> Result<()> {
    let s = att.shape();
    if s.channels != 1 || s.height != latent.height || s.width != latent.width {
        return Err(PredictorError::InvalidAttention(format!(
            "heatmap shape {s} does not match latent {latent}"
        )));
    }
    if att.data().iter().any(|v| *v < 0.0) {
        return Err(PredictorError::InvalidAttention("negative value".into()));
    }
    Ok(())
}

/// ε-prediction backend. Implementations must be callable from several
/// worker threads; stateful backends guard their state internally.
pub trait NoisePredictor: Send + Sync {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<PredictOutput>;

    fn name(&self) -> String {
        "predictor".into()
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Box<P> {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<PredictOutput> {
        (**self).predict(x_t, t, cond)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Arc<P> {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<PredictOutput> {
        (**self).predict(x_t, t, cond)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

/// Calls `predictor` and checks the output against the input latent.
pub fn predict(x_t: &Tensor, t: usize, cond: &Condition, predictor: &dyn NoisePredictor) -> Result<PredictOutput> {
    let out = predictor.predict(x_t, t, cond)?;
    if out.eps_hat.shape() != x_t.shape() {
        return Err(PredictorError::ShapeMismatch {
            expected: x_t.shape(),
            got: out.eps_hat.shape(),
        });
    }
    if let Some(a) = &out.attention {
        check_attention(a, x_t.shape())?;
    }
    Ok(out)
}

/// Builds one predictor per worker, so connection-holding backends are never
/// shared across workers.
pub trait PredictorFactory: Sync {
    fn create(&self, worker: usize) -> Result<Box<dyn NoisePredictor>>;
}

impl<F> PredictorFactory for F
where
    F: Fn(usize) -> Result<Box<dyn NoisePredictor>> + Sync,
{
    fn create(&self, worker: usize) -> Result<Box<dyn NoisePredictor>> {
        self(worker)
    }
}

/// Returns `value` everywhere, no attention.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor {
    pub value: f32,
}

impl NoisePredictor for ConstantPredictor {
    fn predict(&self, x_t: &Tensor, _t: usize, _cond: &Condition) -> Result<PredictOutput> {
        Ok(PredictOutput::eps_only(Tensor::full(x_t.shape(), self.value)?))
    }

    fn name(&self) -> String {
        format!("constant({})", self.value)
    }
}

/// Classifier-free guidance: `eps_uncond + w·(eps_cond − eps_uncond)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, w: f32) -> Result<Tensor> {
    Ok(eps_uncond.zip_map(eps_cond, "cfg_combine", |u, c| u + w * (c - u))?)
}

/// Runs the wrapped predictor on the unconditional and conditional branches
/// and combines them. Unconditional requests pass straight through.
pub struct CfgPredictor<P> {
    inner: P,
    scale: f32,
}

impl<P: NoisePredictor> CfgPredictor<P> {
    pub fn new(inner: P, scale: f32) -> Self {
        Self { inner, scale }
    }
}

impl<P: NoisePredictor> NoisePredictor for CfgPredictor<P> {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<PredictOutput> {
        if cond.is_none() {
            return self.inner.predict(x_t, t, cond);
        }
        let uncond = self.inner.predict(x_t, t, &Condition::none())?;
        let cond_out = self.inner.predict(x_t, t, cond)?;
        let eps = cfg_combine(&uncond.eps_hat, &cond_out.eps_hat, self.scale)?;
        Ok(PredictOutput {
            eps_hat: eps,
            attention: cond_out.attention.or(uncond.attention),
        })
    }

    fn name(&self) -> String {
        format!("cfg({}, w={})", self.inner.name(), self.scale)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayKind {
    /// Thread sleeps; overlaps with other workers regardless of core count.
    #[default]
    Sleep,
    /// Busy-wait; models compute that occupies a core.
    Spin,
}

/// Adds a fixed latency to every call of the wrapped predictor.
pub struct DelayedPredictor<P> {
    inner: P,
    delay: Duration,
    kind: DelayKind,
}

impl<P: NoisePredictor> DelayedPredictor<P> {
    pub fn new(inner: P, delay: Duration, kind: DelayKind) -> Self {
        Self { inner, delay, kind }
    }
}

impl<P: NoisePredictor> NoisePredictor for DelayedPredictor<P> {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<PredictOutput> {
        let start = Instant::now();
        let out = self.inner.predict(x_t, t, cond)?;
        match self.kind {
            DelayKind::Sleep => {
                let spent = start.elapsed();
                if spent < self.delay {
                    std::thread::sleep(self.delay - spent);
                }
            }
            DelayKind::Spin => {
                while start.elapsed() < self.delay {
                    std::hint::spin_loop();
                }
            }
        }
        Ok(out)
    }

    fn name(&self) -> String {
        format!("{}+{:?}", self.inner.name(), self.delay)
    }
}
